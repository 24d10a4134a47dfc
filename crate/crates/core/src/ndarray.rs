//! Dense n-dimensional arrays, zero-copy views and the tile decomposition
//! used by tiled operators.
//!
//! An [`NdArray`] is a strided view into a shared, immutable buffer. Slicing,
//! narrowing and tiling never copy; only [`concat`], [`stack`] and the
//! elementwise operators allocate fresh (row-major) buffers.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, Weak};

use thiserror::Error;

/// Size in bytes of every element, for both supported element types.
pub const ELEM_BYTES: u64 = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArrayError {
    #[error("data length {got} does not match shape {shape:?} (expected {expected})")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("index {index} out of bounds for extent {extent}")]
    IndexOutOfBounds { index: usize, extent: usize },
    #[error("tile size must be at least 1, got {0}")]
    InvalidTileSize(usize),
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("cannot concatenate or stack an empty list of arrays")]
    Empty,
    #[error("integer division by zero")]
    DivisionByZero,
    #[error("malformed array text: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, ArrayError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ElemType {
    I64,
    F64,
}

impl fmt::Display for ElemType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ElemType::I64 => f.write_str("i64"),
            ElemType::F64 => f.write_str("f64"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layout {
    RowMajor,
    ColMajor,
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layout::RowMajor => f.write_str("row"),
            Layout::ColMajor => f.write_str("col"),
        }
    }
}

/// A single element value.
#[derive(Debug, Clone, Copy)]
pub enum Scalar {
    Int(i64),
    Float(f64),
}

impl Scalar {
    pub fn elem_type(self) -> ElemType {
        match self {
            Scalar::Int(_) => ElemType::I64,
            Scalar::Float(_) => ElemType::F64,
        }
    }

    pub fn as_f64(self) -> f64 {
        match self {
            Scalar::Int(v) => v as f64,
            Scalar::Float(v) => v,
        }
    }

    pub fn is_truthy(self) -> bool {
        match self {
            Scalar::Int(v) => v != 0,
            Scalar::Float(v) => v != 0.0,
        }
    }
}

/// Bitwise equality for floats so that `NaN == NaN` and round-trips compare exactly.
impl PartialEq for Scalar {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Scalar::Int(a), Scalar::Int(b)) => a == b,
            (Scalar::Float(a), Scalar::Float(b)) => a.to_bits() == b.to_bits() || a == b,
            _ => false,
        }
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Int(v) => write!(f, "{v}"),
            Scalar::Float(v) => write!(f, "{v:?}"),
        }
    }
}

/// Binary elementwise operators. `Min`/`Max` are written infix in the IR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Min => "min",
            BinOp::Max => "max",
        }
    }

    /// Applies the operator with int ⊙ float → float promotion.
    pub fn apply(self, a: Scalar, b: Scalar) -> Result<Scalar> {
        match (a, b) {
            (Scalar::Int(x), Scalar::Int(y)) => Ok(Scalar::Int(match self {
                BinOp::Add => x.wrapping_add(y),
                BinOp::Sub => x.wrapping_sub(y),
                BinOp::Mul => x.wrapping_mul(y),
                BinOp::Div => {
                    if y == 0 {
                        return Err(ArrayError::DivisionByZero);
                    }
                    x.wrapping_div(y)
                }
                BinOp::Min => x.min(y),
                BinOp::Max => x.max(y),
            })),
            _ => {
                let (x, y) = (a.as_f64(), b.as_f64());
                Ok(Scalar::Float(match self {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => x / y,
                    BinOp::Min => x.min(y),
                    BinOp::Max => x.max(y),
                }))
            }
        }
    }
}

#[derive(Debug)]
enum Data {
    I64(Vec<i64>),
    F64(Vec<f64>),
}

impl Data {
    fn len(&self) -> usize {
        match self {
            Data::I64(v) => v.len(),
            Data::F64(v) => v.len(),
        }
    }

    fn get(&self, i: usize) -> Scalar {
        match self {
            Data::I64(v) => Scalar::Int(v[i]),
            Data::F64(v) => Scalar::Float(v[i]),
        }
    }
}

static NEXT_BUFFER_ID: AtomicU64 = AtomicU64::new(0);

#[derive(Debug)]
struct Buffer {
    id: u64,
    data: Data,
}

impl Buffer {
    fn new(data: Data) -> Arc<Self> {
        Arc::new(Buffer {
            id: NEXT_BUFFER_ID.fetch_add(1, Ordering::Relaxed),
            data,
        })
    }
}

/// A strided, immutable view of a shared element buffer.
#[derive(Clone)]
pub struct NdArray {
    buf: Arc<Buffer>,
    shape: Vec<usize>,
    strides: Vec<usize>,
    offset: usize,
    layout: Layout,
}

fn contiguous_strides(shape: &[usize], layout: Layout) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1usize;
    match layout {
        Layout::RowMajor => {
            for ax in (0..shape.len()).rev() {
                strides[ax] = acc;
                acc *= shape[ax].max(1);
            }
        }
        Layout::ColMajor => {
            for ax in 0..shape.len() {
                strides[ax] = acc;
                acc *= shape[ax].max(1);
            }
        }
    }
    strides
}

impl NdArray {
    fn from_data(shape: Vec<usize>, data: Data, layout: Layout) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(ArrayError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        let strides = contiguous_strides(&shape, layout);
        Ok(NdArray {
            buf: Buffer::new(data),
            shape,
            strides,
            offset: 0,
            layout,
        })
    }

    /// Builds an array from elements given in `layout` order.
    pub fn from_i64(shape: Vec<usize>, data: Vec<i64>, layout: Layout) -> Result<Self> {
        Self::from_data(shape, Data::I64(data), layout)
    }

    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>, layout: Layout) -> Result<Self> {
        Self::from_data(shape, Data::F64(data), layout)
    }

    /// Builds an array from scalars (in `layout` order), promoting to f64 if any
    /// element is a float.
    pub fn from_scalars(shape: Vec<usize>, data: Vec<Scalar>, layout: Layout) -> Result<Self> {
        if data.iter().any(|s| matches!(s, Scalar::Float(_))) {
            Self::from_f64(shape, data.into_iter().map(Scalar::as_f64).collect(), layout)
        } else {
            let ints = data
                .into_iter()
                .map(|s| match s {
                    Scalar::Int(v) => v,
                    Scalar::Float(_) => unreachable!(),
                })
                .collect();
            Self::from_i64(shape, ints, layout)
        }
    }

    /// Rank-0 wrapper around a scalar.
    pub fn scalar(s: Scalar) -> Self {
        Self::from_scalars(vec![], vec![s], Layout::RowMajor).expect("rank-0 shape")
    }

    /// A rank-1 vector of i64 values.
    pub fn vector_i64(v: Vec<i64>) -> Self {
        let n = v.len();
        Self::from_i64(vec![n], v, Layout::RowMajor).expect("vector shape")
    }

    pub fn vector_f64(v: Vec<f64>) -> Self {
        let n = v.len();
        Self::from_f64(vec![n], v, Layout::RowMajor).expect("vector shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn elem_type(&self) -> ElemType {
        match self.buf.data {
            Data::I64(_) => ElemType::I64,
            Data::F64(_) => ElemType::F64,
        }
    }

    /// Identity of the underlying buffer, shared by all views of it.
    pub fn buffer_id(&self) -> u64 {
        self.buf.id
    }

    /// Length of the underlying buffer in elements.
    pub fn buffer_len(&self) -> usize {
        self.buf.data.len()
    }

    /// Position in the underlying buffer of the element at `index`.
    pub fn buffer_index(&self, index: &[usize]) -> usize {
        self.offset + index.iter().zip(&self.strides).map(|(i, s)| i * s).sum::<usize>()
    }

    pub fn get(&self, index: &[usize]) -> Result<Scalar> {
        if index.len() != self.rank() {
            return Err(ArrayError::ShapeMismatch {
                left: self.shape.clone(),
                right: index.to_vec(),
            });
        }
        for (&i, &n) in index.iter().zip(&self.shape) {
            if i >= n {
                return Err(ArrayError::IndexOutOfBounds { index: i, extent: n });
            }
        }
        Ok(self.buf.data.get(self.buffer_index(index)))
    }

    /// Reads the element at buffer position `pos`.
    pub fn read_buffer(&self, pos: usize) -> Scalar {
        self.buf.data.get(pos)
    }

    /// The single element of a rank-0 array.
    pub fn scalar_value(&self) -> Option<Scalar> {
        (self.rank() == 0).then(|| self.buf.data.get(self.offset))
    }

    fn check_axis(&self, axis: usize) -> Result<()> {
        if axis >= self.rank() {
            return Err(ArrayError::AxisOutOfRange {
                axis,
                rank: self.rank(),
            });
        }
        Ok(())
    }

    /// Fixes `axis` at position `i`, dropping that dimension.
    pub fn slice_axis(&self, axis: usize, i: usize) -> Result<NdArray> {
        self.check_axis(axis)?;
        if i >= self.shape[axis] {
            return Err(ArrayError::IndexOutOfBounds {
                index: i,
                extent: self.shape[axis],
            });
        }
        Ok(self.slice_axis_unchecked(axis, i))
    }

    /// As [`slice_axis`](Self::slice_axis) without validating `axis` or `i`.
    pub fn slice_axis_unchecked(&self, axis: usize, i: usize) -> NdArray {
        let mut shape = self.shape.clone();
        let mut strides = self.strides.clone();
        let stride = strides.remove(axis);
        shape.remove(axis);
        NdArray {
            buf: self.buf.clone(),
            shape,
            strides,
            offset: self.offset + i * stride,
            layout: self.layout,
        }
    }

    /// Restricts `axis` to `[offset, offset + extent)`, keeping the rank.
    pub fn narrow(&self, axis: usize, offset: usize, extent: usize) -> Result<NdArray> {
        self.check_axis(axis)?;
        if offset + extent > self.shape[axis] {
            return Err(ArrayError::IndexOutOfBounds {
                index: offset + extent,
                extent: self.shape[axis],
            });
        }
        let mut out = self.clone();
        out.shape[axis] = extent;
        if extent > 0 {
            out.offset += offset * self.strides[axis];
        }
        Ok(out)
    }

    /// Buffer positions of every element in logical row-major order.
    pub fn buffer_positions(&self) -> Vec<usize> {
        self.positions_in_order(&(0..self.rank()).collect::<Vec<_>>())
    }

    /// Buffer positions visiting axes in `order` (outermost first).
    pub fn positions_in_order(&self, order: &[usize]) -> Vec<usize> {
        let n = self.len();
        let mut out = Vec::with_capacity(n);
        if n == 0 {
            return out;
        }
        let mut idx = vec![0usize; self.rank()];
        loop {
            out.push(self.buffer_index(&idx));
            let mut k = order.len();
            loop {
                if k == 0 {
                    return out;
                }
                k -= 1;
                let ax = order[k];
                idx[ax] += 1;
                if idx[ax] < self.shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
    }

    /// Elements in logical row-major order.
    pub fn to_scalars(&self) -> Vec<Scalar> {
        self.buffer_positions()
            .into_iter()
            .map(|p| self.buf.data.get(p))
            .collect()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.to_scalars().into_iter().map(Scalar::as_f64).collect()
    }

    pub fn to_i64_vec(&self) -> Option<Vec<i64>> {
        self.to_scalars()
            .into_iter()
            .map(|s| match s {
                Scalar::Int(v) => Some(v),
                Scalar::Float(_) => None,
            })
            .collect()
    }

    /// Contiguous copy with the requested layout.
    pub fn to_layout(&self, layout: Layout) -> NdArray {
        let order: Vec<usize> = match layout {
            Layout::RowMajor => (0..self.rank()).collect(),
            Layout::ColMajor => (0..self.rank()).rev().collect(),
        };
        let data = self
            .positions_in_order(&order)
            .into_iter()
            .map(|p| self.buf.data.get(p))
            .collect();
        NdArray::from_scalars(self.shape.clone(), data, layout).expect("shape preserved")
    }

    /// Splits `axis` into tiles of extent `k` plus an optional straggler.
    pub fn decompose(&self, axis: usize, k: usize) -> Result<Vec<TileView>> {
        TileView::whole(self).decompose(axis, k)
    }
}

impl PartialEq for NdArray {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.to_scalars() == other.to_scalars()
    }
}

impl fmt::Debug for NdArray {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "NdArray({}, shape={:?}, layout={}, {})",
            self.elem_type(),
            self.shape,
            self.layout,
            self
        )
    }
}

impl fmt::Display for NdArray {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn rec(a: &NdArray, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            if let Some(s) = a.scalar_value() {
                return write!(f, "{s}");
            }
            f.write_str("[")?;
            for i in 0..a.shape[0] {
                if i > 0 {
                    f.write_str(", ")?;
                }
                rec(&a.slice_axis_unchecked(0, i), f)?;
            }
            f.write_str("]")
        }
        rec(self, f)
    }
}

/// A rank-preserving window onto a base array: one `(offset, extent)` pair per axis.
#[derive(Clone, Debug)]
pub struct TileView {
    base: NdArray,
    ranges: Vec<(usize, usize)>,
    is_straggler: bool,
}

impl TileView {
    /// The view covering all of `base`.
    pub fn whole(base: &NdArray) -> TileView {
        TileView {
            base: base.clone(),
            ranges: base.shape.iter().map(|&n| (0, n)).collect(),
            is_straggler: false,
        }
    }

    pub fn base(&self) -> &NdArray {
        &self.base
    }

    pub fn ranges(&self) -> &[(usize, usize)] {
        &self.ranges
    }

    pub fn is_straggler(&self) -> bool {
        self.is_straggler
    }

    pub fn rank(&self) -> usize {
        self.ranges.len()
    }

    pub fn extent(&self, axis: usize) -> usize {
        self.ranges[axis].1
    }

    /// Zero-copy array view of the tile.
    pub fn view(&self) -> NdArray {
        let mut out = self.base.clone();
        for (ax, &(off, ext)) in self.ranges.iter().enumerate() {
            out.shape[ax] = ext;
            if ext > 0 {
                out.offset += off * out.strides[ax];
            }
        }
        out
    }

    /// Splits this view along `axis` into `⌊L/k⌋` tiles of extent `k`, followed by a
    /// straggler of extent `L mod k` when `k` does not divide `L`.
    pub fn decompose(&self, axis: usize, k: usize) -> Result<Vec<TileView>> {
        if axis >= self.rank() {
            return Err(ArrayError::AxisOutOfRange {
                axis,
                rank: self.rank(),
            });
        }
        if k == 0 {
            return Err(ArrayError::InvalidTileSize(k));
        }
        let (start, len) = self.ranges[axis];
        let full = len / k;
        let rest = len % k;
        let mut tiles = Vec::with_capacity(full + usize::from(rest > 0));
        let piece = |off: usize, ext: usize, straggler: bool| {
            let mut ranges = self.ranges.clone();
            ranges[axis] = (start + off, ext);
            TileView {
                base: self.base.clone(),
                ranges,
                is_straggler: straggler,
            }
        };
        for t in 0..full {
            tiles.push(piece(t * k, k, false));
        }
        if rest > 0 {
            tiles.push(piece(full * k, rest, true));
        }
        Ok(tiles)
    }
}

/// Splits `x` along `axis` into tiles of extent `k` (see [`TileView::decompose`]).
pub fn decompose(x: &NdArray, axis: usize, k: usize) -> Result<Vec<TileView>> {
    x.decompose(axis, k)
}

/// Drops `axis` of `x` at position `i`.
pub fn slice_axis(x: &NdArray, axis: usize, i: usize) -> Result<NdArray> {
    x.slice_axis(axis, i)
}

/// Concatenates arrays of equal rank along an existing axis into a new row-major array.
pub fn concat(parts: &[NdArray], axis: usize) -> Result<NdArray> {
    let first = parts.first().ok_or(ArrayError::Empty)?;
    first.check_axis(axis)?;
    let mut shape = first.shape.clone();
    shape[axis] = 0;
    for p in parts {
        let mut expect = first.shape.clone();
        expect[axis] = p.shape.get(axis).copied().unwrap_or(0);
        if p.shape != expect {
            return Err(ArrayError::ShapeMismatch {
                left: first.shape.clone(),
                right: p.shape.clone(),
            });
        }
        shape[axis] += p.shape[axis];
    }
    // Row-major fill: for each outer index, copy each part's block in turn.
    let outer: usize = shape[..axis].iter().product();
    let mut data = Vec::with_capacity(shape.iter().product());
    let per_part: Vec<Vec<Scalar>> = parts.iter().map(NdArray::to_scalars).collect();
    for o in 0..outer {
        for (p, vals) in parts.iter().zip(&per_part) {
            let block: usize = p.shape[axis..].iter().product();
            data.extend_from_slice(&vals[o * block..(o + 1) * block]);
        }
    }
    NdArray::from_scalars(shape, data, Layout::RowMajor)
}

/// Stacks equally shaped arrays along a new leading axis.
pub fn stack(parts: &[NdArray]) -> Result<NdArray> {
    let first = parts.first().ok_or(ArrayError::Empty)?;
    let mut data = Vec::with_capacity(parts.len() * first.len());
    for p in parts {
        if p.shape != first.shape {
            return Err(ArrayError::ShapeMismatch {
                left: first.shape.clone(),
                right: p.shape.clone(),
            });
        }
        data.extend(p.to_scalars());
    }
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(&first.shape);
    NdArray::from_scalars(shape, data, Layout::RowMajor)
}

/// Stacks equally shaped arrays along a new axis at position `axis`.
pub fn stack_axis(parts: &[NdArray], axis: usize) -> Result<NdArray> {
    let first = parts.first().ok_or(ArrayError::Empty)?;
    if axis > first.rank() {
        return Err(ArrayError::AxisOutOfRange {
            axis,
            rank: first.rank() + 1,
        });
    }
    let expanded: Vec<NdArray> = parts
        .iter()
        .map(|p| {
            let mut v = p.clone();
            v.shape.insert(axis.min(v.shape.len()), 1);
            v.strides.insert(axis.min(v.strides.len()), 0);
            v
        })
        .collect();
    if expanded.iter().any(|p| p.shape != expanded[0].shape) {
        let bad = parts.iter().find(|p| p.shape != first.shape).expect("mismatch");
        return Err(ArrayError::ShapeMismatch {
            left: first.shape.clone(),
            right: bad.shape.clone(),
        });
    }
    concat(&expanded, axis)
}

/// Operand of an elementwise operation: a bare scalar or an array.
#[derive(Clone, Debug)]
pub enum Operand<'a> {
    Scalar(Scalar),
    Array(&'a NdArray),
}

/// Applies `op` elementwise. Shapes must match unless one side is a scalar.
pub fn elementwise(op: BinOp, a: Operand<'_>, b: Operand<'_>) -> Result<NdArray> {
    let (shape, av, bv): (Vec<usize>, Vec<Scalar>, Vec<Scalar>) = match (a, b) {
        (Operand::Scalar(x), Operand::Scalar(y)) => {
            return Ok(NdArray::scalar(op.apply(x, y)?));
        }
        (Operand::Array(x), Operand::Scalar(y)) => (x.shape.clone(), x.to_scalars(), vec![y; x.len()]),
        (Operand::Scalar(x), Operand::Array(y)) => (y.shape.clone(), vec![x; y.len()], y.to_scalars()),
        (Operand::Array(x), Operand::Array(y)) => {
            if x.shape != y.shape {
                return Err(ArrayError::ShapeMismatch {
                    left: x.shape.clone(),
                    right: y.shape.clone(),
                });
            }
            (x.shape.clone(), x.to_scalars(), y.to_scalars())
        }
    };
    let data = av
        .into_iter()
        .zip(bv)
        .map(|(x, y)| op.apply(x, y))
        .collect::<Result<Vec<_>>>()?;
    NdArray::from_scalars(shape, data, Layout::RowMajor)
}

/// Byte addresses (`base + buffer position × 8`) of the elements of `x`, visiting
/// axes in `order` (outermost first).
pub fn trace_addresses(x: &NdArray, order: &[usize], base: u64) -> Vec<u64> {
    x.positions_in_order(order)
        .into_iter()
        .map(|p| base + p as u64 * ELEM_BYTES)
        .collect()
}

/// Assigns simulated base addresses to buffers on first touch.
///
/// Buffers are placed back to back, each aligned to `align` bytes, in the order
/// they are first touched. Addresses depend only on the touch order.
#[derive(Debug)]
pub struct AddressSpace {
    align: u64,
    inner: Mutex<Heap>,
}

/// Simulated allocator: blocks of dead buffers are reused for new buffers of
/// the same aligned size, most recently freed first.
#[derive(Debug, Default)]
struct Heap {
    next: u64,
    live: BTreeMap<u64, (u64, u64, Weak<Buffer>)>,
    free: BTreeMap<u64, Vec<u64>>,
}

impl Default for AddressSpace {
    fn default() -> Self {
        AddressSpace::new(64)
    }
}

impl AddressSpace {
    pub fn new(align: u64) -> Self {
        AddressSpace {
            align: align.max(1),
            inner: Mutex::new(Heap::default()),
        }
    }

    /// Base address of the buffer backing `x`, allocating it if needed.
    pub fn base_of(&self, x: &NdArray) -> u64 {
        let mut heap = self.inner.lock().expect("address space poisoned");
        if let Some(&(b, _, _)) = heap.live.get(&x.buffer_id()) {
            return b;
        }
        let heap = &mut *heap;
        let dead: Vec<u64> = heap
            .live
            .iter()
            .filter(|(_, (_, _, w))| w.strong_count() == 0)
            .map(|(id, _)| *id)
            .collect();
        for id in dead {
            let (base, size, _) = heap.live.remove(&id).expect("listed");
            heap.free.entry(size).or_default().push(base);
        }
        let size = (x.buffer_len() as u64 * ELEM_BYTES).max(1).div_ceil(self.align) * self.align;
        let base = match heap.free.get_mut(&size).and_then(Vec::pop) {
            Some(b) => b,
            None => {
                let b = heap.next;
                heap.next += size;
                b
            }
        };
        heap.live.insert(x.buffer_id(), (base, size, Arc::downgrade(&x.buf)));
        base
    }

    /// Address of the element at buffer position `pos` of `x`.
    pub fn address(&self, x: &NdArray, pos: usize) -> u64 {
        self.base_of(x) + pos as u64 * ELEM_BYTES
    }
}

/// Parses the array text format:
///
/// ```text
/// shape: 2 3
/// dtype: i64
/// layout: row
/// 1 2 3 4 5 6
/// ```
pub fn parse_array_text(text: &str) -> Result<NdArray> {
    let mut shape = None;
    let mut dtype = None;
    let mut layout = None;
    let mut body = String::new();
    for line in text.lines() {
        let trimmed = line.trim();
        if let Some(rest) = trimmed.strip_prefix("shape:") {
            let dims = rest
                .split_whitespace()
                .map(|d| {
                    d.parse::<usize>()
                        .map_err(|_| ArrayError::Format(format!("bad dimension `{d}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            shape = Some(dims);
        } else if let Some(rest) = trimmed.strip_prefix("dtype:") {
            dtype = Some(match rest.trim() {
                "i64" => ElemType::I64,
                "f64" => ElemType::F64,
                other => return Err(ArrayError::Format(format!("unknown dtype `{other}`"))),
            });
        } else if let Some(rest) = trimmed.strip_prefix("layout:") {
            layout = Some(match rest.trim() {
                "row" => Layout::RowMajor,
                "col" => Layout::ColMajor,
                other => return Err(ArrayError::Format(format!("unknown layout `{other}`"))),
            });
        } else {
            body.push_str(trimmed);
            body.push(' ');
        }
    }
    let shape = shape.ok_or_else(|| ArrayError::Format("missing `shape:` header".into()))?;
    let dtype = dtype.ok_or_else(|| ArrayError::Format("missing `dtype:` header".into()))?;
    let layout = layout.unwrap_or(Layout::RowMajor);
    let toks = body.split_whitespace();
    match dtype {
        ElemType::I64 => {
            let data = toks
                .map(|t| {
                    t.parse::<i64>()
                        .map_err(|_| ArrayError::Format(format!("bad i64 element `{t}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            NdArray::from_i64(shape, data, layout)
        }
        ElemType::F64 => {
            let data = toks
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| ArrayError::Format(format!("bad f64 element `{t}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            NdArray::from_f64(shape, data, layout)
        }
    }
}

/// Writes `x` in the array text format, elements in its own layout order.
pub fn format_array_text(x: &NdArray) -> String {
    let order: Vec<usize> = match x.layout() {
        Layout::RowMajor => (0..x.rank()).collect(),
        Layout::ColMajor => (0..x.rank()).rev().collect(),
    };
    let dims: Vec<String> = x.shape().iter().map(usize::to_string).collect();
    let elems: Vec<String> = x
        .positions_in_order(&order)
        .into_iter()
        .map(|p| x.read_buffer(p).to_string())
        .collect();
    format!(
        "shape: {}\ndtype: {}\nlayout: {}\n{}\n",
        dims.join(" "),
        x.elem_type(),
        x.layout(),
        elems.join(" ")
    )
}
