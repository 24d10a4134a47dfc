//! Reference interpreter for untiled and tiled programs.
//!
//! Tiled adverbs decompose their arguments into rank-preserving tiles, run the
//! fixed-size variant `f^k` on every full tile and the generic `f` on the
//! straggler, then concatenate (map), fold with the lifted combine (reduce) or
//! carry the previous tile's last element forward (scan).

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use thiserror::Error;

use crate::ir::{Adverb, AdverbOp, AllPairs, Block, Expr, FixedExtent, Name, Program, Stmt, TileInfo};
use crate::ndarray::{concat, elementwise, stack_axis, AddressSpace, ArrayError, NdArray, Operand, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("unbound variable `{0}`")]
    UnboundVariable(Name),
    #[error("unknown function `{0}`")]
    UnknownFunction(Name),
    #[error("function `{name}` expects {expected} arguments, got {got}")]
    Arity { name: Name, expected: usize, got: usize },
    #[error("function `{0}` finished without returning a value")]
    NoReturn(Name),
    #[error("axis {axis} is not valid for an argument of rank {rank}")]
    BadAxis { axis: usize, rank: usize },
    #[error("{kind} arguments disagree on extent: {extents:?}")]
    ExtentMismatch { kind: String, extents: Vec<usize> },
    #[error("fixed-size function `{name}` (k = {k}) invoked on a tile of extent {extent}")]
    FixedExtentViolated { name: Name, k: usize, extent: usize },
    #[error("no tile size for slot {0}")]
    MissingTileSize(usize),
    #[error("type error: {0}")]
    Type(String),
    #[error(transparent)]
    Array(#[from] ArrayError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// A runtime value: a bare scalar or an array (possibly a view).
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Scalar(Scalar),
    Array(NdArray),
}

impl Value {
    pub fn int(v: i64) -> Value {
        Value::Scalar(Scalar::Int(v))
    }

    pub fn float(v: f64) -> Value {
        Value::Scalar(Scalar::Float(v))
    }

    pub fn as_array(&self) -> Option<&NdArray> {
        match self {
            Value::Array(a) => Some(a),
            Value::Scalar(_) => None,
        }
    }

    pub fn as_scalar(&self) -> Option<Scalar> {
        match self {
            Value::Scalar(s) => Some(*s),
            Value::Array(a) => a.scalar_value(),
        }
    }

    /// The value as an array (scalars become rank-0 arrays).
    pub fn to_array(&self) -> NdArray {
        match self {
            Value::Scalar(s) => NdArray::scalar(*s),
            Value::Array(a) => a.clone(),
        }
    }

    /// All elements in logical order, as f64.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            Value::Scalar(s) => vec![s.as_f64()],
            Value::Array(a) => a.to_f64_vec(),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            Value::Scalar(_) => vec![],
            Value::Array(a) => a.shape().to_vec(),
        }
    }

    /// Order-sensitive checksum: Σ (i+1)·x_i over elements in logical order.
    pub fn checksum(&self) -> f64 {
        self.to_f64_vec()
            .iter()
            .enumerate()
            .map(|(i, x)| (i as f64 + 1.0) * x)
            .sum()
    }
}

impl std::fmt::Display for Value {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Value::Scalar(s) => write!(f, "{s}"),
            Value::Array(a) => write!(f, "{a}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccessKind {
    Read,
    Write,
}

/// Receives every simulated element access in program order.
pub trait TraceSink: Send + Sync {
    fn record(&self, address: u64, kind: AccessKind);
}

/// Collects the trace into memory.
#[derive(Debug, Default)]
pub struct VecSink {
    events: Mutex<Vec<(u64, AccessKind)>>,
}

impl VecSink {
    pub fn new() -> Self {
        VecSink::default()
    }

    pub fn events(&self) -> Vec<(u64, AccessKind)> {
        self.events.lock().expect("sink poisoned").clone()
    }

    pub fn reads(&self) -> Vec<u64> {
        self.events()
            .into_iter()
            .filter(|(_, k)| *k == AccessKind::Read)
            .map(|(a, _)| a)
            .collect()
    }
}

impl TraceSink for VecSink {
    fn record(&self, address: u64, kind: AccessKind) {
        self.events.lock().expect("sink poisoned").push((address, kind));
    }
}

#[derive(Clone)]
pub struct EvalConfig {
    /// Worker threads for the outermost tiled operator; 1 = sequential.
    pub parallelism: usize,
    /// Tile size per TileSpec slot (register slots included).
    pub tile_sizes: Vec<usize>,
    /// Check that `f^k` only ever sees tiles of extent k.
    pub check_fixed: bool,
    /// Element access trace; forces sequential evaluation.
    pub trace: Option<Arc<dyn TraceSink>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            parallelism: 1,
            tile_sizes: Vec::new(),
            check_fixed: true,
            trace: None,
        }
    }
}

impl EvalConfig {
    pub fn with_tile_sizes(tile_sizes: Vec<usize>) -> Self {
        EvalConfig {
            tile_sizes,
            ..EvalConfig::default()
        }
    }
}

impl std::fmt::Debug for EvalConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EvalConfig")
            .field("parallelism", &self.parallelism)
            .field("tile_sizes", &self.tile_sizes)
            .field("check_fixed", &self.check_fixed)
            .field("trace", &self.trace.is_some())
            .finish()
    }
}

/// Per-slot dispatch counts of a tiled operator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SlotCounts {
    /// Calls of the fixed-size variant on full tiles.
    pub fixed_calls: u64,
    /// Calls of the generic function (straggler or empty input).
    pub generic_calls: u64,
}

/// Largest iteration extent and argument ranks a tiled operator was run with.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SlotShape {
    pub max_extent: usize,
    pub arg_ranks: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EvalStats {
    pub slots: BTreeMap<usize, SlotCounts>,
    pub shapes: BTreeMap<usize, SlotShape>,
    /// Slices taken with bounds checking (the fast path inside `f^k` skips them).
    pub bounds_checks: u64,
}

struct Tracer {
    space: AddressSpace,
    sink: Arc<dyn TraceSink>,
}

impl Tracer {
    fn read(&self, x: &NdArray, pos: usize) {
        self.sink.record(self.space.address(x, pos), AccessKind::Read);
    }

    fn write_all(&self, x: &NdArray) {
        for p in x.buffer_positions() {
            self.sink.record(self.space.address(x, p), AccessKind::Write);
        }
    }
}

/// Evaluates functions of one program under one configuration.
pub struct Interpreter<'p> {
    program: &'p Program,
    config: EvalConfig,
    tracer: Option<Tracer>,
    pool: Option<rayon::ThreadPool>,
    slots: Mutex<BTreeMap<usize, SlotCounts>>,
    shapes: Mutex<BTreeMap<usize, SlotShape>>,
    bounds_checks: AtomicU64,
}

/// Per-call context.
#[derive(Clone, Copy)]
struct Ctx {
    /// Extent this frame's function was specialized for.
    fixed: Option<usize>,
    /// Number of tiled operators currently being evaluated around this call.
    tiled_nesting: usize,
}

type Frame = HashMap<Name, Value>;

impl<'p> Interpreter<'p> {
    pub fn new(program: &'p Program, config: EvalConfig) -> Self {
        let tracer = config.trace.clone().map(|sink| Tracer {
            space: AddressSpace::default(),
            sink,
        });
        let pool = (config.parallelism > 1 && tracer.is_none()).then(|| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(config.parallelism)
                .build()
                .expect("thread pool")
        });
        Interpreter {
            program,
            config,
            tracer,
            pool,
            slots: Mutex::new(BTreeMap::new()),
            shapes: Mutex::new(BTreeMap::new()),
            bounds_checks: AtomicU64::new(0),
        }
    }

    pub fn stats(&self) -> EvalStats {
        EvalStats {
            slots: self.slots.lock().expect("counters poisoned").clone(),
            shapes: self.shapes.lock().expect("counters poisoned").clone(),
            bounds_checks: self.bounds_checks.load(Ordering::Relaxed),
        }
    }

    /// Calls `name` with `args` (closure parameters are not supplied).
    pub fn eval_function(&self, name: &str, args: Vec<Value>) -> Result<Value> {
        let ctx = Ctx {
            fixed: None,
            tiled_nesting: 0,
        };
        self.call(name, args, &HashMap::new(), ctx)
    }

    fn function(&self, name: &str) -> Result<&'p crate::ir::Function> {
        self.program
            .get(name)
            .ok_or_else(|| EvalError::UnknownFunction(name.to_string()))
    }

    fn fixed_extent(&self, fe: FixedExtent) -> Result<usize> {
        match fe {
            FixedExtent::Const(k) => Ok(k),
            FixedExtent::Slot(s) => self.tile_size(s),
        }
    }

    fn tile_size(&self, slot: usize) -> Result<usize> {
        match self.config.tile_sizes.get(slot) {
            Some(&k) if k >= 1 => Ok(k),
            Some(&k) => Err(ArrayError::InvalidTileSize(k).into()),
            None => Err(EvalError::MissingTileSize(slot)),
        }
    }

    /// Calls `name`; its closure parameters are looked up in `caller`.
    fn call(&self, name: &str, args: Vec<Value>, caller: &Frame, ctx: Ctx) -> Result<Value> {
        let f = self.function(name)?;
        if f.params.len() != args.len() {
            return Err(EvalError::Arity {
                name: name.to_string(),
                expected: f.params.len(),
                got: args.len(),
            });
        }
        let mut frame: Frame = HashMap::with_capacity(f.params.len() + f.closure.len());
        for c in &f.closure {
            let v = caller.get(c).ok_or_else(|| EvalError::UnboundVariable(c.clone()))?;
            frame.insert(c.clone(), v.clone());
        }
        for (p, v) in f.params.iter().zip(args) {
            frame.insert(p.clone(), v);
        }
        let fixed = match f.fixed_extent {
            Some(fe) => Some(self.fixed_extent(fe)?),
            None => None,
        };
        let ctx = Ctx { fixed, ..ctx };
        match self.exec_block(&f.body, &mut frame, ctx)? {
            Some(v) => Ok(v),
            None => Err(EvalError::NoReturn(name.to_string())),
        }
    }

    fn exec_block(&self, block: &Block, frame: &mut Frame, ctx: Ctx) -> Result<Option<Value>> {
        for s in block {
            match s {
                Stmt::Assign(x, e) => {
                    let v = self.eval(e, frame, ctx)?;
                    frame.insert(x.clone(), v);
                }
                Stmt::Return(e) => return self.eval(e, frame, ctx).map(Some),
                Stmt::If {
                    cond,
                    then_block,
                    else_block,
                } => {
                    let c = self
                        .eval(cond, frame, ctx)?
                        .as_scalar()
                        .ok_or_else(|| EvalError::Type("if condition must be a scalar".into()))?;
                    let branch = if c.is_truthy() { then_block } else { else_block };
                    if let Some(v) = self.exec_block(branch, frame, ctx)? {
                        return Ok(Some(v));
                    }
                }
                Stmt::For { var, seq, body } => {
                    let seq = match self.eval(seq, frame, ctx)? {
                        Value::Array(a) if a.rank() >= 1 => a,
                        _ => return Err(EvalError::Type("for loop over a non-array".into())),
                    };
                    for i in 0..seq.shape()[0] {
                        let item = self.slice(&seq, 0, i, false)?;
                        frame.insert(var.clone(), item);
                        if let Some(v) = self.exec_block(body, frame, ctx)? {
                            return Ok(Some(v));
                        }
                    }
                }
            }
        }
        Ok(None)
    }

    /// Slices `x` along `axis`; rank-0 results become scalars (an element read).
    fn slice(&self, x: &NdArray, axis: usize, i: usize, unchecked: bool) -> Result<Value> {
        let s = if unchecked {
            x.slice_axis_unchecked(axis, i)
        } else {
            x.slice_axis(axis, i)?
        };
        Ok(self.demote(s))
    }

    fn demote(&self, s: NdArray) -> Value {
        match s.scalar_value() {
            Some(v) => {
                if let Some(t) = &self.tracer {
                    t.read(&s, s.buffer_index(&[]));
                }
                Value::Scalar(v)
            }
            None => Value::Array(s),
        }
    }

    /// A freshly assembled output: record one write per element.
    fn assembled(&self, x: NdArray) -> Value {
        if let Some(t) = &self.tracer {
            t.write_all(&x);
        }
        Value::Array(x)
    }

    fn eval(&self, e: &Expr, frame: &Frame, ctx: Ctx) -> Result<Value> {
        match e {
            Expr::Const(s) => Ok(Value::Scalar(*s)),
            Expr::Var(v) => frame
                .get(v)
                .cloned()
                .ok_or_else(|| EvalError::UnboundVariable(v.clone())),
            Expr::BinOp(op, a, b) => {
                let a = self.eval(a, frame, ctx)?;
                let b = self.eval(b, frame, ctx)?;
                self.binop(*op, &a, &b)
            }
            Expr::ArrayLit(items) => {
                let vals = items
                    .iter()
                    .map(|i| self.eval(i, frame, ctx))
                    .collect::<Result<Vec<_>>>()?;
                self.assemble(vals, 0)
            }
            Expr::Index(a, i) => {
                let a = match self.eval(a, frame, ctx)? {
                    Value::Array(a) if a.rank() >= 1 => a,
                    _ => return Err(EvalError::Type("indexing a non-array".into())),
                };
                let i = match self.eval(i, frame, ctx)?.as_scalar() {
                    Some(Scalar::Int(i)) if i >= 0 => i as usize,
                    Some(Scalar::Int(i)) => {
                        return Err(EvalError::Type(format!("negative index {i}")));
                    }
                    _ => return Err(EvalError::Type("index must be an integer".into())),
                };
                self.slice(&a, 0, i, false)
            }
            Expr::Adverb(a) => self.eval_adverb(a, frame, ctx),
            Expr::AllPairs(ap) => self.eval_allpairs(ap, frame, ctx),
        }
    }

    fn binop(&self, op: crate::ndarray::BinOp, a: &Value, b: &Value) -> Result<Value> {
        if let (Value::Scalar(x), Value::Scalar(y)) = (a, b) {
            return Ok(Value::Scalar(op.apply(*x, *y)?));
        }
        fn operand(v: &Value) -> Operand<'_> {
            match v {
                Value::Scalar(s) => Operand::Scalar(*s),
                Value::Array(x) => Operand::Array(x),
            }
        }
        let out = elementwise(op, operand(a), operand(b))?;
        if let Some(t) = &self.tracer {
            for v in [a, b] {
                if let Value::Array(x) = v {
                    for p in x.buffer_positions() {
                        t.read(x, p);
                    }
                }
            }
        }
        Ok(self.assembled(out))
    }

    /// Builds an array from per-index results placed along `axis`.
    fn assemble(&self, vals: Vec<Value>, axis: usize) -> Result<Value> {
        if vals.is_empty() {
            return Ok(self.assembled(NdArray::vector_i64(vec![])));
        }
        let parts: Vec<NdArray> = vals.iter().map(Value::to_array).collect();
        Ok(self.assembled(stack_axis(&parts, axis)?))
    }

    fn eval_args(
        &self,
        args: &[Expr],
        axes: &[usize],
        frame: &Frame,
        ctx: Ctx,
        kind: &str,
    ) -> Result<(Vec<NdArray>, usize)> {
        let mut arrays = Vec::with_capacity(args.len());
        for (e, &axis) in args.iter().zip(axes) {
            let v = self.eval(e, frame, ctx)?;
            let a = match v {
                Value::Array(a) => a,
                Value::Scalar(_) => return Err(EvalError::BadAxis { axis, rank: 0 }),
            };
            if axis >= a.rank() {
                return Err(EvalError::BadAxis { axis, rank: a.rank() });
            }
            arrays.push(a);
        }
        let extents: Vec<usize> = arrays.iter().zip(axes).map(|(a, &ax)| a.shape()[ax]).collect();
        if extents.windows(2).any(|w| w[0] != w[1]) {
            return Err(EvalError::ExtentMismatch {
                kind: kind.to_string(),
                extents,
            });
        }
        Ok((arrays, extents.first().copied().unwrap_or(0)))
    }

    fn eval_adverb(&self, a: &Adverb, frame: &Frame, ctx: Ctx) -> Result<Value> {
        let kind = a.kind().to_string();
        let (arrays, extent) = self.eval_args(&a.args, &a.axes, frame, ctx, &kind)?;
        let init = match a.op.init() {
            Some(e) => Some(self.eval(e, frame, ctx)?),
            None => None,
        };
        if let Some(t) = &a.tile {
            return self.eval_tiled(a, t, &arrays, extent, init, frame, ctx);
        }

        // Inside f^k, loops over the fixed extent need no bounds checks.
        let unchecked = ctx.fixed == Some(extent);
        let slices = |i: usize| -> Result<Vec<Value>> {
            if !unchecked {
                self.bounds_checks.fetch_add(1, Ordering::Relaxed);
            }
            arrays
                .iter()
                .zip(&a.axes)
                .map(|(x, &ax)| self.slice(x, ax, i, unchecked))
                .collect()
        };
        let inner = Ctx { fixed: None, ..ctx };
        match &a.op {
            AdverbOp::Map => {
                let mut out = Vec::with_capacity(extent);
                for i in 0..extent {
                    out.push(self.call(&a.func, slices(i)?, frame, inner)?);
                }
                self.assemble(out, 0)
            }
            AdverbOp::Reduce { combine, .. } => {
                let mut acc = init.expect("reduce has init");
                for i in 0..extent {
                    let x = self.call(&a.func, slices(i)?, frame, inner)?;
                    acc = self.call(combine, vec![acc, x], frame, inner)?;
                }
                Ok(acc)
            }
            AdverbOp::Scan { combine, emit, .. } => {
                let mut acc = init.expect("scan has init");
                let mut out = Vec::with_capacity(extent);
                for i in 0..extent {
                    let x = self.call(&a.func, slices(i)?, frame, inner)?;
                    acc = self.call(combine, vec![acc, x], frame, inner)?;
                    out.push(match emit {
                        Some(em) => self.call(em, vec![acc.clone()], frame, inner)?,
                        None => acc.clone(),
                    });
                }
                self.assemble(out, 0)
            }
        }
    }

    fn eval_allpairs(&self, ap: &AllPairs, frame: &Frame, ctx: Ctx) -> Result<Value> {
        let (left, n) = self.eval_args(std::slice::from_ref(&ap.left), &ap.axes[..1], frame, ctx, "AllPairs")?;
        let (right, m) = self.eval_args(std::slice::from_ref(&ap.right), &ap.axes[1..], frame, ctx, "AllPairs")?;
        let inner = Ctx { fixed: None, ..ctx };
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            self.bounds_checks.fetch_add(1, Ordering::Relaxed);
            let x = self.slice(&left[0], ap.axes[0], i, false)?;
            let mut row = Vec::with_capacity(m);
            for j in 0..m {
                self.bounds_checks.fetch_add(1, Ordering::Relaxed);
                let y = self.slice(&right[0], ap.axes[1], j, false)?;
                row.push(self.call(&ap.func, vec![x.clone(), y], frame, inner)?);
            }
            rows.push(self.assemble(row, 0)?);
        }
        self.assemble(rows, 0)
    }

    fn count(&self, slot: usize, fixed: bool) {
        let mut slots = self.slots.lock().expect("counters poisoned");
        let c = slots.entry(slot).or_default();
        if fixed {
            c.fixed_calls += 1;
        } else {
            c.generic_calls += 1;
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn eval_tiled(
        &self,
        a: &Adverb,
        t: &TileInfo,
        arrays: &[NdArray],
        extent: usize,
        init: Option<Value>,
        frame: &Frame,
        ctx: Ctx,
    ) -> Result<Value> {
        let k = self.tile_size(t.slot)?;
        {
            let mut shapes = self.shapes.lock().expect("counters poisoned");
            let s = shapes.entry(t.slot).or_default();
            s.max_extent = s.max_extent.max(extent);
            if s.arg_ranks.len() < arrays.len() {
                s.arg_ranks.resize(arrays.len(), 0);
            }
            for (r, x) in s.arg_ranks.iter_mut().zip(arrays) {
                *r = (*r).max(x.rank());
            }
        }
        let inner = Ctx {
            fixed: None,
            tiled_nesting: ctx.tiled_nesting + 1,
        };

        // The nested call only sees names the nested functions capture.
        let mut captured: Frame = HashMap::new();
        for name in a.function_refs() {
            for c in &self.function(name)?.closure {
                if let Some(v) = frame.get(c) {
                    captured.insert(c.clone(), v.clone());
                }
            }
        }

        let tiles: Vec<Vec<NdArray>> = if extent == 0 {
            vec![arrays.to_vec()]
        } else {
            let per_arg = arrays
                .iter()
                .zip(&a.axes)
                .map(|(x, &ax)| x.decompose(ax, k))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            (0..per_arg[0].len())
                .map(|i| per_arg.iter().map(|ts| ts[i].view()).collect())
                .collect()
        };
        let full = extent / k;
        let fixed_fn = t.fixed_fn.as_deref().unwrap_or(&a.func);
        let fixed_k = match self.function(fixed_fn)?.fixed_extent {
            Some(fe) => Some(self.fixed_extent(fe)?),
            None => None,
        };

        let run = |i: usize, tile: &Vec<NdArray>| -> Result<Value> {
            let is_full = i < full;
            let name = if is_full { fixed_fn } else { a.func.as_str() };
            if is_full && self.config.check_fixed {
                if let Some(k) = fixed_k {
                    for (x, &ax) in tile.iter().zip(&a.axes) {
                        if x.shape()[ax] != k {
                            return Err(EvalError::FixedExtentViolated {
                                name: name.to_string(),
                                k,
                                extent: x.shape()[ax],
                            });
                        }
                    }
                }
            }
            self.count(t.slot, is_full);
            let args = tile.iter().cloned().map(Value::Array).collect();
            self.call(name, args, &captured, inner)
        };

        let results: Vec<Value> = match &self.pool {
            Some(pool) if ctx.tiled_nesting == 0 && full > 1 => {
                let mut out: Vec<Value> = pool.install(|| {
                    tiles[..full]
                        .par_iter()
                        .enumerate()
                        .map(|(i, tile)| run(i, tile))
                        .collect::<Result<Vec<_>>>()
                })?;
                for (i, tile) in tiles.iter().enumerate().skip(full) {
                    out.push(run(i, tile)?);
                }
                out
            }
            _ => tiles
                .iter()
                .enumerate()
                .map(|(i, tile)| run(i, tile))
                .collect::<Result<Vec<_>>>()?,
        };

        match &a.op {
            AdverbOp::Map => {
                let parts = results
                    .iter()
                    .map(|r| self.tile_result(r, t.depth))
                    .collect::<Result<Vec<_>>>()?;
                Ok(self.assembled(concat(&parts, t.depth)?))
            }
            AdverbOp::Reduce { combine, .. } => {
                let _ = init;
                let mut it = results.into_iter();
                let mut acc = it.next().expect("at least one tile");
                for r in it {
                    acc = self.call(combine, vec![acc, r], &captured, inner)?;
                }
                Ok(acc)
            }
            AdverbOp::Scan { combine, emit, .. } => {
                let mut slices: Vec<Value> = Vec::with_capacity(extent);
                let mut last: Option<Value> = None;
                for r in &results {
                    let r = self.tile_result(r, t.depth)?;
                    let n = r.shape()[t.depth];
                    let mut tile_slices = Vec::with_capacity(n);
                    for j in 0..n {
                        let s = self.slice(&r, t.depth, j, false)?;
                        tile_slices.push(match &last {
                            Some(prev) => self.call(combine, vec![prev.clone(), s], &captured, inner)?,
                            None => s,
                        });
                    }
                    last = tile_slices.last().cloned().or(last);
                    slices.extend(tile_slices);
                }
                if extent == 0 {
                    return Ok(results.into_iter().next().expect("one call"));
                }
                if let Some(em) = emit {
                    slices = slices
                        .into_iter()
                        .map(|s| self.call(em, vec![s], &captured, inner))
                        .collect::<Result<Vec<_>>>()?;
                }
                self.assemble(slices, t.depth)
            }
        }
    }

    fn tile_result(&self, r: &Value, depth: usize) -> Result<NdArray> {
        match r {
            Value::Array(x) if x.rank() > depth => Ok(x.clone()),
            other => Err(EvalError::Type(format!(
                "tile result of shape {:?} has no axis {depth}",
                other.shape()
            ))),
        }
    }
}

/// Evaluates the program's entry function.
pub fn eval_program(program: &Program, args: Vec<Value>, config: EvalConfig) -> Result<(Value, EvalStats)> {
    let interp = Interpreter::new(program, config);
    let v = interp.eval_function(crate::ir::ENTRY, args)?;
    Ok((v, interp.stats()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{parse_program, parse_program_with, ParseOptions};
    use crate::ndarray::Layout;

    fn run(src: &str, args: Vec<Value>) -> Value {
        let p = parse_program(src).unwrap();
        eval_program(&p, args, EvalConfig::default()).unwrap().0
    }

    fn ints(v: &[i64]) -> Value {
        Value::Array(NdArray::vector_i64(v.to_vec()))
    }

    const ADD: &str = "fn add1(x) { return x + 1; } fn add2(a, b) { return a + b; } fn id(x) { return x; }
                       fn max2(a, b) { return a max b; }";

    #[test]
    fn scalar_function_and_indexing() {
        assert_eq!(
            run("fn main(x) { return x + 1; }", vec![Value::int(41)]),
            Value::int(42)
        );
        assert_eq!(
            run("fn main(x) { return [10, 20, 30][1]; }", vec![Value::int(0)]),
            Value::int(20)
        );
        assert_eq!(
            run(
                "fn main(xs) { s = 0; for x in xs { s = s + x; } return s; }",
                vec![ints(&[1, 2, 3])]
            ),
            Value::int(6)
        );
    }

    #[test]
    fn map_reduce_scan() {
        let src = |body: &str| format!("{ADD} fn main(xs, ys) {{ {body} }}");
        let xs = ints(&[1, 2, 3]);
        assert_eq!(
            run(&src("return map(add1, xs);"), vec![xs.clone(), xs.clone()]),
            ints(&[2, 3, 4])
        );
        assert_eq!(
            run(&src("return map(add2, xs, ys);"), vec![ints(&[1, 2]), ints(&[10, 20])]),
            ints(&[11, 22])
        );
        assert_eq!(
            run(&src("return map(add1, xs);"), vec![ints(&[]), xs.clone()]),
            ints(&[])
        );
        assert_eq!(
            run(
                &src("return reduce(id, combine=add2, init=0, xs);"),
                vec![ints(&[1, 2, 3, 4]), xs.clone()]
            ),
            Value::int(10)
        );
        assert_eq!(
            run(
                &src("return reduce(id, combine=add2, init=7, xs);"),
                vec![ints(&[]), xs.clone()]
            ),
            Value::int(7)
        );
        assert_eq!(
            run(
                &src("return reduce(id, combine=max2, init=-inf, xs);"),
                vec![ints(&[3, 1, 4, 1, 5]), xs.clone()]
            ),
            Value::float(5.0)
        );
        assert_eq!(
            run(
                &src("return scan(id, combine=add2, init=0, xs);"),
                vec![xs.clone(), xs.clone()]
            ),
            ints(&[1, 3, 6])
        );
        assert_eq!(
            run(
                &src("return scan(id, combine=add2, init=0, xs);"),
                vec![ints(&[7]), xs.clone()]
            ),
            ints(&[7])
        );
        assert_eq!(
            run(
                &src("return scan(id, combine=add2, emit=add1, init=0, xs);"),
                vec![xs.clone(), xs]
            ),
            ints(&[2, 4, 7])
        );
    }

    #[test]
    fn extent_mismatch_and_bad_axis() {
        let p = parse_program(&format!("{ADD} fn main(a, b) {{ return map(add2, a, b); }}")).unwrap();
        let err = eval_program(&p, vec![ints(&[1, 2]), ints(&[1])], EvalConfig::default()).unwrap_err();
        assert!(matches!(err, EvalError::ExtentMismatch { .. }));
        let p = parse_program(&format!("{ADD} fn main(a) {{ return map(add1, a; axes=[1]); }}")).unwrap();
        let err = eval_program(&p, vec![ints(&[1, 2])], EvalConfig::default()).unwrap_err();
        assert_eq!(err, EvalError::BadAxis { axis: 1, rank: 1 });
    }

    fn tiled(body: &str) -> Program {
        let src = format!(
            "{ADD}
             fn addk(x) fixed(slot 0) {{ return map(add1, x); }}
             fn addg(x) {{ return map(add1, x); }}
             fn idk(x) fixed(slot 0) {{ return reduce(id, combine=add2, init=0, x); }}
             fn idg(x) {{ return reduce(id, combine=add2, init=0, x); }}
             fn sck(x) fixed(slot 0) {{ return scan(id, combine=add2, init=0, x); }}
             fn scg(x) {{ return scan(id, combine=add2, init=0, x); }}
             fn main(xs) {{ {body} }}"
        );
        parse_program_with(&src, ParseOptions { allow_tiled: true }).unwrap()
    }

    fn one_to(n: i64) -> Value {
        ints(&(1..=n).collect::<Vec<_>>())
    }

    #[test]
    fn tiled_map_counts_and_matches() {
        let p = tiled("return tiledmap[slot=0, depth=0, fk=addk](addg, xs);");
        let (v, stats) = eval_program(&p, vec![one_to(10)], EvalConfig::with_tile_sizes(vec![3])).unwrap();
        assert_eq!(v, ints(&(2..=11).collect::<Vec<_>>()));
        assert_eq!(
            stats.slots[&0],
            SlotCounts {
                fixed_calls: 3,
                generic_calls: 1
            }
        );
        let (_, stats) = eval_program(&p, vec![one_to(10)], EvalConfig::with_tile_sizes(vec![10])).unwrap();
        assert_eq!(stats.slots[&0].generic_calls, 0);
        assert_eq!(stats.slots[&0].fixed_calls, 1);
    }

    #[test]
    fn tiled_reduce_and_scan() {
        let p = tiled("return tiledreduce[slot=0, depth=0, fk=idk](idg, combine=add2, init=0, xs);");
        let (v, _) = eval_program(&p, vec![one_to(10)], EvalConfig::with_tile_sizes(vec![4])).unwrap();
        assert_eq!(v, Value::int(55));
        let (v, stats) = eval_program(&p, vec![one_to(2)], EvalConfig::with_tile_sizes(vec![5])).unwrap();
        assert_eq!(v, Value::int(3));
        assert_eq!(stats.slots[&0].fixed_calls, 0);

        let p = tiled("return tiledscan[slot=0, depth=0, fk=sck](scg, combine=add2, init=0, xs);");
        let (v, _) = eval_program(&p, vec![one_to(10)], EvalConfig::with_tile_sizes(vec![4])).unwrap();
        assert_eq!(v, ints(&[1, 3, 6, 10, 15, 21, 28, 36, 45, 55]));
    }

    #[test]
    fn fixed_extent_assertion_fires() {
        // Slot 1 drives the tiling but f^k is compiled for slot 0's size.
        let p = tiled("return tiledmap[slot=1, depth=0, fk=addk](addg, xs);");
        let err = eval_program(&p, vec![one_to(8)], EvalConfig::with_tile_sizes(vec![3, 4])).unwrap_err();
        assert_eq!(
            err,
            EvalError::FixedExtentViolated {
                name: "addk".into(),
                k: 3,
                extent: 4
            }
        );
    }

    #[test]
    fn fast_path_skips_bounds_checks() {
        let p = tiled("return xs;");
        let interp = Interpreter::new(&p, EvalConfig::with_tile_sizes(vec![4]));
        let v = interp.eval_function("addk", vec![one_to(4)]).unwrap();
        assert_eq!(v, ints(&[2, 3, 4, 5]));
        assert_eq!(interp.stats().bounds_checks, 0);
        let interp = Interpreter::new(&p, EvalConfig::with_tile_sizes(vec![4]));
        interp.eval_function("addg", vec![one_to(4)]).unwrap();
        assert_eq!(interp.stats().bounds_checks, 4);
    }

    #[test]
    fn parallel_matches_sequential() {
        let p = tiled("return tiledreduce[slot=0, depth=0, fk=idk](idg, combine=add2, init=0, xs);");
        let config = EvalConfig {
            parallelism: 4,
            ..EvalConfig::with_tile_sizes(vec![3])
        };
        let (v, _) = eval_program(&p, vec![one_to(100)], config).unwrap();
        assert_eq!(v, Value::int(5050));
    }

    #[test]
    fn trace_of_row_sum() {
        let src = format!(
            "{ADD} fn row(r) {{ return reduce(id, combine=add2, init=0, r); }}
             fn main(xs) {{ return map(row, xs); }}"
        );
        let p = parse_program(&src).unwrap();
        for (layout, expected) in [(Layout::RowMajor, [0, 8, 16, 24]), (Layout::ColMajor, [0, 16, 8, 24])] {
            let x = NdArray::from_i64(vec![2, 2], vec![1, 2, 3, 4], layout).unwrap();
            let sink = Arc::new(VecSink::new());
            let config = EvalConfig {
                trace: Some(sink.clone()),
                ..EvalConfig::default()
            };
            eval_program(&p, vec![Value::Array(x)], config).unwrap();
            assert_eq!(sink.reads(), expected);
        }
    }
}
