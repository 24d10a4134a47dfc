//! Benchmark corpus: the programs, seeded input generation, host reference
//! implementations and a runner that checks every variant against the
//! untiled result.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::autotuner::{
    autotune, estimate_bounds, observe_shapes, ProbeKind, TuneConfig, TuneError, WorkingSetEstimator,
};
use crate::cachesim::{simulate_program, HardwareInfo, SimulateError};
use crate::ir::{parse_program, IrError, Program};
use crate::ndarray::{ElemType, Layout, NdArray};
use crate::semantics::{eval_program, EvalConfig, EvalError, Value};
use crate::tiling::{register_tile, tile_program, TileOutcome, TileSpec, Unchanged};

/// Sum each row of a 2-D array.
pub const SUM_ROWS: &str = "\
fn add2(a, b) { return a + b; }
fn sum_row(row) { return reduce(fn(x) { return x; }, combine=add2, init=0, row; axes=[0]); }
fn main(Xs) { return map(sum_row, Xs; axes=[0]); }
";

/// `Xs · Ysᵀ`: both operands are iterated by rows, so `Ys` holds the
/// right-hand matrix pre-transposed.
pub const MATMUL: &str = "\
fn mul2(x, y) { return x * y; }
fn add2(a, b) { return a + b; }
fn dot(x, y) { return reduce(mul2, combine=add2, init=0, x, y; axes=[0, 0]); }
fn main(Xs, Ys) { return allpairs(dot, Xs, Ys; axes=[0, 0]); }
";

/// Add one to every element of a vector.
pub const ADD1: &str = "\
fn add1(x) { return x + 1; }
fn main(x) { return map(add1, x; axes=[0]); }
";

/// Squared Euclidean distance from every point to every centroid.
pub const KMEANS_DIST: &str = "\
fn add2(a, b) { return a + b; }
fn sqdiff(a, b) { d = a - b; return d * d; }
fn sqdist(p, c) { return reduce(sqdiff, combine=add2, init=0.0, p, c; axes=[0, 0]); }
fn main(P, C) { return allpairs(sqdist, P, C; axes=[0, 0]); }
";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Benchmark {
    pub name: &'static str,
    pub source: &'static str,
    pub description: &'static str,
}

pub const CORPUS: &[Benchmark] = &[
    Benchmark {
        name: "sum_rows",
        source: SUM_ROWS,
        description: "row sums of an n×n matrix",
    },
    Benchmark {
        name: "matmul",
        source: MATMUL,
        description: "n×n matrix product via allpairs of row dot products",
    },
    Benchmark {
        name: "add1",
        source: ADD1,
        description: "add one to each element of an n²-vector",
    },
    Benchmark {
        name: "kmeans",
        source: KMEANS_DIST,
        description: "Lloyd's k-means with an allpairs distance kernel",
    },
];

pub fn find(name: &str) -> Option<&'static Benchmark> {
    CORPUS.iter().find(|b| b.name == name)
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("unknown benchmark `{0}`")]
    Unknown(String),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error(transparent)]
    Ir(#[from] IrError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tune(#[from] TuneError),
    #[error(transparent)]
    Simulate(#[from] SimulateError),
    #[error("{benchmark}: variant `{variant}` disagrees with the untiled result ({detail})")]
    Mismatch {
        benchmark: String,
        variant: String,
        detail: String,
    },
}

/// Seeded input description, written `SHAPE[:DTYPE[:LAYOUT[:SEED]]]`, e.g.
/// `256x256:f64:col:42`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenSpec {
    pub shape: Vec<usize>,
    pub dtype: ElemType,
    pub layout: Layout,
    pub seed: u64,
}

impl GenSpec {
    pub fn new(shape: Vec<usize>, dtype: ElemType, layout: Layout, seed: u64) -> Self {
        GenSpec {
            shape,
            dtype,
            layout,
            seed,
        }
    }

    /// f64 elements uniform in [-1, 1); i64 elements uniform in [-9, 9].
    pub fn generate(&self) -> NdArray {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let n: usize = self.shape.iter().product();
        let arr = match self.dtype {
            ElemType::F64 => NdArray::from_f64(
                self.shape.clone(),
                (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
                Layout::RowMajor,
            ),
            ElemType::I64 => NdArray::from_i64(
                self.shape.clone(),
                (0..n).map(|_| rng.random_range(-9..=9)).collect(),
                Layout::RowMajor,
            ),
        };
        arr.expect("element count matches shape").to_layout(self.layout)
    }
}

impl FromStr for GenSpec {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |m: String| BenchError::Param(format!("generator `{s}`: {m}"));
        let mut parts = s.split(':');
        let shape = parts
            .next()
            .filter(|p| !p.is_empty())
            .ok_or_else(|| bad("missing shape".into()))?
            .split('x')
            .map(|d| d.parse::<usize>().map_err(|_| bad(format!("bad dimension `{d}`"))))
            .collect::<Result<Vec<_>, _>>()?;
        let dtype = match parts.next() {
            None | Some("f64") => ElemType::F64,
            Some("i64") => ElemType::I64,
            Some(o) => return Err(bad(format!("unknown dtype `{o}`"))),
        };
        let layout = match parts.next() {
            None | Some("row") => Layout::RowMajor,
            Some("col") => Layout::ColMajor,
            Some(o) => return Err(bad(format!("unknown layout `{o}`"))),
        };
        let seed = match parts.next() {
            None => 0,
            Some(v) => v.parse().map_err(|_| bad(format!("bad seed `{v}`")))?,
        };
        if parts.next().is_some() {
            return Err(bad("too many fields".into()));
        }
        Ok(GenSpec::new(shape, dtype, layout, seed))
    }
}

impl fmt::Display for GenSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dims: Vec<String> = self.shape.iter().map(usize::to_string).collect();
        write!(f, "{}:{}:{}:{}", dims.join("x"), self.dtype, self.layout, self.seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TilingMode {
    Off,
    #[default]
    Cache,
    CacheRegister,
}

impl FromStr for TilingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "off" => Ok(TilingMode::Off),
            "cache" => Ok(TilingMode::Cache),
            "cache+register" => Ok(TilingMode::CacheRegister),
            o => Err(format!(
                "unknown tiling mode `{o}` (expected off, cache or cache+register)"
            )),
        }
    }
}

impl fmt::Display for TilingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TilingMode::Off => "off",
            TilingMode::Cache => "cache",
            TilingMode::CacheRegister => "cache+register",
        })
    }
}

/// A program after the requested tiling passes.
#[derive(Debug, Clone)]
pub struct Compiled {
    pub program: Program,
    pub spec: TileSpec,
    /// Why cache tiling left the program alone, if it did.
    pub unchanged: Option<Unchanged>,
}

pub fn compile(program: &Program, mode: TilingMode, hw: &HardwareInfo) -> Result<Compiled, IrError> {
    if mode == TilingMode::Off {
        return Ok(Compiled {
            program: program.clone(),
            spec: TileSpec::default(),
            unchanged: None,
        });
    }
    let (program, spec, unchanged) = match tile_program(program)? {
        TileOutcome::Tiled { program, spec } => (program, spec, None),
        TileOutcome::Unchanged { program, reason } => (program, TileSpec::default(), Some(reason)),
    };
    let (program, spec) = if mode == TilingMode::CacheRegister && unchanged.is_none() {
        register_tile(&program, &spec, hw)
    } else {
        (program, spec)
    };
    Ok(Compiled {
        program,
        spec,
        unchanged,
    })
}

/// Tunable sizes at the average of the estimated bounds, the autotuner's
/// starting point.
pub fn default_sizes(compiled: &Compiled, inputs: &[Value], hw: &HardwareInfo) -> Result<Vec<usize>, TuneError> {
    if compiled.spec.tunable_count() == 0 {
        return Ok(Vec::new());
    }
    let observed = observe_shapes(&compiled.program, &compiled.spec, inputs)?;
    Ok(estimate_bounds(&compiled.spec, &observed.shapes, hw, &WorkingSetEstimator).start())
}

/// `|a - b| <= tol * max(|a|, |b|)`, exact for integers.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    a == b || (a - b).abs() <= tol * a.abs().max(b.abs())
}

/// First element where `got` differs from `want` beyond `tol` (relative for
/// f64, exact for i64).
pub fn compare_values(want: &Value, got: &Value, tol: f64) -> Result<(), String> {
    let (a, b) = (want.to_array(), got.to_array());
    if a.shape() != b.shape() {
        return Err(format!("shape {:?} vs {:?}", a.shape(), b.shape()));
    }
    let exact = a.elem_type() == ElemType::I64 && b.elem_type() == ElemType::I64;
    let tol = if exact { 0.0 } else { tol };
    for (i, (x, y)) in a.to_f64_vec().into_iter().zip(b.to_f64_vec()).enumerate() {
        if !close(x, y, tol) {
            return Err(format!("element {i}: {x} vs {y}"));
        }
    }
    Ok(())
}

/// Triple-loop product of `x` (n×k) and the transpose of `y` (m×k).
pub fn naive_matmul_transposed(x: &NdArray, y: &NdArray) -> NdArray {
    let (n, k, m) = (x.shape()[0], x.shape()[1], y.shape()[0]);
    assert_eq!(y.shape()[1], k, "inner dimensions differ");
    let (xs, ys) = (x.to_f64_vec(), y.to_f64_vec());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for l in 0..k {
                acc += xs[i * k + l] * ys[j * k + l];
            }
            out[i * m + j] = acc;
        }
    }
    NdArray::from_f64(vec![n, m], out, Layout::RowMajor).expect("shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    /// k×d centroids, row-major.
    pub centroids: Vec<f64>,
    pub k: usize,
}

/// Lloyd's algorithm. Initial centroids are the first `k` points after a
/// seeded shuffle; points go to the nearest centroid with ties broken to the
/// lowest index; an empty cluster keeps its previous centroid. `distances`
/// returns the n×k squared distances for the given centroid matrix.
pub fn kmeans_with<E>(
    points: &NdArray,
    k: usize,
    iters: usize,
    seed: u64,
    mut distances: impl FnMut(&NdArray) -> Result<Vec<f64>, E>,
) -> Result<KMeansResult, E> {
    let (n, d) = (points.shape()[0], points.shape()[1]);
    assert!(k >= 1 && k <= n, "need 1 <= k <= points");
    let xs = points.to_f64_vec();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut centroids: Vec<f64> = order[..k]
        .iter()
        .flat_map(|&i| xs[i * d..(i + 1) * d].to_vec())
        .collect();
    let mut assign = |c: &[f64]| -> Result<Vec<usize>, E> {
        let c = NdArray::from_f64(vec![k, d], c.to_vec(), Layout::RowMajor).expect("shape");
        let dist = distances(&c)?;
        Ok((0..n).map(|i| argmin(&dist[i * k..(i + 1) * k])).collect())
    };
    let mut labels = assign(&centroids)?;
    for _ in 0..iters {
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for j in 0..d {
                sums[l * d + j] += xs[i * d + j];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    centroids[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
            }
        }
        labels = assign(&centroids)?;
    }
    Ok(KMeansResult { labels, centroids, k })
}

fn argmin(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v < row[best] {
            best = j;
        }
    }
    best
}

/// Host-only k-means: distances by plain loops.
pub fn kmeans_reference(points: &NdArray, k: usize, iters: usize, seed: u64) -> KMeansResult {
    let (n, d) = (points.shape()[0], points.shape()[1]);
    let xs = points.to_f64_vec();
    let out: Result<_, std::convert::Infallible> = kmeans_with(points, k, iters, seed, |c| {
        let cs = c.to_f64_vec();
        Ok((0..n)
            .flat_map(|i| {
                let (xs, cs) = (&xs, &cs);
                (0..k).map(move |j| (0..d).map(|l| (xs[i * d + l] - cs[j * d + l]).powi(2)).sum())
            })
            .collect())
    });
    match out {
        Ok(r) => r,
        Err(e) => match e {},
    }
}

/// k-means with the distance kernel evaluated by `program` (usually a tiled
/// form of [`KMEANS_DIST`]). Returns the result and the summed simulated
/// misses when `hw` is given.
pub fn kmeans_ir(
    program: &Program,
    tile_sizes: &[usize],
    points: &NdArray,
    k: usize,
    iters: usize,
    seed: u64,
    hw: Option<&HardwareInfo>,
) -> Result<(KMeansResult, Option<u64>), BenchError> {
    let mut misses = hw.map(|_| 0u64);
    let result = kmeans_with(points, k, iters, seed, |c| -> Result<Vec<f64>, BenchError> {
        let args = vec![Value::Array(points.clone()), Value::Array(c.clone())];
        let v = match hw {
            Some(hw) => {
                let r = simulate_program(program, args, Some(tile_sizes.to_vec()), hw.cache_config(), 0)?;
                *misses.as_mut().expect("set with hw") += r.stats.misses;
                r.value
            }
            None => eval_program(program, args, EvalConfig::with_tile_sizes(tile_sizes.to_vec()))?.0,
        };
        Ok(v.to_f64_vec())
    })?;
    Ok((result, misses))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Variant {
    Untiled,
    Tiled,
    Autotuned,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Untiled => "untiled",
            Variant::Tiled => "tiled",
            Variant::Autotuned => "tiled+autotuned",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkResult {
    pub benchmark: String,
    pub variant: Variant,
    pub tiling: String,
    pub tile_sizes: Vec<usize>,
    pub wall_seconds: f64,
    pub misses: Option<u64>,
    pub checksum: f64,
}

impl BenchmarkResult {
    pub const CSV_HEADER: &'static str = "benchmark,variant,tiling,tile_sizes,wall_seconds,misses,checksum";

    pub fn csv_row(&self) -> String {
        let sizes: Vec<String> = self.tile_sizes.iter().map(usize::to_string).collect();
        format!(
            "{},{},{},{},{:.6},{},{:.17e}",
            self.benchmark,
            self.variant,
            self.tiling,
            sizes.join(" "),
            self.wall_seconds,
            self.misses.map_or(String::new(), |m| m.to_string()),
            self.checksum
        )
    }
}

/// Benchmark size and search parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchParams {
    /// Matrix side (sum_rows, matmul) or √length (add1).
    pub n: usize,
    pub layout: Layout,
    pub points: usize,
    pub k: usize,
    pub features: usize,
    pub iters: usize,
    pub seed: u64,
    /// Tiling passes of the tiled variants.
    pub tiling: TilingMode,
    /// Explicit tunable sizes for the `tiled` variant.
    pub tile_sizes: Option<Vec<usize>>,
    pub autotune: bool,
    pub probe: ProbeKind,
    pub tune: TuneConfig,
    /// Simulate misses for every variant.
    pub misses: bool,
    /// Relative tolerance for f64 outputs.
    pub tolerance: f64,
}

impl Default for BenchParams {
    fn default() -> Self {
        BenchParams {
            n: 64,
            layout: Layout::RowMajor,
            points: 200,
            k: 5,
            features: 8,
            iters: 3,
            seed: 42,
            tiling: TilingMode::Cache,
            tile_sizes: None,
            autotune: true,
            probe: ProbeKind::WallTime,
            tune: TuneConfig::default(),
            misses: false,
            tolerance: 1e-9,
        }
    }
}

fn inputs_for(bench: &Benchmark, p: &BenchParams) -> Vec<Value> {
    let gen =
        |shape: Vec<usize>, layout, seed| Value::Array(GenSpec::new(shape, ElemType::F64, layout, seed).generate());
    match bench.name {
        "sum_rows" => vec![gen(vec![p.n, p.n], p.layout, p.seed)],
        "matmul" => vec![
            gen(vec![p.n, p.n], p.layout, p.seed),
            gen(vec![p.n, p.n], p.layout, p.seed + 1),
        ],
        "add1" => vec![gen(vec![p.n * p.n], p.layout, p.seed)],
        _ => vec![gen(vec![p.points, p.features], p.layout, p.seed)],
    }
}

/// Runs one variant; kmeans returns its labels as the output value.
fn run_once(
    bench: &Benchmark,
    program: &Program,
    sizes: &[usize],
    inputs: &[Value],
    p: &BenchParams,
    hw: &HardwareInfo,
) -> Result<(Value, f64, Option<u64>), BenchError> {
    let start = Instant::now();
    let (value, misses) = if bench.name == "kmeans" {
        let points = inputs[0].to_array();
        let (r, misses) = kmeans_ir(program, sizes, &points, p.k, p.iters, p.seed, p.misses.then_some(hw))?;
        let labels = r.labels.iter().map(|&l| l as i64).collect();
        (Value::Array(NdArray::vector_i64(labels)), misses)
    } else if p.misses {
        let r = simulate_program(program, inputs.to_vec(), Some(sizes.to_vec()), hw.cache_config(), 0)?;
        (r.value, Some(r.stats.misses))
    } else {
        (
            eval_program(program, inputs.to_vec(), EvalConfig::with_tile_sizes(sizes.to_vec()))?.0,
            None,
        )
    };
    Ok((value, start.elapsed().as_secs_f64(), misses))
}

/// Runs the untiled, tiled and (optionally) autotuned variants of a corpus
/// benchmark and checks that all agree with the untiled output (and, for
/// matmul and kmeans, with the host reference).
pub fn run_benchmark(name: &str, p: &BenchParams, hw: &HardwareInfo) -> Result<Vec<BenchmarkResult>, BenchError> {
    let bench = find(name).ok_or_else(|| BenchError::Unknown(name.to_string()))?;
    if bench.name == "kmeans" && (p.k == 0 || p.k > p.points) {
        return Err(BenchError::Param(format!("k = {} must be in 1..={}", p.k, p.points)));
    }
    let source = parse_program(bench.source)?;
    let inputs = inputs_for(bench, p);
    let tiled = compile(&source, p.tiling, hw)?;
    if let Some(reason) = &tiled.unchanged {
        log::warn!("{name}: tiling left the program unchanged: {reason}");
    }

    // Arguments of one program run; for kmeans, the points and the initial
    // centroids.
    let program_inputs: Vec<Value> = if bench.name == "kmeans" {
        let points = inputs[0].to_array();
        let init = points.narrow(0, 0, p.k).map_err(EvalError::from)?;
        vec![Value::Array(points), Value::Array(init.to_layout(Layout::RowMajor))]
    } else {
        inputs.clone()
    };

    let mut runs: Vec<(Variant, &Program, Vec<usize>)> = vec![(Variant::Untiled, &source, Vec::new())];
    let tunable = match &p.tile_sizes {
        Some(s) => s.clone(),
        None => default_sizes(&tiled, &program_inputs, hw)?,
    };
    runs.push((
        Variant::Tiled,
        &tiled.program,
        tiled.spec.resolve(&tunable).map_err(TuneError::from)?,
    ));
    if p.autotune && tiled.spec.tunable_count() > 0 {
        let tuned = autotune(&tiled.program, &tiled.spec, &program_inputs, hw, p.probe, &p.tune)?;
        runs.push((Variant::Autotuned, &tiled.program, tuned.resolved));
    }

    let reference = match bench.name {
        "matmul" => Some(Value::Array(naive_matmul_transposed(
            &inputs[0].to_array(),
            &inputs[1].to_array(),
        ))),
        "kmeans" => {
            let r = kmeans_reference(&inputs[0].to_array(), p.k, p.iters, p.seed);
            Some(Value::Array(NdArray::vector_i64(
                r.labels.iter().map(|&l| l as i64).collect(),
            )))
        }
        _ => None,
    };

    let mut results = Vec::new();
    let mut baseline: Option<Value> = None;
    for (variant, program, sizes) in runs {
        let (value, secs, misses) = run_once(bench, program, &sizes, &inputs, p, hw)?;
        let mismatch = |detail| BenchError::Mismatch {
            benchmark: name.to_string(),
            variant: variant.to_string(),
            detail,
        };
        if let Some(base) = &baseline {
            compare_values(base, &value, p.tolerance).map_err(mismatch)?;
        }
        if let Some(r) = &reference {
            compare_values(r, &value, p.tolerance).map_err(|d| mismatch(format!("vs host reference: {d}")))?;
        }
        results.push(BenchmarkResult {
            benchmark: name.to_string(),
            variant,
            tiling: if variant == Variant::Untiled {
                TilingMode::Off
            } else {
                p.tiling
            }
            .to_string(),
            tile_sizes: sizes,
            wall_seconds: secs,
            misses,
            checksum: value.checksum(),
        });
        baseline.get_or_insert(value);
    }
    Ok(results)
}
