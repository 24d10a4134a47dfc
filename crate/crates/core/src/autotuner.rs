//! Online tile-size search.
//!
//! Bounds come from two working-set estimates: a pessimistic one (every array
//! of the innermost tile conflicts, rows rounded up to whole lines, a quarter
//! of L1) and an optimistic one (the tile exactly fills L1). The search starts
//! at their average and repeatedly evaluates batches of Gaussian samples
//! around the best point found so far.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cachesim::{simulate_program, CacheConfig, HardwareInfo};
use crate::ir::{print_program_debug, Program};
use crate::ndarray::ELEM_BYTES;
use crate::semantics::{eval_program, EvalConfig, EvalError, EvalStats, SlotShape, Value};
use crate::tiling::{TileSpec, TileSpecError};

#[derive(Debug, Error)]
pub enum TuneError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Spec(#[from] TileSpecError),
    #[error("tile cache: {0}")]
    Cache(String),
}

/// Search bounds of one tunable slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotBounds {
    pub lo: usize,
    pub hi: usize,
    /// Largest iteration extent the slot's operator was observed with.
    pub extent: usize,
}

/// Per tunable slot bounds, in slot order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub bounds: Vec<SlotBounds>,
}

impl SearchSpace {
    pub fn uniform(m: usize, lo: usize, hi: usize) -> Self {
        SearchSpace {
            bounds: vec![SlotBounds { lo, hi, extent: hi }; m],
        }
    }

    pub fn len(&self) -> usize {
        self.bounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bounds.is_empty()
    }

    /// The average of the two estimates.
    pub fn start(&self) -> Vec<usize> {
        self.bounds.iter().map(|b| (b.lo + b.hi).div_ceil(2)).collect()
    }

    pub fn lows(&self) -> Vec<usize> {
        self.bounds.iter().map(|b| b.lo).collect()
    }

    pub fn highs(&self) -> Vec<usize> {
        self.bounds.iter().map(|b| b.hi).collect()
    }

    /// Per-slot standard deviation: half the spread between the estimates.
    pub fn sigma(&self) -> Vec<f64> {
        self.bounds.iter().map(|b| (b.hi - b.lo) as f64 / 2.0).collect()
    }
}

/// Working-set model of one tile nest used by the bound estimators.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NestShape {
    /// Tunable slot ids of the nest, outermost first.
    pub slots: Vec<usize>,
    /// Ranks of the arrays the innermost tiled operator touches.
    pub operand_ranks: Vec<usize>,
}

/// Computes `[lo, hi]` tile sizes for a nest; both are square across the nest.
pub trait BoundsEstimator {
    fn bounds(&self, nest: &NestShape, hw: &HardwareInfo) -> (usize, usize);
}

/// Default estimator: optimistic working set fills L1, pessimistic one fits a
/// quarter of L1 with every row rounded up to whole cache lines.
#[derive(Debug, Clone, Copy, Default)]
pub struct WorkingSetEstimator;

impl WorkingSetEstimator {
    fn dims(nest: &NestShape, rank: usize) -> u32 {
        rank.min(nest.slots.len()).max(1) as u32
    }

    /// Bytes touched by one innermost tile of side `t`.
    pub fn optimistic_bytes(nest: &NestShape, t: usize) -> u128 {
        nest.operand_ranks
            .iter()
            .map(|&r| (t as u128).pow(Self::dims(nest, r)) * ELEM_BYTES as u128)
            .sum()
    }

    /// Like [`optimistic_bytes`](Self::optimistic_bytes) with rows padded to lines.
    pub fn pessimistic_bytes(nest: &NestShape, t: usize, line: usize) -> u128 {
        let row = ((t * ELEM_BYTES as usize).div_ceil(line) * line) as u128;
        nest.operand_ranks
            .iter()
            .map(|&r| row * (t as u128).pow(Self::dims(nest, r) - 1))
            .sum()
    }
}

/// Largest `t ≥ 1` with `fits(t)`, assuming `fits` is monotone (1 if none fits).
fn largest(mut fits: impl FnMut(usize) -> bool) -> usize {
    let mut t = 1;
    while t < 1 << 20 && fits(t + 1) {
        t += 1;
    }
    t
}

impl BoundsEstimator for WorkingSetEstimator {
    fn bounds(&self, nest: &NestShape, hw: &HardwareInfo) -> (usize, usize) {
        if nest.operand_ranks.is_empty() {
            return (1, 1);
        }
        let l1 = hw.l1_bytes as u128;
        let hi = largest(|t| Self::optimistic_bytes(nest, t) <= l1);
        let lo = largest(|t| Self::pessimistic_bytes(nest, t, hw.line_bytes) <= l1 / 4);
        (lo.min(hi), hi)
    }
}

/// Groups tunable slots into nests (one per outermost tiled operator).
pub fn nests(spec: &TileSpec, shapes: &BTreeMap<usize, SlotShape>) -> Vec<NestShape> {
    let tunable: Vec<_> = spec.tunable().collect();
    let mut out: Vec<NestShape> = Vec::new();
    let mut roots: Vec<String> = Vec::new();
    for s in &tunable {
        let root = roots
            .iter()
            .position(|r| s.path == *r || s.path.starts_with(&format!("{r}/")));
        match root {
            Some(i) => out[i].slots.push(s.id),
            None => {
                roots.push(s.path.clone());
                out.push(NestShape {
                    slots: vec![s.id],
                    operand_ranks: Vec::new(),
                });
            }
        }
    }
    for nest in &mut out {
        // The deepest executed slot describes the innermost tile.
        let deepest = nest
            .slots
            .iter()
            .filter(|id| shapes.contains_key(id))
            .max_by_key(|&&id| (spec.slots[id].depth, id));
        if let Some(id) = deepest {
            nest.operand_ranks = shapes[id].arg_ranks.clone();
        }
    }
    out
}

/// Per tunable slot bounds for `spec` given observed operator shapes.
pub fn estimate_bounds(
    spec: &TileSpec,
    shapes: &BTreeMap<usize, SlotShape>,
    hw: &HardwareInfo,
    estimator: &dyn BoundsEstimator,
) -> SearchSpace {
    let mut per_slot = BTreeMap::new();
    for nest in nests(spec, shapes) {
        let (lo, hi) = estimator.bounds(&nest, hw);
        for id in &nest.slots {
            let extent = shapes.get(id).map_or(1, |s| s.max_extent).max(1);
            let hi = hi.clamp(1, extent);
            per_slot.insert(
                *id,
                SlotBounds {
                    lo: lo.clamp(1, hi),
                    hi,
                    extent,
                },
            );
        }
    }
    SearchSpace {
        bounds: spec.tunable().map(|s| per_slot[&s.id]).collect(),
    }
}

/// Runs the tiled program once with every tunable tile spanning its whole
/// axis, recording the operators' extents and operand ranks.
pub fn observe_shapes(program: &Program, spec: &TileSpec, inputs: &[Value]) -> Result<EvalStats, TuneError> {
    let whole = vec![usize::MAX; spec.tunable_count()];
    let config = EvalConfig::with_tile_sizes(spec.resolve(&whole)?);
    Ok(eval_program(program, inputs.to_vec(), config)?.1)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProbeError {
    #[error("candidate exceeded the time cap")]
    TimedOut,
    #[error("candidate failed: {0}")]
    Failed(String),
}

/// Evaluates a vector of tunable tile sizes; lower is better.
pub trait CostProbe: Sync {
    /// `cap` is the cost above which the caller no longer cares about the
    /// exact value.
    fn cost(&self, sizes: &[usize], cap: Option<f64>) -> Result<f64, ProbeError>;
}

/// Adapts a closure into a probe.
pub struct FnProbe<F>(pub F);

impl<F: Fn(&[usize]) -> f64 + Sync> CostProbe for FnProbe<F> {
    fn cost(&self, sizes: &[usize], _cap: Option<f64>) -> Result<f64, ProbeError> {
        Ok((self.0)(sizes))
    }
}

/// Cost = simulated cache misses of one run.
pub struct MissProbe<'a> {
    pub program: &'a Program,
    pub spec: &'a TileSpec,
    pub inputs: &'a [Value],
    pub cache: CacheConfig,
}

impl CostProbe for MissProbe<'_> {
    fn cost(&self, sizes: &[usize], _cap: Option<f64>) -> Result<f64, ProbeError> {
        let all = self
            .spec
            .resolve(sizes)
            .map_err(|e| ProbeError::Failed(e.to_string()))?;
        simulate_program(self.program, self.inputs.to_vec(), Some(all), self.cache, 0)
            .map(|r| r.stats.misses as f64)
            .map_err(|e| ProbeError::Failed(e.to_string()))
    }
}

/// Cost = wall-clock seconds of one run.
pub struct WallTimeProbe<'a> {
    pub program: &'a Program,
    pub spec: &'a TileSpec,
    pub inputs: &'a [Value],
    pub parallelism: usize,
}

impl CostProbe for WallTimeProbe<'_> {
    fn cost(&self, sizes: &[usize], cap: Option<f64>) -> Result<f64, ProbeError> {
        let all = self
            .spec
            .resolve(sizes)
            .map_err(|e| ProbeError::Failed(e.to_string()))?;
        let config = EvalConfig {
            parallelism: self.parallelism,
            tile_sizes: all,
            ..EvalConfig::default()
        };
        let start = Instant::now();
        eval_program(self.program, self.inputs.to_vec(), config).map_err(|e| ProbeError::Failed(e.to_string()))?;
        let secs = start.elapsed().as_secs_f64();
        match cap {
            Some(c) if secs > c => Err(ProbeError::TimedOut),
            _ => Ok(secs),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneConfig {
    pub seed: u64,
    /// Candidates per round.
    pub batch: usize,
    /// Rounds without a new best before the search stops.
    pub no_improvement_limit: usize,
    /// Share of the planned runs that may be spent on search.
    pub budget_fraction: f64,
    /// Number of runs the program is expected to make in total.
    pub planned_runs: usize,
    /// Candidates costing more than this multiple of the best are cut off.
    pub time_cap_factor: f64,
    /// Evaluate each batch on the rayon pool.
    pub parallel: bool,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            seed: 42,
            batch: 4,
            no_improvement_limit: 3,
            budget_fraction: 0.1,
            planned_runs: 400,
            time_cap_factor: 5.0,
            parallel: false,
        }
    }
}

impl TuneConfig {
    /// Evaluations the budget allows; the last batch may overshoot it.
    pub fn budget(&self) -> usize {
        (self.planned_runs as f64 * self.budget_fraction).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchState {
    pub space: SearchSpace,
    pub best: Vec<usize>,
    pub best_cost: f64,
    pub sigma: Vec<f64>,
    pub evaluations: usize,
    pub rounds: usize,
    pub rounds_without_improvement: usize,
    pub terminated: bool,
}

impl SearchState {
    /// A state at the start point with the given (already measured) cost.
    pub fn new(space: SearchSpace, start_cost: f64) -> Self {
        SearchState {
            best: space.start(),
            sigma: space.sigma(),
            space,
            best_cost: start_cost,
            evaluations: 1,
            rounds: 0,
            rounds_without_improvement: 0,
            terminated: false,
        }
    }
}

/// One evaluated candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub round: usize,
    pub candidate: Vec<usize>,
    /// `None` if the probe failed or was cut off.
    pub cost: Option<f64>,
    pub best: Vec<usize>,
    pub best_cost: f64,
}

fn list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cost = self.cost.map_or_else(|| "failed".to_string(), |c| format!("{c}"));
        write!(
            f,
            "round={} candidate=[{}] cost={} best=[{}] best_cost={}",
            self.round,
            list(&self.candidate),
            cost,
            list(&self.best),
            self.best_cost
        )
    }
}

/// Samples around the best point; the estimates seed the search but do not
/// confine it, so sizes are only clamped to `[1, extent]`.
fn draw(rng: &mut ChaCha8Rng, state: &SearchState) -> Vec<usize> {
    state
        .best
        .iter()
        .zip(&state.sigma)
        .zip(&state.space.bounds)
        .map(|((&mu, &sd), b)| {
            let x = if sd > 0.0 {
                Normal::new(mu as f64, sd).expect("finite sigma").sample(rng)
            } else {
                mu as f64
            };
            (x.round().max(1.0) as usize).clamp(1, b.extent.max(1))
        })
        .collect()
}

/// Evaluates one batch of Gaussian candidates and updates the best point.
pub fn search_step(
    state: &mut SearchState,
    probe: &dyn CostProbe,
    config: &TuneConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<LogRecord> {
    state.rounds += 1;
    let candidates: Vec<Vec<usize>> = (0..config.batch.max(1))
        .map(|_| {
            let c = draw(rng, state);
            if c == state.best {
                draw(rng, state)
            } else {
                c
            }
        })
        .collect();
    let cap = (state.best_cost.is_finite() && config.time_cap_factor > 0.0)
        .then_some(state.best_cost * config.time_cap_factor);
    let eval = |c: &Vec<usize>| match probe.cost(c, cap) {
        Ok(v) if v.is_finite() => Some(v),
        Ok(_) => None,
        Err(e) => {
            log::debug!("candidate {c:?} discarded: {e}");
            None
        }
    };
    let costs: Vec<Option<f64>> = if config.parallel {
        candidates.par_iter().map(eval).collect()
    } else {
        candidates.iter().map(eval).collect()
    };
    state.evaluations += candidates.len();

    let winner = candidates
        .iter()
        .zip(&costs)
        .filter_map(|(c, cost)| cost.map(|v| (v, c)))
        .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    match winner {
        Some((cost, c)) if cost < state.best_cost => {
            state.best = c.clone();
            state.best_cost = cost;
            state.rounds_without_improvement = 0;
        }
        _ => state.rounds_without_improvement += 1,
    }
    let round = state.rounds;
    candidates
        .into_iter()
        .zip(costs)
        .map(|(candidate, cost)| LogRecord {
            round,
            candidate,
            cost,
            best: state.best.clone(),
            best_cost: state.best_cost,
        })
        .collect()
}

/// Whether the search has used its budget or stopped improving.
pub fn should_terminate(state: &SearchState, config: &TuneConfig) -> bool {
    let spent = state.evaluations as f64 / config.planned_runs.max(1) as f64;
    spent > config.budget_fraction || state.rounds_without_improvement >= config.no_improvement_limit
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub best: Vec<usize>,
    pub best_cost: f64,
    pub evaluations: usize,
    pub log: Vec<LogRecord>,
}

/// Runs the search over `space` until [`should_terminate`].
pub fn search(space: SearchSpace, probe: &dyn CostProbe, config: &TuneConfig) -> SearchOutcome {
    let start = space.start();
    let start_cost = match probe.cost(&start, None) {
        Ok(c) if c.is_finite() => c,
        other => {
            log::warn!("start point {start:?} could not be evaluated: {other:?}");
            f64::INFINITY
        }
    };
    let mut state = SearchState::new(space, start_cost);
    let mut log = vec![LogRecord {
        round: 0,
        candidate: start.clone(),
        cost: start_cost.is_finite().then_some(start_cost),
        best: start,
        best_cost: start_cost,
    }];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    while !should_terminate(&state, config) {
        log.extend(search_step(&mut state, probe, config, &mut rng));
    }
    state.terminated = true;
    if !state.best_cost.is_finite() {
        log::warn!("no candidate could be evaluated; keeping the start point");
    }
    SearchOutcome {
        best: state.best,
        best_cost: state.best_cost,
        evaluations: state.evaluations,
        log,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeKind {
    WallTime,
    Misses,
}

#[derive(Debug, Clone)]
pub struct TuneResult {
    pub space: SearchSpace,
    /// Tunable sizes, in slot order.
    pub sizes: Vec<usize>,
    /// Sizes for every slot, fixed ones included.
    pub resolved: Vec<usize>,
    pub outcome: SearchOutcome,
}

/// Estimates bounds for a tiled program and searches tile sizes on `inputs`.
pub fn autotune(
    program: &Program,
    spec: &TileSpec,
    inputs: &[Value],
    hw: &HardwareInfo,
    probe_kind: ProbeKind,
    config: &TuneConfig,
) -> Result<TuneResult, TuneError> {
    let observed = observe_shapes(program, spec, inputs)?;
    let space = estimate_bounds(spec, &observed.shapes, hw, &WorkingSetEstimator);
    let outcome = if space.is_empty() {
        SearchOutcome {
            best: Vec::new(),
            best_cost: 0.0,
            evaluations: 0,
            log: Vec::new(),
        }
    } else {
        match probe_kind {
            ProbeKind::Misses => {
                let probe = MissProbe {
                    program,
                    spec,
                    inputs,
                    cache: hw.cache_config(),
                };
                search(space.clone(), &probe, config)
            }
            ProbeKind::WallTime => {
                let probe = WallTimeProbe {
                    program,
                    spec,
                    inputs,
                    parallelism: if config.parallel { 1 } else { hw.cores },
                };
                search(space.clone(), &probe, config)
            }
        }
    };
    let resolved = spec.resolve(&outcome.best)?;
    Ok(TuneResult {
        space,
        sizes: outcome.best.clone(),
        resolved,
        outcome,
    })
}

/// Best tile sizes remembered per (program, input shapes, hardware).
#[derive(Debug, Clone)]
pub struct TileCache {
    dir: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    sizes: Vec<usize>,
}

impl TileCache {
    pub fn new(dir: impl AsRef<Path>) -> Self {
        TileCache {
            dir: dir.as_ref().to_path_buf(),
        }
    }

    pub fn key(program: &Program, inputs: &[Value], hw: &HardwareInfo) -> String {
        let mut h = Sha256::new();
        h.update(print_program_debug(program).unwrap_or_default().as_bytes());
        for v in inputs {
            h.update(format!("{:?};", v.shape()).as_bytes());
        }
        h.update(hw.signature().as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Option<Vec<usize>> {
        let text = std::fs::read_to_string(self.path(key)).ok()?;
        let entry: CacheEntry = serde_json::from_str(&text).ok()?;
        (entry.key == key).then_some(entry.sizes)
    }

    pub fn put(&self, key: &str, sizes: &[usize]) -> Result<(), TuneError> {
        std::fs::create_dir_all(&self.dir).map_err(|e| TuneError::Cache(e.to_string()))?;
        let entry = CacheEntry {
            key: key.to_string(),
            sizes: sizes.to_vec(),
        };
        let text = serde_json::to_string_pretty(&entry).map_err(|e| TuneError::Cache(e.to_string()))?;
        std::fs::write(self.path(key), text).map_err(|e| TuneError::Cache(e.to_string()))
    }
}

/// Random point within the space, for tests and baselines.
pub fn random_point(space: &SearchSpace, rng: &mut impl Rng) -> Vec<usize> {
    space.bounds.iter().map(|b| rng.random_range(b.lo..=b.hi)).collect()
}
