//! Trace-driven set-associative LRU cache simulator and hardware discovery.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::Deserialize;
use thiserror::Error;

use crate::ir::Program;
use crate::semantics::{eval_program, AccessKind, EvalConfig, EvalError, EvalStats, TraceSink, Value, VecSink};

pub const DEFAULT_L1_BYTES: usize = 32 * 1024;
pub const DEFAULT_LINE_BYTES: usize = 64;
pub const DEFAULT_ASSOCIATIVITY: usize = 8;
pub const DEFAULT_CORES: usize = 4;
pub const DEFAULT_REGISTERS: usize = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CacheError {
    #[error("cache parameters must be at least 1 (capacity {capacity}, line {line}, associativity {associativity})")]
    NonPositive {
        capacity: usize,
        line: usize,
        associativity: usize,
    },
    #[error("capacity {capacity} is not divisible by line size {line} × associativity {associativity}")]
    Geometry {
        capacity: usize,
        line: usize,
        associativity: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WritePolicy {
    /// Write misses allocate; dirty lines are written back on eviction.
    #[default]
    WriteBackAllocate,
    /// Writes go straight to memory; write misses do not allocate.
    WriteThroughNoAllocate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheConfig {
    pub capacity: usize,
    pub line: usize,
    pub associativity: usize,
    pub write_policy: WritePolicy,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            capacity: DEFAULT_L1_BYTES,
            line: DEFAULT_LINE_BYTES,
            associativity: DEFAULT_ASSOCIATIVITY,
            write_policy: WritePolicy::default(),
        }
    }
}

impl CacheConfig {
    pub fn new(capacity: usize, line: usize, associativity: usize) -> Result<Self, CacheError> {
        let c = CacheConfig {
            capacity,
            line,
            associativity,
            write_policy: WritePolicy::default(),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), CacheError> {
        let (capacity, line, associativity) = (self.capacity, self.line, self.associativity);
        if capacity == 0 || line == 0 || associativity == 0 {
            return Err(CacheError::NonPositive {
                capacity,
                line,
                associativity,
            });
        }
        if capacity % (line * associativity) != 0 {
            return Err(CacheError::Geometry {
                capacity,
                line,
                associativity,
            });
        }
        Ok(())
    }

    pub fn sets(&self) -> usize {
        self.capacity / (self.line * self.associativity)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TraceStats {
    pub accesses: u64,
    pub reads: u64,
    pub writes: u64,
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub writebacks: u64,
}

impl TraceStats {
    pub fn miss_ratio(&self) -> f64 {
        if self.accesses == 0 {
            0.0
        } else {
            self.misses as f64 / self.accesses as f64
        }
    }
}

impl fmt::Display for TraceStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "accesses    {}", self.accesses)?;
        writeln!(f, "reads       {}", self.reads)?;
        writeln!(f, "writes      {}", self.writes)?;
        writeln!(f, "hits        {}", self.hits)?;
        writeln!(f, "misses      {}", self.misses)?;
        writeln!(f, "evictions   {}", self.evictions)?;
        writeln!(f, "writebacks  {}", self.writebacks)?;
        write!(f, "miss ratio  {:.6}", self.miss_ratio())
    }
}

#[derive(Debug, Clone, Copy)]
struct Line {
    tag: u64,
    dirty: bool,
}

/// A single cache level; each set keeps its lines most-recently-used first.
#[derive(Debug, Clone)]
pub struct CacheModel {
    config: CacheConfig,
    sets: Vec<VecDeque<Line>>,
    stats: TraceStats,
}

impl CacheModel {
    pub fn new(config: CacheConfig) -> Result<Self, CacheError> {
        config.validate()?;
        Ok(CacheModel {
            config,
            sets: vec![VecDeque::with_capacity(config.associativity); config.sets()],
            stats: TraceStats::default(),
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn stats(&self) -> TraceStats {
        self.stats
    }

    /// Simulates one access; returns whether it hit.
    pub fn access(&mut self, address: u64, kind: AccessKind) -> bool {
        let line = address / self.config.line as u64;
        let n_sets = self.sets.len() as u64;
        let set = &mut self.sets[(line % n_sets) as usize];
        let tag = line / n_sets;
        let write = kind == AccessKind::Write;
        self.stats.accesses += 1;
        if write {
            self.stats.writes += 1;
        } else {
            self.stats.reads += 1;
        }
        let write_back = self.config.write_policy == WritePolicy::WriteBackAllocate;
        if let Some(i) = set.iter().position(|l| l.tag == tag) {
            let mut l = set.remove(i).expect("present");
            l.dirty |= write && write_back;
            set.push_front(l);
            self.stats.hits += 1;
            return true;
        }
        self.stats.misses += 1;
        if write && !write_back {
            return false;
        }
        if set.len() == self.config.associativity {
            let victim = set.pop_back().expect("full set");
            self.stats.evictions += 1;
            if victim.dirty {
                self.stats.writebacks += 1;
            }
        }
        set.push_front(Line {
            tag,
            dirty: write && write_back,
        });
        false
    }
}

/// Runs a read-only address sequence through a fresh cache.
pub fn simulate(trace: &[u64], config: CacheConfig) -> Result<TraceStats, CacheError> {
    simulate_events(trace.iter().map(|&a| (a, AccessKind::Read)), config)
}

pub fn simulate_events(
    trace: impl IntoIterator<Item = (u64, AccessKind)>,
    config: CacheConfig,
) -> Result<TraceStats, CacheError> {
    let mut model = CacheModel::new(config)?;
    for (a, k) in trace {
        model.access(a, k);
    }
    Ok(model.stats())
}

/// Miss counts over one window of consecutive accesses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhaseStats {
    pub phase: usize,
    pub accesses: u64,
    pub misses: u64,
}

/// Feeds the interpreter's trace straight into a cache model without storing it.
pub struct CacheSink {
    state: Mutex<SinkState>,
    phase_len: u64,
}

struct SinkState {
    model: CacheModel,
    phases: Vec<PhaseStats>,
}

impl CacheSink {
    pub fn new(config: CacheConfig) -> Result<Self, CacheError> {
        Self::with_phases(config, 0)
    }

    /// Also records miss counts per window of `phase_len` accesses (0 = off).
    pub fn with_phases(config: CacheConfig, phase_len: u64) -> Result<Self, CacheError> {
        Ok(CacheSink {
            state: Mutex::new(SinkState {
                model: CacheModel::new(config)?,
                phases: Vec::new(),
            }),
            phase_len,
        })
    }

    pub fn stats(&self) -> TraceStats {
        self.state.lock().expect("sink poisoned").model.stats()
    }

    pub fn phases(&self) -> Vec<PhaseStats> {
        self.state.lock().expect("sink poisoned").phases.clone()
    }
}

impl TraceSink for CacheSink {
    fn record(&self, address: u64, kind: AccessKind) {
        let mut st = self.state.lock().expect("sink poisoned");
        let before = st.model.stats().accesses;
        let hit = st.model.access(address, kind);
        if let Some(phase) = before.checked_div(self.phase_len) {
            let phase = phase as usize;
            if st.phases.len() <= phase {
                st.phases.push(PhaseStats {
                    phase,
                    accesses: 0,
                    misses: 0,
                });
            }
            let p = st.phases.last_mut().expect("pushed");
            p.accesses += 1;
            p.misses += u64::from(!hit);
        }
    }
}

/// Runs `program` with the trace sink attached and returns the full access stream.
pub fn trace_program(
    program: &Program,
    args: Vec<Value>,
    tile_sizes: Option<Vec<usize>>,
) -> Result<(Value, Vec<(u64, AccessKind)>), EvalError> {
    let sink = Arc::new(VecSink::new());
    let config = EvalConfig {
        tile_sizes: tile_sizes.unwrap_or_default(),
        trace: Some(sink.clone()),
        ..EvalConfig::default()
    };
    let (v, _) = eval_program(program, args, config)?;
    Ok((v, sink.events()))
}

#[derive(Debug, Clone)]
pub struct SimulationReport {
    pub value: Value,
    pub stats: TraceStats,
    pub eval: EvalStats,
    pub phases: Vec<PhaseStats>,
}

/// Runs `program` streaming its trace through a cache with `config`.
pub fn simulate_program(
    program: &Program,
    args: Vec<Value>,
    tile_sizes: Option<Vec<usize>>,
    config: CacheConfig,
    phase_len: u64,
) -> Result<SimulationReport, SimulateError> {
    let sink = Arc::new(CacheSink::with_phases(config, phase_len)?);
    let eval_config = EvalConfig {
        tile_sizes: tile_sizes.unwrap_or_default(),
        trace: Some(sink.clone()),
        ..EvalConfig::default()
    };
    let (value, eval) = eval_program(program, args, eval_config)?;
    Ok(SimulationReport {
        value,
        stats: sink.stats(),
        eval,
        phases: sink.phases(),
    })
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimulateError {
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Provenance {
    Default,
    Probed,
    Configured,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Default => "default",
            Provenance::Probed => "probed",
            Provenance::Configured => "configured",
        })
    }
}

/// Machine parameters the tiler and autotuner reason about.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardwareInfo {
    pub l1_bytes: usize,
    pub line_bytes: usize,
    pub associativity: usize,
    pub cores: usize,
    pub registers: usize,
    /// Where each field's value came from.
    pub provenance: BTreeMap<&'static str, Provenance>,
}

impl Default for HardwareInfo {
    fn default() -> Self {
        HardwareInfo {
            l1_bytes: DEFAULT_L1_BYTES,
            line_bytes: DEFAULT_LINE_BYTES,
            associativity: DEFAULT_ASSOCIATIVITY,
            cores: DEFAULT_CORES,
            registers: DEFAULT_REGISTERS,
            provenance: FIELDS.iter().map(|&f| (f, Provenance::Default)).collect(),
        }
    }
}

const FIELDS: [&str; 5] = ["l1_bytes", "line_bytes", "associativity", "cores", "registers"];

impl HardwareInfo {
    /// The most specific source any field came from.
    pub fn provenance(&self) -> Provenance {
        self.provenance.values().copied().max().unwrap_or(Provenance::Default)
    }

    pub fn cache_config(&self) -> CacheConfig {
        CacheConfig {
            capacity: self.l1_bytes,
            line: self.line_bytes,
            associativity: self.associativity,
            write_policy: WritePolicy::default(),
        }
    }

    /// Stable identifier of the parameters that influence tile sizes.
    pub fn signature(&self) -> String {
        format!(
            "l1={};line={};assoc={};cores={};regs={}",
            self.l1_bytes, self.line_bytes, self.associativity, self.cores, self.registers
        )
    }

    fn field_mut(&mut self, name: &str) -> &mut usize {
        match name {
            "l1_bytes" => &mut self.l1_bytes,
            "line_bytes" => &mut self.line_bytes,
            "associativity" => &mut self.associativity,
            "cores" => &mut self.cores,
            "registers" => &mut self.registers,
            _ => unreachable!("unknown field {name}"),
        }
    }

    fn set(&mut self, name: &'static str, value: usize, source: Provenance) {
        *self.field_mut(name) = value;
        self.provenance.insert(name, source);
    }
}

impl fmt::Display for HardwareInfo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for name in FIELDS {
            let value = match name {
                "l1_bytes" => self.l1_bytes,
                "line_bytes" => self.line_bytes,
                "associativity" => self.associativity,
                "cores" => self.cores,
                _ => self.registers,
            };
            writeln!(f, "{name:<14} {value:<10} {}", self.provenance[name])?;
        }
        Ok(())
    }
}

/// Hardware configuration file (TOML); every key is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareFile {
    pub l1_bytes: Option<usize>,
    pub line_bytes: Option<usize>,
    pub associativity: Option<usize>,
    pub cores: Option<usize>,
    pub registers: Option<usize>,
}

/// Environment variables overriding individual hardware fields.
pub const ENV_OVERRIDES: [(&str, &str); 5] = [
    ("DPTILE_L1_BYTES", "l1_bytes"),
    ("DPTILE_LINE_BYTES", "line_bytes"),
    ("DPTILE_L1_ASSOC", "associativity"),
    ("DPTILE_CORES", "cores"),
    ("DPTILE_REGISTERS", "registers"),
];

/// Names the configuration file to read when none is passed explicitly.
pub const ENV_CONFIG: &str = "DPTILE_HW_CONFIG";

/// Where [`probe_hardware_with`] looks.
#[derive(Debug, Clone, Default)]
pub struct ProbeSources {
    /// Root of a sysfs tree (normally `/sys`); `None` skips OS discovery.
    pub sys_root: Option<PathBuf>,
    pub config_file: Option<PathBuf>,
    pub env: Vec<(String, String)>,
}

impl ProbeSources {
    /// The real machine: `/sys`, the file named by `DPTILE_HW_CONFIG` and the
    /// process environment.
    pub fn system() -> Self {
        ProbeSources {
            sys_root: Some(PathBuf::from("/sys")),
            config_file: std::env::var_os(ENV_CONFIG).map(PathBuf::from),
            env: std::env::vars().collect(),
        }
    }
}

/// Discovers the machine's parameters; never fails.
pub fn probe_hardware() -> HardwareInfo {
    probe_hardware_with(&ProbeSources::system())
}

/// Per field, later sources win: defaults, then OS discovery, then the
/// configuration file, then environment overrides. Non-positive or
/// inconsistent values are ignored.
pub fn probe_hardware_with(src: &ProbeSources) -> HardwareInfo {
    let mut hw = HardwareInfo::default();
    if let Some(root) = &src.sys_root {
        for (name, value) in probe_sysfs(root) {
            hw.set(name, value, Provenance::Probed);
        }
    }
    if let Some(path) = &src.config_file {
        match read_config(path) {
            Ok(file) => {
                let pairs = [
                    ("l1_bytes", file.l1_bytes),
                    ("line_bytes", file.line_bytes),
                    ("associativity", file.associativity),
                    ("cores", file.cores),
                    ("registers", file.registers),
                ];
                for (name, value) in pairs {
                    if let Some(v) = value {
                        hw.set(name, v, Provenance::Configured);
                    }
                }
            }
            Err(e) => log::warn!("ignoring hardware config {}: {e}", path.display()),
        }
    }
    for (var, name) in ENV_OVERRIDES {
        let Some((_, raw)) = src.env.iter().find(|(k, _)| k == var) else {
            continue;
        };
        match raw.trim().parse::<usize>() {
            Ok(v) => hw.set(name, v, Provenance::Configured),
            Err(_) => log::warn!("ignoring {var}={raw}: not a non-negative integer"),
        }
    }
    sanitize(&mut hw);
    hw
}

fn read_config(path: &Path) -> Result<HardwareFile, String> {
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    toml::from_str(&text).map_err(|e| e.to_string())
}

/// Replaces unusable values by defaults, field by field. Zero registers is
/// meaningful (it disables register tiling) and is kept.
fn sanitize(hw: &mut HardwareInfo) {
    let defaults = HardwareInfo::default();
    for name in ["l1_bytes", "line_bytes", "associativity", "cores"] {
        if *hw.field_mut(name) == 0 {
            log::warn!("{name} must be positive; using default");
            let d = *defaults.clone().field_mut(name);
            hw.set(name, d, Provenance::Default);
        }
    }
    if hw.cache_config().validate().is_err() {
        // Keep what the user configured: first fall back only the geometry
        // fields that were probed, then all of them.
        for name in ["l1_bytes", "line_bytes", "associativity"] {
            if hw.provenance[name] < Provenance::Configured {
                let d = *defaults.clone().field_mut(name);
                hw.set(name, d, Provenance::Default);
            }
        }
    }
    if hw.cache_config().validate().is_err() {
        log::warn!(
            "inconsistent cache geometry {}B/{}B/{}-way; using defaults",
            hw.l1_bytes,
            hw.line_bytes,
            hw.associativity
        );
        hw.set("l1_bytes", DEFAULT_L1_BYTES, Provenance::Default);
        hw.set("line_bytes", DEFAULT_LINE_BYTES, Provenance::Default);
        hw.set("associativity", DEFAULT_ASSOCIATIVITY, Provenance::Default);
    }
}

fn probe_sysfs(root: &Path) -> Vec<(&'static str, usize)> {
    let mut out = Vec::new();
    let cache_dir = root.join("devices/system/cpu/cpu0/cache");
    if let Ok(entries) = std::fs::read_dir(&cache_dir) {
        let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
        dirs.sort();
        for dir in dirs {
            let read = |f: &str| std::fs::read_to_string(dir.join(f)).map(|s| s.trim().to_string()).ok();
            let level = read("level");
            let kind = read("type");
            if level.as_deref() != Some("1") || !matches!(kind.as_deref(), Some("Data") | Some("Unified")) {
                continue;
            }
            let fields = [
                ("l1_bytes", read("size").and_then(|s| parse_size(&s))),
                ("line_bytes", read("coherency_line_size").and_then(|s| s.parse().ok())),
                (
                    "associativity",
                    read("ways_of_associativity").and_then(|s| s.parse().ok()),
                ),
            ];
            for (name, v) in fields {
                if let Some(v) = v.filter(|&v| v > 0) {
                    out.push((name, v));
                }
            }
            break;
        }
    }
    if let Some(n) = std::fs::read_to_string(root.join("devices/system/cpu/online"))
        .ok()
        .and_then(|s| parse_cpu_list(s.trim()))
        .filter(|&n| n > 0)
    {
        out.push(("cores", n));
    }
    out
}

/// Parses sysfs sizes such as `32K`, `2048K`, `1M` or `512`.
fn parse_size(s: &str) -> Option<usize> {
    let s = s.trim();
    let (digits, mult) = match s.chars().last()? {
        'K' | 'k' => (&s[..s.len() - 1], 1024),
        'M' | 'm' => (&s[..s.len() - 1], 1024 * 1024),
        'G' | 'g' => (&s[..s.len() - 1], 1024 * 1024 * 1024),
        _ => (s, 1),
    };
    digits.parse::<usize>().ok().map(|v| v * mult)
}

/// Counts CPUs in a list such as `0-3,8,10-11`.
fn parse_cpu_list(s: &str) -> Option<usize> {
    let mut n = 0;
    for part in s.split(',').filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.parse().ok()?, b.parse().ok()?);
                n += b.checked_sub(a)? + 1;
            }
            None => {
                part.parse::<usize>().ok()?;
                n += 1;
            }
        }
    }
    Some(n)
}
