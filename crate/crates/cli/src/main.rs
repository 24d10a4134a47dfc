use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dptile::autotuner::{autotune, ProbeKind, TileCache, TuneConfig};
use dptile::bench::{
    compile, default_sizes, run_benchmark, BenchError, BenchParams, BenchmarkResult, GenSpec, TilingMode, CORPUS,
};
use dptile::cachesim::{probe_hardware, simulate_program, HardwareInfo};
use dptile::ir::{parse_program, print_program, print_program_debug, IrError, Program};
use dptile::ndarray::{format_array_text, parse_array_text, ArrayError, Layout};
use dptile::semantics::{eval_program, EvalConfig, Value};

/// Tiling compiler for a small data-parallel array language.
#[derive(Parser, Debug)]
#[command(name = "dptile", version)]
struct Cli {
    /// Output format.
    #[arg(long, value_enum, global = true, default_value_t = Format::Human)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Human,
    Csv,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Probe {
    Walltime,
    Misses,
}

impl From<Probe> for ProbeKind {
    fn from(p: Probe) -> Self {
        match p {
            Probe::Walltime => ProbeKind::WallTime,
            Probe::Misses => ProbeKind::Misses,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Evaluate a program and print its result.
    Run {
        #[command(flatten)]
        exec: Exec,
        /// Print only the order-sensitive checksum of the result.
        #[arg(long)]
        checksum: bool,
    },
    /// Print the tiled program and its tile-size slots.
    Tile {
        program: PathBuf,
        #[arg(long, default_value = "cache", value_parser = parse_tiling)]
        tiling: TilingMode,
        /// Print in the debug dialect even when nothing was tiled.
        #[arg(long)]
        debug: bool,
    },
    /// Search tile sizes for a program on the given arguments.
    Autotune {
        #[command(flatten)]
        exec: Exec,
        #[command(flatten)]
        tune: Tune,
        /// Directory remembering the best sizes per program, input shapes and hardware.
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
    /// Simulate the L1 data cache on a program's element accesses.
    Cachesim {
        #[command(flatten)]
        exec: Exec,
        /// Report misses per phase of this many accesses.
        #[arg(long, default_value_t = 0)]
        phase: u64,
    },
    /// Run a corpus benchmark in every variant and check that they agree.
    Bench {
        /// Benchmark name (sum_rows, matmul, add1, kmeans), or `list`.
        name: String,
        /// Matrix side, or √length for add1.
        #[arg(long, default_value_t = 64)]
        n: usize,
        /// Layout of generated inputs.
        #[arg(long, default_value = "row", value_parser = parse_layout)]
        layout: Layout,
        #[arg(long, default_value_t = 200)]
        points: usize,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 8)]
        features: usize,
        #[arg(long, default_value_t = 3)]
        iters: usize,
        #[arg(long, default_value = "cache", value_parser = parse_tiling)]
        tiling: TilingMode,
        /// Tunable tile sizes of the `tiled` variant, comma separated.
        #[arg(long, value_delimiter = ',')]
        tile_sizes: Option<Vec<usize>>,
        /// Skip the autotuned variant.
        #[arg(long)]
        no_autotune: bool,
        /// Simulate cache misses for every variant.
        #[arg(long)]
        misses: bool,
        #[command(flatten)]
        tune: Tune,
    },
}

/// Program, arguments and how to execute it.
#[derive(Args, Debug)]
struct Exec {
    program: PathBuf,
    /// Arguments of `main`: an array file, `gen:SHAPE[:DTYPE[:LAYOUT[:SEED]]]`
    /// (e.g. `gen:256x256:f64:col:42`) or a scalar literal.
    args: Vec<String>,
    #[arg(long, default_value = "cache", value_parser = parse_tiling)]
    tiling: TilingMode,
    /// Tunable tile sizes, comma separated; defaults to the estimated start point.
    #[arg(long, value_delimiter = ',')]
    tile_sizes: Option<Vec<usize>>,
    /// Worker threads for the outermost tiled operator; defaults to the core count.
    #[arg(long)]
    parallelism: Option<usize>,
}

#[derive(Args, Debug)]
struct Tune {
    #[arg(long, value_enum, default_value_t = Probe::Walltime)]
    probe: Probe,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Candidates per round; defaults to the core count.
    #[arg(long)]
    batch: Option<usize>,
    /// Expected number of runs; the search may use 10% of them.
    #[arg(long, default_value_t = 400)]
    planned_runs: usize,
    /// Evaluate candidates concurrently.
    #[arg(long)]
    parallel: bool,
}

impl Tune {
    fn config(&self, hw: &HardwareInfo) -> TuneConfig {
        TuneConfig {
            seed: self.seed,
            batch: self.batch.unwrap_or(hw.cores).max(1),
            planned_runs: self.planned_runs,
            parallel: self.parallel,
            ..TuneConfig::default()
        }
    }
}

fn parse_tiling(s: &str) -> Result<TilingMode, String> {
    s.parse()
}

fn parse_layout(s: &str) -> Result<Layout, String> {
    match s {
        "row" => Ok(Layout::RowMajor),
        "col" => Ok(Layout::ColMajor),
        o => Err(format!("unknown layout `{o}` (expected row or col)")),
    }
}

/// Bad flags, programs or input files (exit status 1).
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() || cause.is::<IrError>() || cause.is::<ArrayError>() {
            return 1;
        }
        if let Some(b) = cause.downcast_ref::<BenchError>() {
            return match b {
                BenchError::Mismatch { .. } => 3,
                BenchError::Unknown(_) | BenchError::Param(_) | BenchError::Ir(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

fn load_program(path: &Path) -> Result<Program> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let program = parse_program(&text).with_context(|| format!("in {}", path.display()))?;
    Ok(program)
}

fn load_arg(arg: &str) -> Result<Value> {
    if let Some(spec) = arg.strip_prefix("gen:") {
        let g: GenSpec = spec.parse().map_err(|e: BenchError| usage(e.to_string()))?;
        return Ok(Value::Array(g.generate()));
    }
    if let Ok(v) = arg.parse::<i64>() {
        return Ok(Value::int(v));
    }
    if let Ok(v) = arg.parse::<f64>() {
        if !Path::new(arg).exists() {
            return Ok(Value::float(v));
        }
    }
    let text = fs::read_to_string(arg).map_err(|e| usage(format!("cannot read argument file {arg}: {e}")))?;
    let arr = parse_array_text(&text).with_context(|| format!("in {arg}"))?;
    Ok(Value::Array(arr))
}

struct Prepared {
    source: Program,
    program: Program,
    spec: dptile::tiling::TileSpec,
    args: Vec<Value>,
    sizes: Vec<usize>,
    hw: HardwareInfo,
}

fn prepare(exec: &Exec) -> Result<Prepared> {
    if exec.tiling == TilingMode::Off && exec.tile_sizes.is_some() {
        return Err(usage("--tile-sizes requires tiling other than `off`"));
    }
    let hw = probe_hardware();
    let source = load_program(&exec.program)?;
    let args = exec.args.iter().map(|a| load_arg(a)).collect::<Result<Vec<_>>>()?;
    let compiled = compile(&source, exec.tiling, &hw)?;
    if let Some(reason) = &compiled.unchanged {
        log::warn!("program left untiled: {reason}");
    }
    let tunable = match &exec.tile_sizes {
        Some(s) => s.clone(),
        None => default_sizes(&compiled, &args, &hw)?,
    };
    let sizes = compiled
        .spec
        .resolve(&tunable)
        .map_err(|e| usage(format!("--tile-sizes: {e}")))?;
    Ok(Prepared {
        source,
        program: compiled.program,
        spec: compiled.spec,
        args,
        sizes,
        hw,
    })
}

fn print_value(v: &Value, format: Format) {
    match (v, format) {
        (Value::Scalar(s), _) => println!("{s}"),
        (Value::Array(a), Format::Human) => print!("{}", format_array_text(a)),
        (Value::Array(a), Format::Csv) => {
            let cols = a.shape().last().copied().unwrap_or(1).max(1);
            let elems: Vec<String> = a.to_scalars().iter().map(ToString::to_string).collect();
            for row in elems.chunks(cols) {
                println!("{}", row.join(","));
            }
        }
    }
}

fn sizes_str(sizes: &[usize]) -> String {
    sizes.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn cmd_run(exec: &Exec, checksum: bool, format: Format) -> Result<()> {
    let p = prepare(exec)?;
    let config = EvalConfig {
        parallelism: exec.parallelism.unwrap_or(p.hw.cores).max(1),
        tile_sizes: p.sizes,
        ..EvalConfig::default()
    };
    let (v, _) = eval_program(&p.program, p.args, config)?;
    if checksum {
        println!("{:.17e}", v.checksum());
    } else {
        print_value(&v, format);
    }
    Ok(())
}

fn cmd_tile(path: &Path, tiling: TilingMode, debug: bool) -> Result<()> {
    let hw = probe_hardware();
    let source = load_program(path)?;
    let compiled = compile(&source, tiling, &hw)?;
    if let Some(reason) = &compiled.unchanged {
        eprintln!("unchanged: {reason}");
    }
    // Tiled nodes only exist in the debug dialect.
    let text = if debug || !compiled.spec.is_empty() {
        print_program_debug(&compiled.program)?
    } else {
        print_program(&compiled.program)?
    };
    print!("{text}");
    if !compiled.spec.is_empty() {
        println!();
        print!("{}", compiled.spec);
    }
    Ok(())
}

fn cmd_autotune(exec: &Exec, tune: &Tune, cache_dir: Option<&Path>, format: Format) -> Result<()> {
    if exec.tiling == TilingMode::Off {
        return Err(usage(
            "autotune needs a tiled program; use --tiling cache or cache+register",
        ));
    }
    let p = prepare(exec)?;
    if p.spec.tunable_count() == 0 {
        bail!(usage("program has no tunable tile sizes"));
    }
    let cache = cache_dir.map(TileCache::new);
    let key = TileCache::key(&p.program, &p.args, &p.hw);
    if let Some(sizes) = cache.as_ref().and_then(|c| c.get(&key)) {
        log::info!("using cached tile sizes");
        println!("best={}", sizes_str(&sizes));
        return Ok(());
    }
    let result = autotune(
        &p.program,
        &p.spec,
        &p.args,
        &p.hw,
        tune.probe.into(),
        &tune.config(&p.hw),
    )?;
    match format {
        Format::Human => {
            for b in &result.space.bounds {
                println!("bounds lo={} hi={} extent={}", b.lo, b.hi, b.extent);
            }
            for r in &result.outcome.log {
                println!("{r}");
            }
            println!(
                "best={} cost={} evaluations={}",
                sizes_str(&result.sizes),
                result.outcome.best_cost,
                result.outcome.evaluations
            );
        }
        Format::Csv => {
            println!("round,candidate,cost,best,best_cost");
            for r in &result.outcome.log {
                println!(
                    "{},{},{},{},{}",
                    r.round,
                    sizes_str(&r.candidate).replace(',', " "),
                    r.cost.map_or(String::new(), |c| c.to_string()),
                    sizes_str(&r.best).replace(',', " "),
                    r.best_cost
                );
            }
        }
    }
    if let Some(c) = &cache {
        c.put(&key, &result.sizes)?;
    }
    Ok(())
}

fn cmd_cachesim(exec: &Exec, phase: u64, format: Format) -> Result<()> {
    let p = prepare(exec)?;
    let cfg = p.hw.cache_config();
    let report = simulate_program(&p.program, p.args.clone(), Some(p.sizes.clone()), cfg, phase)?;
    let untiled = simulate_program(&p.source, p.args, None, cfg, 0)?;
    match format {
        Format::Human => {
            println!(
                "cache: {} bytes, {}-byte lines, {}-way ({} sets)",
                cfg.capacity,
                cfg.line,
                cfg.associativity,
                cfg.sets()
            );
            println!("tile sizes: [{}]", sizes_str(&p.sizes));
            println!("{}: {}", exec.tiling, report.stats);
            println!("off: {}", untiled.stats);
            for ph in &report.phases {
                println!("phase {} accesses={} misses={}", ph.phase, ph.accesses, ph.misses);
            }
        }
        Format::Csv => {
            println!("tiling,tile_sizes,accesses,reads,writes,hits,misses,evictions,writebacks,miss_ratio");
            for (mode, sizes, s) in [
                (exec.tiling, p.sizes.as_slice(), &report.stats),
                (TilingMode::Off, &[][..], &untiled.stats),
            ] {
                println!(
                    "{mode},{},{},{},{},{},{},{},{},{:.6}",
                    sizes_str(sizes).replace(',', " "),
                    s.accesses,
                    s.reads,
                    s.writes,
                    s.hits,
                    s.misses,
                    s.evictions,
                    s.writebacks,
                    s.miss_ratio()
                );
            }
        }
    }
    Ok(())
}

fn cmd_bench(cmd: &Command, format: Format) -> Result<()> {
    let Command::Bench {
        name,
        n,
        layout,
        points,
        k,
        features,
        iters,
        tiling,
        tile_sizes,
        no_autotune,
        misses,
        tune,
    } = cmd
    else {
        unreachable!()
    };
    if name == "list" {
        for b in CORPUS {
            println!("{:<10} {}", b.name, b.description);
        }
        return Ok(());
    }
    if *tiling == TilingMode::Off {
        return Err(usage("bench compares tiled variants; --tiling off is not allowed"));
    }
    let hw = probe_hardware();
    let params = BenchParams {
        n: *n,
        layout: *layout,
        points: *points,
        k: *k,
        features: *features,
        iters: *iters,
        seed: tune.seed,
        tiling: *tiling,
        tile_sizes: tile_sizes.clone(),
        autotune: !no_autotune,
        probe: tune.probe.into(),
        tune: tune.config(&hw),
        misses: *misses,
        ..BenchParams::default()
    };
    let rows = run_benchmark(name, &params, &hw)?;
    match format {
        Format::Csv => {
            println!("{}", BenchmarkResult::CSV_HEADER);
            for r in &rows {
                println!("{}", r.csv_row());
            }
        }
        Format::Human => {
            println!(
                "{:<10} {:<16} {:<15} {:<20} {:>12} {:>10} {:>24}",
                "benchmark", "variant", "tiling", "tile sizes", "seconds", "misses", "checksum"
            );
            for r in &rows {
                println!(
                    "{:<10} {:<16} {:<15} {:<20} {:>12.6} {:>10} {:>24.17e}",
                    r.benchmark,
                    r.variant.to_string(),
                    r.tiling,
                    sizes_str(&r.tile_sizes),
                    r.wall_seconds,
                    r.misses.map_or("-".to_string(), |m| m.to_string()),
                    r.checksum
                );
            }
            println!("all variants agree");
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Run { exec, checksum } => cmd_run(exec, *checksum, cli.format),
        Command::Tile { program, tiling, debug } => cmd_tile(program, *tiling, *debug),
        Command::Autotune { exec, tune, cache_dir } => cmd_autotune(exec, tune, cache_dir.as_deref(), cli.format),
        Command::Cachesim { exec, phase } => cmd_cachesim(exec, *phase, cli.format),
        cmd @ Command::Bench { .. } => cmd_bench(cmd, cli.format),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
