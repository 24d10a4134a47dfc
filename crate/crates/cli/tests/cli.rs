use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SUM_ROWS: &str = "
fn add2(a, b) { return a + b; }
fn sum_row(row) { return reduce(fn(x) { return x; }, combine=add2, init=0, row; axes=[0]); }
fn main(Xs) { return map(sum_row, Xs; axes=[0]); }
";

const MATMUL: &str = "
fn mul2(x, y) { return x * y; }
fn add2(a, b) { return a + b; }
fn dot(x, y) { return reduce(mul2, combine=add2, init=0, x, y; axes=[0, 0]); }
fn main(Xs, Ys) { return allpairs(dot, Xs, Ys; axes=[0, 0]); }
";

fn dptile(args: &[&str]) -> Output {
    dptile_env(args, &[])
}

fn dptile_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dptile"));
    cmd.args(args).env_remove("DPTILE_HW_CONFIG");
    for (k, _) in dptile::cachesim::ENV_OVERRIDES {
        cmd.env_remove(k);
    }
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_tiled_and_untiled_print_the_same() {
    let dir = TempDir::new().unwrap();
    let prog = write(dir.path(), "rows.dp", SUM_ROWS);
    let x = write(
        dir.path(),
        "x.txt",
        "shape: 3 4\ndtype: i64\n1 2 3 4\n5 6 7 8\n9 10 11 12\n",
    );
    let off = dptile(&["run", s(&prog), s(&x), "--tiling", "off"]);
    let cache = dptile(&["run", s(&prog), s(&x), "--tiling", "cache", "--tile-sizes", "2,3"]);
    assert!(off.status.success(), "{}", stderr(&off));
    assert!(cache.status.success(), "{}", stderr(&cache));
    assert_eq!(stdout(&off), stdout(&cache));
    assert!(stdout(&off).contains("10 26 42"), "{}", stdout(&off));
}

#[test]
fn syntax_error_exits_1() {
    let dir = TempDir::new().unwrap();
    let prog = write(dir.path(), "bad.dp", "fn main(x) { return x + ; }");
    let out = dptile(&["run", s(&prog), "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("syntax error"), "{}", stderr(&out));
}

#[test]
fn bad_flags_exit_1() {
    assert_eq!(dptile(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(dptile(&["bench", "nope"]).status.code(), Some(1));
    let dir = TempDir::new().unwrap();
    let prog = write(dir.path(), "rows.dp", SUM_ROWS);
    let out = dptile(&["run", s(&prog), "gen:4x4", "--tiling", "off", "--tile-sizes", "2,2"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(dptile(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_error_exits_2() {
    let dir = TempDir::new().unwrap();
    let prog = write(dir.path(), "rows.dp", SUM_ROWS);
    let out = dptile(&["run", s(&prog), "gen:4x4", "gen:4x4", "--tiling", "off"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn matmul_identity_times_a() {
    let dir = TempDir::new().unwrap();
    let prog = write(dir.path(), "mm.dp", MATMUL);
    let eye: Vec<String> = (0..64)
        .map(|i| if i % 9 == 0 { "1" } else { "0" }.to_string())
        .collect();
    let a: Vec<i64> = (0..64).map(|i| (i * 7 % 19) - 9).collect();
    // The second operand holds the right-hand matrix transposed.
    let at: Vec<String> = (0..64).map(|i| a[(i % 8) * 8 + i / 8].to_string()).collect();
    let x = write(
        dir.path(),
        "eye.txt",
        &format!("shape: 8 8\ndtype: i64\n{}\n", eye.join(" ")),
    );
    let y = write(
        dir.path(),
        "at.txt",
        &format!("shape: 8 8\ndtype: i64\n{}\n", at.join(" ")),
    );
    for tiling in ["off", "cache", "cache+register"] {
        let out = dptile(&["run", s(&prog), s(&x), s(&y), "--tiling", tiling, "--format", "csv"]);
        assert!(out.status.success(), "{}", stderr(&out));
        let want: Vec<String> = a
            .chunks(8)
            .map(|r| r.iter().map(i64::to_string).collect::<Vec<_>>().join(","))
            .collect();
        assert_eq!(stdout(&out).lines().collect::<Vec<_>>(), want, "{tiling}");
    }
}

#[test]
fn tile_prints_program_and_slots() {
    let dir = TempDir::new().unwrap();
    let prog = write(dir.path(), "mm.dp", MATMUL);
    let out = dptile(&["tile", s(&prog), "--tiling", "cache+register", "--debug"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("tiledmap[slot=0"), "{text}");
    assert!(text.contains("fixed=4"), "{text}");

    let plain = dptile(&["tile", s(&prog)]);
    assert!(plain.status.success(), "{}", stderr(&plain));
    assert!(stdout(&plain).contains("tiledmap[slot=0"), "{}", stdout(&plain));
}

#[test]
fn tile_reports_control_flow_bail_out() {
    let dir = TempDir::new().unwrap();
    let src = "fn g(x) { if x { y = 1; } else { y = 2; } return y; }\nfn main(xs) { return map(g, xs; axes=[0]); }\n";
    let prog = write(dir.path(), "cf.dp", src);
    let tiled = dptile(&["tile", s(&prog)]);
    let off = dptile(&["tile", s(&prog), "--tiling", "off"]);
    assert!(tiled.status.success());
    assert!(stderr(&tiled).contains("unchanged"), "{}", stderr(&tiled));
    assert_eq!(stdout(&tiled), stdout(&off));
}

#[test]
fn cachesim_respects_env_overrides() {
    let dir = TempDir::new().unwrap();
    let prog = write(dir.path(), "rows.dp", SUM_ROWS);
    let out = dptile_env(
        &["cachesim", s(&prog), "gen:64x64:f64:col:1", "--tile-sizes", "16,8"],
        &[
            ("DPTILE_L1_BYTES", "16384"),
            ("DPTILE_LINE_BYTES", "64"),
            ("DPTILE_L1_ASSOC", "8"),
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("cache: 16384 bytes"), "{}", stdout(&out));

    let csv = dptile(&[
        "--format",
        "csv",
        "cachesim",
        s(&prog),
        "gen:64x64:f64:col:1",
        "--tile-sizes",
        "16,8",
    ]);
    let text = stdout(&csv);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("tiling,tile_sizes,accesses"));
    assert!(lines[1].starts_with("cache,16 8,"));
    assert!(lines[2].starts_with("off,,"));
}

#[test]
fn autotune_with_misses_is_deterministic_and_cached() {
    let dir = TempDir::new().unwrap();
    let prog = write(dir.path(), "rows.dp", SUM_ROWS);
    let args = [
        "autotune",
        s(&prog),
        "gen:48x48:f64:col:3",
        "--probe",
        "misses",
        "--batch",
        "4",
    ];
    let a = dptile(&args);
    let b = dptile(&args);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b));
    assert!(stdout(&a).lines().any(|l| l.starts_with("round=")));

    let cache = dir.path().join("tiles");
    let mut cached: Vec<&str> = args.to_vec();
    cached.extend(["--cache-dir", s(&cache)]);
    let first = dptile(&cached);
    let second = dptile(&cached);
    let best = stdout(&first)
        .lines()
        .last()
        .unwrap()
        .split_whitespace()
        .next()
        .unwrap()
        .to_string();
    assert_eq!(stdout(&second).trim(), best);
    assert_eq!(std::fs::read_dir(&cache).unwrap().count(), 1);
}

#[test]
fn bench_csv_has_one_row_per_variant() {
    let out = dptile(&[
        "--format",
        "csv",
        "bench",
        "matmul",
        "--n",
        "12",
        "--tiling",
        "cache+register",
        "--probe",
        "misses",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "benchmark,variant,tiling,tile_sizes,wall_seconds,misses,checksum"
    );
    let variants: Vec<&str> = lines[1..].iter().map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(variants, ["untiled", "tiled", "tiled+autotuned"]);
    let sums: Vec<f64> = lines[1..]
        .iter()
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert!(sums.iter().all(|c| (c - sums[0]).abs() <= 1e-9 * sums[0].abs()));
}

#[test]
fn bench_kmeans_human() {
    let out = dptile(&[
        "bench",
        "kmeans",
        "--points",
        "60",
        "--k",
        "3",
        "--features",
        "4",
        "--no-autotune",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("all variants agree"));
}
