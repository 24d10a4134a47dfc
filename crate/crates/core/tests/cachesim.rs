use std::fs;
use std::path::Path;

use dptile::cachesim::{
    probe_hardware_with, simulate, trace_program, CacheConfig, HardwareInfo, ProbeSources, Provenance,
};
use dptile::ir::parse_program;
use dptile::ndarray::{Layout, NdArray};
use dptile::semantics::{AccessKind, Value};
use dptile::tiling::{tile_program, TileOutcome};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn fake_sysfs(root: &Path, size: &str, ways: &str, line: &str, online: &str) {
    let idx = root.join("devices/system/cpu/cpu0/cache/index0");
    fs::create_dir_all(&idx).unwrap();
    for (f, v) in [
        ("level", "1"),
        ("type", "Data"),
        ("size", size),
        ("ways_of_associativity", ways),
        ("coherency_line_size", line),
    ] {
        fs::write(idx.join(f), format!("{v}\n")).unwrap();
    }
    fs::write(root.join("devices/system/cpu/online"), format!("{online}\n")).unwrap();
}

fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

#[test]
fn probe_precedence_defaults_sysfs_file_env() {
    let dir = TempDir::new().unwrap();
    fake_sysfs(dir.path(), "48K", "12", "64", "0-7");
    let cfg = dir.path().join("hw.toml");
    fs::write(&cfg, "cores = 2\nregisters = 32\n").unwrap();

    let none = probe_hardware_with(&ProbeSources::default());
    assert_eq!(none, HardwareInfo::default());

    let probed = probe_hardware_with(&ProbeSources {
        sys_root: Some(dir.path().into()),
        ..ProbeSources::default()
    });
    assert_eq!(
        (probed.l1_bytes, probed.associativity, probed.cores),
        (48 * 1024, 12, 8)
    );
    assert_eq!(probed.provenance["l1_bytes"], Provenance::Probed);
    assert_eq!(probed.provenance["registers"], Provenance::Default);

    let full = probe_hardware_with(&ProbeSources {
        sys_root: Some(dir.path().into()),
        config_file: Some(cfg),
        env: env(&[("DPTILE_CORES", "3")]),
    });
    assert_eq!((full.cores, full.registers, full.l1_bytes), (3, 32, 48 * 1024));
    assert_eq!(full.provenance["registers"], Provenance::Configured);
}

#[test]
fn configured_geometry_wins_over_probed() {
    let dir = TempDir::new().unwrap();
    fake_sysfs(dir.path(), "48K", "12", "64", "0");
    // 16 KiB is inconsistent with the probed 12 ways; the probed ways give way.
    let hw = probe_hardware_with(&ProbeSources {
        sys_root: Some(dir.path().into()),
        env: env(&[("DPTILE_L1_BYTES", "16384")]),
        ..ProbeSources::default()
    });
    assert_eq!((hw.l1_bytes, hw.line_bytes, hw.associativity), (16384, 64, 8));
}

#[test]
fn unusable_values_fall_back_to_defaults() {
    let hw = probe_hardware_with(&ProbeSources {
        env: env(&[
            ("DPTILE_L1_BYTES", "0"),
            ("DPTILE_CORES", "x"),
            ("DPTILE_REGISTERS", "0"),
        ]),
        ..ProbeSources::default()
    });
    assert_eq!((hw.l1_bytes, hw.cores, hw.registers), (32 * 1024, 4, 0));
    let bad = probe_hardware_with(&ProbeSources {
        env: env(&[("DPTILE_L1_BYTES", "1000"), ("DPTILE_L1_ASSOC", "3")]),
        ..ProbeSources::default()
    });
    assert_eq!(bad.cache_config(), HardwareInfo::default().cache_config());
}

#[test]
fn misses_never_grow_with_capacity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let trace: Vec<u64> = (0..2000)
            .map(|_| rng.random_range(0..64u64) * 64 * rng.random_range(1..4u64))
            .collect();
        let mut last = u64::MAX;
        // Fully associative LRU has the inclusion property.
        for lines in [1, 2, 4, 8, 16, 32, 64] {
            let cfg = CacheConfig::new(lines * 64, 64, lines).unwrap();
            let misses = simulate(&trace, cfg).unwrap().misses;
            assert!(misses <= last, "{lines} lines: {misses} > {last}");
            last = misses;
        }
    }
}

#[test]
fn tiled_trace_visits_blocks() {
    let src = "
fn add2(a, b) { return a + b; }
fn sum_row(row) { return reduce(fn(x) { return x; }, combine=add2, init=0, row; axes=[0]); }
fn main(Xs) { return map(sum_row, Xs; axes=[0]); }";
    let TileOutcome::Tiled { program, .. } = tile_program(&parse_program(src).unwrap()).unwrap() else {
        panic!("not tiled")
    };
    let x = NdArray::from_i64(vec![4, 4], (0..16).collect(), Layout::RowMajor).unwrap();
    let (_, events) = trace_program(&program, vec![Value::Array(x)], Some(vec![2, 2])).unwrap();
    let reads: Vec<u64> = events
        .iter()
        .filter(|(_, k)| *k == AccessKind::Read)
        .map(|(a, _)| *a)
        .collect();
    let base = reads[0];
    let elems: Vec<u64> = reads
        .iter()
        .filter(|&&a| a >= base && a < base + 16 * 8)
        .map(|a| (a - base) / 8)
        .collect();
    // 2×2 blocks, row-major inside each block and across blocks.
    assert_eq!(elems, vec![0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15]);
}
