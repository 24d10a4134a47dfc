use dptile::autotuner::ProbeKind;
use dptile::bench::{
    compile, kmeans_ir, kmeans_reference, naive_matmul_transposed, run_benchmark, BenchError, BenchParams, GenSpec,
    TilingMode, Variant, KMEANS_DIST,
};
use dptile::cachesim::HardwareInfo;
use dptile::ir::parse_program;
use dptile::ndarray::{ElemType, Layout, NdArray};

#[test]
fn matmul_variants_agree() {
    let params = BenchParams {
        n: 12,
        tiling: TilingMode::CacheRegister,
        probe: ProbeKind::Misses,
        ..BenchParams::default()
    };
    let rows = run_benchmark("matmul", &params, &HardwareInfo::default()).unwrap();
    let variants: Vec<Variant> = rows.iter().map(|r| r.variant).collect();
    assert_eq!(variants, vec![Variant::Untiled, Variant::Tiled, Variant::Autotuned]);
    for r in &rows[1..] {
        assert!((r.checksum - rows[0].checksum).abs() <= 1e-9 * rows[0].checksum.abs());
        assert_eq!(r.tile_sizes.len(), 6);
    }
}

#[test]
fn naive_matmul_identity() {
    let a = GenSpec::new(vec![8, 8], ElemType::F64, Layout::RowMajor, 1).generate();
    let eye = NdArray::from_f64(
        vec![8, 8],
        (0..64).map(|i| f64::from(i % 9 == 0)).collect(),
        Layout::RowMajor,
    )
    .unwrap();
    // Second operand is the transpose of the right-hand matrix.
    let v = a.to_f64_vec();
    let at = NdArray::from_f64(
        vec![8, 8],
        (0..64).map(|i| v[(i % 8) * 8 + i / 8]).collect(),
        Layout::RowMajor,
    )
    .unwrap();
    assert_eq!(naive_matmul_transposed(&eye, &at).to_f64_vec(), a.to_f64_vec());
}

#[test]
fn sum_rows_col_major_tiled_misses_fewer() {
    let params = BenchParams {
        n: 512,
        layout: Layout::ColMajor,
        probe: ProbeKind::Misses,
        misses: true,
        ..BenchParams::default()
    };
    let rows = run_benchmark("sum_rows", &params, &HardwareInfo::default()).unwrap();
    assert_eq!(rows[2].variant, Variant::Autotuned);
    assert!(rows[2].misses.unwrap() < rows[0].misses.unwrap(), "{rows:?}");
}

#[test]
fn kmeans_tiled_labels_match_untiled() {
    let params = BenchParams {
        points: 200,
        k: 5,
        features: 8,
        iters: 3,
        autotune: false,
        ..BenchParams::default()
    };
    let rows = run_benchmark("kmeans", &params, &HardwareInfo::default()).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].checksum, rows[1].checksum);
}

#[test]
fn kmeans_separates_blobs() {
    let mut data = Vec::new();
    for i in 0..20 {
        let jitter = f64::from(i % 5) * 0.01;
        data.extend([jitter, -jitter]);
        data.extend([100.0 + jitter, 100.0 - jitter]);
    }
    let pts = NdArray::from_f64(vec![40, 2], data, Layout::RowMajor).unwrap();
    let r = kmeans_reference(&pts, 2, 5, 3);
    let first = r.labels[0];
    for (i, &l) in r.labels.iter().enumerate() {
        assert_eq!(l == first, i % 2 == 0, "point {i}");
    }
}

#[test]
fn kmeans_one_centroid_per_point() {
    let pts = GenSpec::new(vec![6, 3], ElemType::F64, Layout::RowMajor, 5).generate();
    let r = kmeans_reference(&pts, 6, 1, 11);
    for (i, row) in pts.to_f64_vec().chunks(3).enumerate() {
        let l = r.labels[i];
        assert_eq!(&r.centroids[l * 3..l * 3 + 3], row);
    }
    let mut labels = r.labels.clone();
    labels.sort();
    assert_eq!(labels, (0..6).collect::<Vec<_>>());
}

#[test]
fn kmeans_ir_matches_reference() {
    let hw = HardwareInfo::default();
    let pts = GenSpec::new(vec![50, 4], ElemType::F64, Layout::RowMajor, 8).generate();
    let source = parse_program(KMEANS_DIST).unwrap();
    let tiled = compile(&source, TilingMode::Cache, &hw).unwrap();
    let want = kmeans_reference(&pts, 4, 3, 2);
    let (got, misses) = kmeans_ir(&tiled.program, &[7, 3, 2], &pts, 4, 3, 2, Some(&hw)).unwrap();
    assert_eq!(got.labels, want.labels);
    assert!(misses.unwrap() > 0);
}

#[test]
fn unknown_benchmark_and_bad_k() {
    let hw = HardwareInfo::default();
    assert!(matches!(
        run_benchmark("nope", &BenchParams::default(), &hw),
        Err(BenchError::Unknown(_))
    ));
    let p = BenchParams {
        points: 3,
        k: 4,
        ..BenchParams::default()
    };
    assert!(matches!(run_benchmark("kmeans", &p, &hw), Err(BenchError::Param(_))));
}

#[test]
fn csv_rows_are_stable() {
    let params = BenchParams {
        n: 4,
        autotune: false,
        ..BenchParams::default()
    };
    let rows = run_benchmark("add1", &params, &HardwareInfo::default()).unwrap();
    let cols = dptile::bench::BenchmarkResult::CSV_HEADER.split(',').count();
    for r in &rows {
        assert_eq!(r.csv_row().split(',').count(), cols);
    }
}
