use dptile::cachesim::HardwareInfo;
use dptile::ir::{parse_program, print_program, Adverb, AdverbKind, Expr, FixedExtent, Program, Stmt};
use dptile::ndarray::{Layout, NdArray};
use dptile::semantics::{eval_program, EvalConfig, Value};
use dptile::tiling::{
    map_levels, register_tile, register_tile_with, tile_program, RegisterBudget, SlotKind, TileOutcome, Unchanged,
};

const ROW_SUM: &str = "
fn add2(a, b) { return a + b; }
fn sum_row(row) { return reduce(fn(x) { return x; }, combine=add2, init=0, row; axes=[0]); }
fn main(Xs) { return map(sum_row, Xs; axes=[0]); }
";

const MATMUL: &str = "
fn mul2(a, b) { return a * b; }
fn add2(a, b) { return a + b; }
fn dot(x, y) { return reduce(mul2, combine=add2, init=0, x, y; axes=[0, 0]); }
fn main(X, Y) { return allpairs(dot, X, Y; axes=[0, 0]); }
";

fn tiled(src: &str) -> (Program, dptile::tiling::TileSpec) {
    match tile_program(&parse_program(src).unwrap()).unwrap() {
        TileOutcome::Tiled { program, spec } => (program, spec),
        TileOutcome::Unchanged { reason, .. } => panic!("unchanged: {reason}"),
    }
}

fn returned_adverb<'a>(p: &'a Program, f: &str) -> &'a Adverb {
    match p.get(f).unwrap().body.last() {
        Some(Stmt::Return(Expr::Adverb(a))) => a,
        other => panic!("`{f}` does not return an adverb: {other:?}"),
    }
}

#[test]
fn row_sum_structure() {
    let (p, spec) = tiled(ROW_SUM);
    let outer = returned_adverb(&p, "main");
    assert_eq!(outer.kind(), AdverbKind::Map);
    assert_eq!(outer.axes, vec![0]);
    let t = outer.tile.as_ref().unwrap();
    assert_eq!((t.slot, t.depth), (0, 0));

    let inner = returned_adverb(&p, &outer.func);
    assert_eq!(inner.kind(), AdverbKind::Reduce);
    assert_eq!(inner.axes, vec![1]);
    assert_eq!(inner.op.init(), Some(&Expr::int(0)));
    assert_eq!(inner.tile.as_ref().unwrap().depth, 1);

    // Reconstructed nest: a map over the tile's rows of the original reduce.
    let rebuilt = returned_adverb(&p, &inner.func);
    assert_eq!(
        (rebuilt.kind(), rebuilt.axes.clone(), rebuilt.tile.is_none()),
        (AdverbKind::Map, vec![0], true)
    );
    let per_row = returned_adverb(&p, &rebuilt.func);
    assert_eq!(per_row.kind(), AdverbKind::Reduce);
    assert_eq!(per_row.op.combine(), Some("add2"));
    assert_eq!(per_row.func, "sum_row$lam0");

    // Combine lifted by exactly one map over add2.
    let lifted = returned_adverb(&p, inner.op.combine().unwrap());
    assert_eq!(
        (lifted.kind(), lifted.func.as_str(), lifted.axes.clone()),
        (AdverbKind::Map, "add2", vec![0, 0])
    );

    assert_eq!(spec.len(), 2);
    assert!(spec.slots.iter().all(|s| s.kind == SlotKind::RuntimeTunable));
}

#[test]
fn fixed_variants_are_specialized_clones() {
    let (p, _) = tiled(ROW_SUM);
    let outer = returned_adverb(&p, "main");
    let fk = p.get(outer.tile.as_ref().unwrap().fixed_fn.as_ref().unwrap()).unwrap();
    let f = p.get(&outer.func).unwrap();
    assert_eq!(fk.fixed_extent, Some(FixedExtent::Slot(0)));
    assert_eq!((&fk.params, &fk.body), (&f.params, &f.body));
}

#[test]
fn originals_are_not_mutated() {
    let src = parse_program(ROW_SUM).unwrap();
    let (p, _) = tiled(ROW_SUM);
    for name in ["add2", "sum_row", "sum_row$lam0"] {
        assert_eq!(p.get(name), src.get(name));
    }
}

#[test]
fn control_flow_bails_out() {
    let src = "fn g(x) { if x { y = 1; } else { y = 2; } return y; }
               fn main(xs) { return map(g, xs; axes=[0]); }";
    let p = parse_program(src).unwrap();
    match tile_program(&p).unwrap() {
        TileOutcome::Unchanged { program, reason } => {
            assert_eq!(reason, Unchanged::ControlFlow("g".into()));
            assert_eq!(print_program(&program).unwrap(), print_program(&p).unwrap());
        }
        TileOutcome::Tiled { .. } => panic!("tiled despite control flow"),
    }
}

#[test]
fn control_flow_outside_adverbs_is_kept() {
    let src = "fn g(x) { return x * 2; }
               fn main(xs, n) { t = 0; for i in [1, 2] { t = t + i; } return map(g, xs; axes=[0]); }";
    let (p, spec) = tiled(src);
    assert_eq!(spec.len(), 1);
    let xs = Value::Array(NdArray::from_i64(vec![5], vec![1, 2, 3, 4, 5], Layout::RowMajor).unwrap());
    let (v, _) = eval_program(&p, vec![xs, Value::int(0)], EvalConfig::with_tile_sizes(vec![2])).unwrap();
    assert_eq!(v.to_array().to_i64_vec(), Some(vec![2, 4, 6, 8, 10]));
}

#[test]
fn no_adverbs_is_unchanged() {
    let p = parse_program("fn main(x) { return x + 1; }").unwrap();
    assert!(matches!(
        tile_program(&p).unwrap(),
        TileOutcome::Unchanged {
            reason: Unchanged::NoAdverbs,
            ..
        }
    ));
}

#[test]
fn matmul_tiles_three_levels() {
    let (p, spec) = tiled(MATMUL);
    let depths: Vec<(AdverbKind, usize, Vec<usize>)> =
        spec.slots.iter().map(|s| (s.op, s.depth, s.axes.clone())).collect();
    assert_eq!(
        depths,
        vec![
            (AdverbKind::Map, 0, vec![0]),
            (AdverbKind::Map, 1, vec![0]),
            (AdverbKind::Reduce, 2, vec![1, 1]),
        ]
    );
    // The reduce's partial results carry two tile dimensions, so its combine
    // is lifted by two maps.
    let Some(Stmt::Return(Expr::Adverb(r))) = p
        .functions()
        .flat_map(|f| f.body.iter())
        .find(|s| matches!(s, Stmt::Return(Expr::Adverb(a)) if a.kind() == AdverbKind::Reduce && a.tile.is_some()))
    else {
        panic!("no tiled reduce")
    };
    let c1 = returned_adverb(&p, r.op.combine().unwrap());
    let c2 = returned_adverb(&p, &c1.func);
    assert_eq!(
        (c1.kind(), c2.kind(), c2.func.as_str()),
        (AdverbKind::Map, AdverbKind::Map, "add2")
    );
}

#[test]
fn register_pass_picks_budgeted_constants() {
    let (p, spec) = tiled(MATMUL);
    let (q, spec2, targets) = register_tile_with(&p, &spec, &RegisterBudget::new(16));
    assert_eq!(targets.len(), 1);
    let t = &targets[0];
    assert_eq!((t.operands, t.axes, t.k), (2, 1, 4));
    assert_eq!(spec2.len(), 6);
    assert!(spec2.slots[3..].iter().all(|s| s.kind == SlotKind::FixedConstant(4)));
    assert_eq!(map_levels(&p, p.get(&t.function).unwrap()), vec![1, 1]);
    assert_ne!(q, p);
}

#[test]
fn zero_registers_disable_register_pass() {
    let (p, spec) = tiled(MATMUL);
    let hw = HardwareInfo {
        registers: 0,
        ..HardwareInfo::default()
    };
    assert_eq!(register_tile(&p, &spec, &hw), (p, spec));
}

#[test]
fn register_budget_heuristic() {
    let b = RegisterBudget::new(16);
    assert_eq!(b.limit(), 12);
    assert_eq!(b.tile_size(2, 1), 4);
    assert_eq!(b.tile_size(2, 2), 2);
    assert_eq!(b.tile_size(3, 1), 4);
    assert_eq!(b.tile_size(1, 1), 8);
    assert_eq!(b.tile_size(20, 1), 1);
    assert_eq!(RegisterBudget::new(64).tile_size(2, 1), 8);
}

#[test]
fn resolve_fills_fixed_slots() {
    let (p, spec) = tiled(MATMUL);
    let (_, spec2) = register_tile(&p, &spec, &HardwareInfo::default());
    assert_eq!(spec2.resolve(&[5, 6, 7]).unwrap(), vec![5, 6, 7, 4, 4, 4]);
    assert!(spec2.resolve(&[5, 6]).is_err());
    assert!(spec2.resolve(&[5, 0, 7]).is_err());
}

#[test]
fn matmul_results_agree_for_all_variants() {
    let src = parse_program(MATMUL).unwrap();
    let (p, spec) = tiled(MATMUL);
    let (q, spec2) = register_tile(&p, &spec, &HardwareInfo::default());
    let (n, m, k) = (7, 5, 6);
    let x = NdArray::from_i64(
        vec![n, k],
        (0..(n * k) as i64).map(|v| v % 7 - 3).collect(),
        Layout::RowMajor,
    )
    .unwrap();
    let y = NdArray::from_i64(
        vec![m, k],
        (0..(m * k) as i64).map(|v| v % 5 - 2).collect(),
        Layout::ColMajor,
    )
    .unwrap();
    let args = vec![Value::Array(x), Value::Array(y)];
    let (expected, _) = eval_program(&src, args.clone(), EvalConfig::default()).unwrap();
    for sizes in [[1, 1, 1], [2, 3, 4], [7, 5, 6], [3, 2, 100]] {
        let (v, _) = eval_program(&p, args.clone(), EvalConfig::with_tile_sizes(sizes.to_vec())).unwrap();
        assert_eq!(v, expected, "cache tiles {sizes:?}");
        let all = spec2.resolve(&sizes).unwrap();
        let (v, _) = eval_program(&q, args.clone(), EvalConfig::with_tile_sizes(all)).unwrap();
        assert_eq!(v, expected, "cache+register tiles {sizes:?}");
    }
}

#[test]
fn statements_between_levels_are_wrapped() {
    let src = "
        fn add2(a, b) { return a + b; }
        fn scale(e) uses c { return e * c; }
        fn row(r) { c = r[0] + 1; t = map(scale, r; axes=[0]); return reduce(fn(x) { return x; }, combine=add2, init=0, t; axes=[0]); }
        fn main(X) { return map(row, X; axes=[1]); }";
    let orig = parse_program(src).unwrap();
    let (p, _) = tiled(src);
    let x = NdArray::from_i64(vec![4, 5], (0..20).collect(), Layout::RowMajor).unwrap();
    let (expected, _) = eval_program(&orig, vec![Value::Array(x.clone())], EvalConfig::default()).unwrap();
    for sizes in [[1, 1, 1], [2, 3, 2], [5, 4, 3], [3, 1, 4]] {
        let (v, _) = eval_program(
            &p,
            vec![Value::Array(x.clone())],
            EvalConfig::with_tile_sizes(sizes.to_vec()),
        )
        .unwrap();
        assert_eq!(v.to_array().to_i64_vec(), expected.to_array().to_i64_vec(), "{sizes:?}");
    }
}
