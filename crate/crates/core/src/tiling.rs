//! The tiling transformation.
//!
//! The entry function is walked with a [`TilingState`]: every adverb becomes
//! its tiled counterpart. A `Map` whose nested function contains further
//! adverbs recurses into a clone of that function; any other adverb (and every
//! `Reduce`/`Scan`) terminates the recursion, and its nested function is
//! rebuilt by [`build_tree`] as the untiled operator nest restricted to one
//! tile. Non-operator statements inside tiled functions see arrays with one
//! extra leading dimension per enclosing tile level, so they are wrapped in
//! `Map`s that peel those dimensions off again.
//!
//! Applying the same machinery to the innermost fixed-size functions with
//! small constant tile sizes gives the register-tiling pass.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use crate::cachesim::HardwareInfo;
use crate::ir::{
    block_contains_adverb, contains_control_flow, contains_tiled, control_flow_site, desugar_allpairs, free_vars_expr,
    function_free_vars, normalize_adverb_operands, referenced_functions, validate, walk_block_exprs, Adverb,
    AdverbKind, AdverbOp, Block, Expr, FixedExtent, Function, IrError, Name, Program, Stmt, TileInfo, ENTRY,
};

/// One entry of σ: an adverb the transformation has descended through.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Visited {
    pub kind: AdverbKind,
    pub axes: Vec<usize>,
}

/// Transformation state for one function scope.
///
/// * `sigma` — adverbs visited on the way here; its length is the depth.
/// * `delta` — per name, the original axes already consumed by enclosing tiled
///   operators; the remaining axes are the complement, in order.
/// * `eps` — per name, the depths at which it was tiled, each with the local
///   axis the original adverb sliced it along at that depth.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TilingState {
    pub sigma: Vec<Visited>,
    pub delta: HashMap<Name, BTreeSet<usize>>,
    pub eps: BTreeMap<Name, Vec<(usize, usize)>>,
}

impl TilingState {
    pub fn depth(&self) -> usize {
        self.sigma.len()
    }

    /// ε lookup; unknown names have the empty sequence.
    pub fn eps_of(&self, name: &str) -> &[(usize, usize)] {
        self.eps.get(name).map(Vec::as_slice).unwrap_or(&[])
    }

    /// `Δ[name][local]`: the global axis a local axis of `name` refers to.
    pub fn global_axis(&self, name: &str, local: usize) -> usize {
        match self.delta.get(name) {
            None => local,
            Some(removed) => (0..).filter(|a| !removed.contains(a)).nth(local).expect("unbounded"),
        }
    }

    /// Records `name` as holding an array with one leading tile dimension per
    /// depth in `depths`.
    fn set_leading(&mut self, name: &str, depths: &[usize]) {
        if depths.is_empty() {
            self.eps.remove(name);
            self.delta.remove(name);
        } else {
            self.eps
                .insert(name.to_string(), depths.iter().map(|&d| (d, 0)).collect());
            self.delta.insert(name.to_string(), (0..depths.len()).collect());
        }
    }

    fn has_leading_dims(&self, name: &str) -> bool {
        let e = self.eps_of(name);
        e.len() == self.depth() && e.iter().enumerate().all(|(i, &(d, ax))| d == i && ax == 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    /// Cache tile: size chosen at run time.
    RuntimeTunable,
    /// Register tile: size fixed by the transformation.
    FixedConstant(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileSlot {
    pub id: usize,
    /// Operator path from the entry function, e.g. `main/map(sum_row)/reduce(sum_row$lam0)`.
    pub path: String,
    pub kind: SlotKind,
    pub op: AdverbKind,
    pub depth: usize,
    /// Global axes of the tiled operator's arguments.
    pub axes: Vec<usize>,
}

/// Tile-size slots of a tiled program, indexed by slot id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TileSpec {
    pub slots: Vec<TileSlot>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TileSpecError {
    #[error("expected {expected} tunable tile sizes, got {got}")]
    Count { expected: usize, got: usize },
    #[error("tile sizes must be at least 1")]
    Zero,
}

impl TileSpec {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn tunable(&self) -> impl Iterator<Item = &TileSlot> {
        self.slots.iter().filter(|s| s.kind == SlotKind::RuntimeTunable)
    }

    pub fn tunable_count(&self) -> usize {
        self.tunable().count()
    }

    /// Per-slot sizes: `tunable` fills the run-time slots in order, fixed
    /// slots keep their constant.
    pub fn resolve(&self, tunable: &[usize]) -> Result<Vec<usize>, TileSpecError> {
        if tunable.len() != self.tunable_count() {
            return Err(TileSpecError::Count {
                expected: self.tunable_count(),
                got: tunable.len(),
            });
        }
        if tunable.contains(&0) {
            return Err(TileSpecError::Zero);
        }
        let mut it = tunable.iter();
        Ok(self
            .slots
            .iter()
            .map(|s| match s.kind {
                SlotKind::RuntimeTunable => *it.next().expect("counted"),
                SlotKind::FixedConstant(k) => k,
            })
            .collect())
    }
}

impl fmt::Display for TileSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "slot  kind      depth  axes    path")?;
        for s in &self.slots {
            let kind = match s.kind {
                SlotKind::RuntimeTunable => "tunable".to_string(),
                SlotKind::FixedConstant(k) => format!("fixed={k}"),
            };
            writeln!(
                f,
                "{:<5} {:<9} {:<6} {:<7} {}",
                s.id,
                kind,
                s.depth,
                format!("{:?}", s.axes),
                s.path
            )?;
        }
        Ok(())
    }
}

/// Why the transformation left a program untiled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Unchanged {
    NoEntry,
    NoAdverbs,
    ControlFlow(Name),
    /// A tile level has no variable to iterate over in the current scope.
    UnanchoredLevel(usize),
    /// A generated function would shadow a name it needs to capture.
    NameCapture(Name),
}

impl fmt::Display for Unchanged {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Unchanged::NoEntry => write!(f, "no entry function `{ENTRY}`"),
            Unchanged::NoAdverbs => write!(f, "no adverbs"),
            Unchanged::ControlFlow(name) => write!(f, "control flow in `{name}`"),
            Unchanged::UnanchoredLevel(d) => write!(f, "unanchored nesting level {d}"),
            Unchanged::NameCapture(n) => write!(f, "name capture of `{n}`"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TileOutcome {
    Tiled { program: Program, spec: TileSpec },
    Unchanged { program: Program, reason: Unchanged },
}

impl TileOutcome {
    pub fn program(&self) -> &Program {
        match self {
            TileOutcome::Tiled { program, .. } | TileOutcome::Unchanged { program, .. } => program,
        }
    }

    pub fn spec(&self) -> Option<&TileSpec> {
        match self {
            TileOutcome::Tiled { spec, .. } => Some(spec),
            TileOutcome::Unchanged { .. } => None,
        }
    }
}

/// Tiles the entry function of `p` for cache, with one run-time slot per
/// tiled operator.
pub fn tile_program(p: &Program) -> Result<TileOutcome, IrError> {
    validate(p)?;
    let unchanged = |reason| {
        Ok(TileOutcome::Unchanged {
            program: p.clone(),
            reason,
        })
    };
    let Some(main) = p.entry() else {
        return unchanged(Unchanged::NoEntry);
    };
    if !block_contains_adverb(&main.body) {
        return unchanged(Unchanged::NoAdverbs);
    }
    for name in referenced_functions(&main.body) {
        let f = p.get(&name).expect("validated");
        if let Some(site) = control_flow_site(p, f) {
            return unchanged(Unchanged::ControlFlow(site));
        }
    }

    let work = normalize_adverb_operands(&desugar_allpairs(p));
    let body = work.entry().expect("entry").body.clone();
    let mut tiler = Tiler {
        prog: work,
        slots: Vec::new(),
        kind: SlotKind::RuntimeTunable,
    };
    let mut st = TilingState::default();
    match tiler.tile_block(&body, &mut st, ENTRY) {
        Ok(body) => {
            tiler.prog.get_mut(ENTRY).expect("entry").body = body;
            debug_assert!(crate::ir::print_program_debug(&tiler.prog).is_ok());
            Ok(TileOutcome::Tiled {
                program: tiler.prog,
                spec: TileSpec { slots: tiler.slots },
            })
        }
        Err(reason) => unchanged(reason),
    }
}

/// Knobs of the register-tile size heuristic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegisterBudget {
    pub registers: usize,
    /// Fraction of the register file tiles may occupy.
    pub fraction: f64,
    pub max_k: usize,
}

impl RegisterBudget {
    pub fn new(registers: usize) -> Self {
        RegisterBudget {
            registers,
            fraction: 0.75,
            max_k: 8,
        }
    }

    pub fn limit(&self) -> usize {
        (self.registers as f64 * self.fraction).floor() as usize
    }

    /// Largest power of two `k` in `[1, max_k]` with `operands · k^axes` within
    /// the budget (1 if none fits).
    pub fn tile_size(&self, operands: usize, axes: usize) -> usize {
        let limit = self.limit();
        let mut best = 1;
        let mut k = 1;
        while k <= self.max_k {
            let need = (operands as u128).saturating_mul((k as u128).saturating_pow(axes as u32));
            if need <= limit as u128 {
                best = k;
            }
            k *= 2;
        }
        best
    }

    /// Whether `k` respects the budget for the given shape (k = 1 always does).
    pub fn admits(&self, operands: usize, axes: usize, k: usize) -> bool {
        k == 1
            || (k <= self.max_k && (operands as u128) * (k as u128).saturating_pow(axes as u32) <= self.limit() as u128)
    }
}

impl From<&HardwareInfo> for RegisterBudget {
    fn from(hw: &HardwareInfo) -> Self {
        RegisterBudget::new(hw.registers)
    }
}

/// A register-tiling target: an innermost fixed-size function and the shape
/// numbers the heuristic used for it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegisterTarget {
    pub function: Name,
    pub operands: usize,
    pub axes: usize,
    pub k: usize,
}

/// Second application of the transformation: re-tiles every innermost `f^k`
/// with compile-time-constant tile sizes.
pub fn register_tile(p: &Program, spec: &TileSpec, hw: &HardwareInfo) -> (Program, TileSpec) {
    let (p, spec, _) = register_tile_with(p, spec, &RegisterBudget::from(hw));
    (p, spec)
}

pub fn register_tile_with(
    p: &Program,
    spec: &TileSpec,
    budget: &RegisterBudget,
) -> (Program, TileSpec, Vec<RegisterTarget>) {
    if budget.registers == 0 {
        return (p.clone(), spec.clone(), Vec::new());
    }
    let mut targets = Vec::new();
    for f in p.functions() {
        walk_block_exprs(&f.body, &mut |e| {
            if let Expr::Adverb(a) = e {
                if let Some(fk) = a.tile.as_ref().and_then(|t| t.fixed_fn.as_ref()) {
                    if !targets.contains(fk) {
                        targets.push(fk.clone());
                    }
                }
            }
        });
    }
    targets.retain(|name| {
        let f = p.get(name).expect("validated");
        !contains_tiled(&f.body) && block_contains_adverb(&f.body)
    });

    let mut tiler = Tiler {
        prog: p.clone(),
        slots: spec.slots.clone(),
        kind: SlotKind::RuntimeTunable,
    };
    let mut done = Vec::new();
    for name in targets {
        let f = tiler.prog.get(&name).expect("present").clone();
        if contains_control_flow(&tiler.prog, &f) {
            continue;
        }
        let operands = f.params.len();
        let axes = map_levels(&tiler.prog, &f).into_iter().max().unwrap_or(0);
        let k = budget.tile_size(operands, axes);
        let snapshot = (tiler.prog.clone(), tiler.slots.clone());
        tiler.kind = SlotKind::FixedConstant(k);
        let mut st = TilingState::default();
        match tiler.tile_block(&f.body, &mut st, &name) {
            Ok(body) => {
                tiler.prog.get_mut(&name).expect("present").body = body;
                done.push(RegisterTarget {
                    function: name,
                    operands,
                    axes,
                    k,
                });
            }
            Err(_) => {
                tiler.prog = snapshot.0;
                tiler.slots = snapshot.1;
            }
        }
    }
    (tiler.prog, TileSpec { slots: tiler.slots }, done)
}

/// For each parameter of `f`, the largest number of `Map` levels that slice
/// it along any path through the nest below `f`.
pub fn map_levels(p: &Program, f: &Function) -> Vec<usize> {
    let mut out = vec![0; f.params.len()];
    let tracked: HashMap<Name, (usize, usize)> =
        f.params.iter().enumerate().map(|(i, n)| (n.clone(), (i, 0))).collect();
    map_levels_rec(p, f, &tracked, &mut out, 0);
    out
}

fn map_levels_rec(p: &Program, f: &Function, tracked: &HashMap<Name, (usize, usize)>, out: &mut [usize], guard: usize) {
    if guard > 64 {
        return;
    }
    let mut adverbs = Vec::new();
    walk_block_exprs(&f.body, &mut |e| {
        if let Expr::Adverb(a) = e {
            adverbs.push(a.clone());
        }
    });
    for a in adverbs {
        let Some(g) = p.get(&a.func) else { continue };
        let is_map = usize::from(a.kind() == AdverbKind::Map);
        let mut inner = HashMap::new();
        for c in &g.closure {
            if let Some(&t) = tracked.get(c) {
                inner.insert(c.clone(), t);
            }
        }
        for (i, arg) in a.args.iter().enumerate() {
            if let (Some(v), Some(param)) = (arg.as_var(), g.params.get(i)) {
                if let Some(&(origin, count)) = tracked.get(v) {
                    let c = count + is_map;
                    out[origin] = out[origin].max(c);
                    inner.insert(param.clone(), (origin, c));
                }
            }
        }
        map_levels_rec(p, g, &inner, out, guard + 1);
    }
}

/// Clones `f` as a fixed-extent specialization and returns the clone's name.
pub fn specialize_fixed(p: &mut Program, f: &str, extent: FixedExtent) -> Name {
    let mut g = p.get(f).expect("function exists").clone();
    g.name = p.fresh_name(&format!("{f}$k"));
    g.fixed_extent = Some(extent);
    let name = g.name.clone();
    p.upsert(g);
    name
}

/// One level of a [`build_tree`] nest.
#[derive(Debug, Clone, PartialEq)]
pub struct Level {
    pub depth: usize,
    pub op: AdverbOp,
}

impl Level {
    pub fn map(depth: usize) -> Self {
        Level {
            depth,
            op: AdverbOp::Map,
        }
    }
}

/// Builds `σ_0(vars_0, λvars_0. σ_1(vars_1, … σ_n(vars_n, innermost)))`: level
/// `i` slices exactly the `vars` whose ε contains that level's depth, along the
/// recorded local axis. Intermediate functions are added to `p` under fresh
/// names derived from `base`; `innermost` must already exist.
pub fn build_tree(
    p: &mut Program,
    base: &str,
    levels: &[Level],
    vars: &[Name],
    eps: &BTreeMap<Name, Vec<(usize, usize)>>,
    innermost: &str,
) -> Result<Expr, Unchanged> {
    assert!(!levels.is_empty(), "build_tree needs at least one level");
    let sliced = |lvl: &Level| -> (Vec<Name>, Vec<usize>) {
        vars.iter()
            .filter_map(|v| {
                eps.get(v)
                    .and_then(|e| e.iter().find(|(d, _)| *d == lvl.depth))
                    .map(|&(_, ax)| (v.clone(), ax))
            })
            .unzip()
    };
    let mut func = innermost.to_string();
    let mut i = levels.len();
    loop {
        i -= 1;
        let (args, axes) = sliced(&levels[i]);
        if args.is_empty() {
            return Err(Unchanged::UnanchoredLevel(levels[i].depth));
        }
        let e = Expr::adverb(Adverb {
            op: levels[i].op.clone(),
            func: func.clone(),
            args: args.into_iter().map(Expr::Var).collect(),
            axes,
            tile: None,
        });
        if i == 0 {
            return Ok(e);
        }
        let (params, _) = sliced(&levels[i - 1]);
        let name = p.fresh_name(&format!("{base}$u{}", levels[i - 1].depth));
        let mut g = Function::new(name.clone(), params, vec![], vec![Stmt::Return(e)]);
        g.closure = function_free_vars(p, &g).into_iter().collect();
        p.upsert(g);
        func = name;
    }
}

struct Tiler {
    prog: Program,
    slots: Vec<TileSlot>,
    kind: SlotKind,
}

impl Tiler {
    fn tile_block(&mut self, block: &Block, st: &mut TilingState, path: &str) -> Result<Block, Unchanged> {
        let mut out = Vec::with_capacity(block.len());
        for s in block {
            match s {
                Stmt::Assign(x, Expr::Adverb(a)) => {
                    let a = self.tile_adverb(a, st, path)?;
                    out.push(Stmt::Assign(x.clone(), Expr::adverb(a)));
                    let all: Vec<usize> = (0..st.depth()).collect();
                    st.set_leading(x, &all);
                }
                Stmt::Assign(x, e) => match self.wrap(e, st, false, path)? {
                    Some((e, depths)) => {
                        out.push(Stmt::Assign(x.clone(), e));
                        st.set_leading(x, &depths);
                    }
                    None => {
                        out.push(s.clone());
                        st.set_leading(x, &[]);
                    }
                },
                Stmt::Return(Expr::Adverb(a)) => {
                    let a = self.tile_adverb(a, st, path)?;
                    out.push(Stmt::Return(Expr::adverb(a)));
                }
                Stmt::Return(e) => {
                    let keep = st.depth() == 0 || e.as_var().is_some_and(|v| st.has_leading_dims(v));
                    if keep {
                        out.push(s.clone());
                    } else {
                        let (e, _) = self.wrap(e, st, true, path)?.expect("depth > 0");
                        out.push(Stmt::Return(e));
                    }
                }
                Stmt::If { .. } | Stmt::For { .. } => {
                    if st.depth() > 0 {
                        return Err(Unchanged::ControlFlow(path.to_string()));
                    }
                    out.push(s.clone());
                    let mut assigned = BTreeSet::new();
                    collect_assigned(std::slice::from_ref(s), &mut assigned);
                    for x in assigned {
                        st.set_leading(&x, &[]);
                    }
                }
            }
        }
        Ok(out)
    }

    /// First name (in order) tiled at `depth`, other than `exclude`.
    fn anchor(st: &TilingState, depth: usize, exclude: &[Name]) -> Option<Name> {
        st.eps
            .iter()
            .find(|(n, e)| !exclude.contains(n) && e.iter().any(|(d, _)| *d == depth))
            .map(|(n, _)| n.clone())
    }

    /// Wraps a non-operator expression in one `Map` per tile depth carried by
    /// its free variables (or every enclosing depth if `all_depths`).
    fn wrap(
        &mut self,
        e: &Expr,
        st: &TilingState,
        all_depths: bool,
        path: &str,
    ) -> Result<Option<(Expr, Vec<usize>)>, Unchanged> {
        let fv = free_vars_expr(&self.prog, e);
        let mut vars: Vec<Name> = fv.iter().filter(|v| !st.eps_of(v).is_empty()).cloned().collect();
        let depths: Vec<usize> = if all_depths {
            (0..st.depth()).collect()
        } else {
            vars.iter()
                .flat_map(|v| st.eps_of(v).iter().map(|(d, _)| *d))
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect()
        };
        if depths.is_empty() {
            return Ok(None);
        }
        for &d in &depths {
            if !vars.iter().any(|v| st.eps_of(v).iter().any(|(x, _)| *x == d)) {
                let a = Self::anchor(st, d, &vars).ok_or(Unchanged::UnanchoredLevel(d))?;
                vars.push(a);
            }
        }
        let levels: Vec<Level> = depths.iter().map(|&d| Level::map(d)).collect();
        let last = *depths.last().expect("non-empty");
        let fn_base = path.rsplit('/').next().unwrap_or(path).to_string();
        let fn_base = fn_base
            .split('(')
            .next_back()
            .unwrap_or(&fn_base)
            .trim_end_matches(')')
            .to_string();
        let params: Vec<Name> = vars
            .iter()
            .filter(|v| st.eps_of(v).iter().any(|(d, _)| *d == last))
            .cloned()
            .collect();
        let name = self.prog.fresh_name(&format!("{fn_base}$u{last}"));
        let mut inner = Function::new(name.clone(), params, vec![], vec![Stmt::Return(e.clone())]);
        inner.closure = function_free_vars(&self.prog, &inner).into_iter().collect();
        self.prog.upsert(inner);
        let expr = build_tree(&mut self.prog, &fn_base, &levels, &vars, &st.eps, &name)?;
        Ok(Some((expr, depths)))
    }

    fn new_slot(&mut self, op: AdverbKind, depth: usize, axes: Vec<usize>, path: String) -> usize {
        let id = self.slots.len();
        self.slots.push(TileSlot {
            id,
            path,
            kind: self.kind,
            op,
            depth,
            axes,
        });
        id
    }

    fn fixed_extent(&self, slot: usize) -> FixedExtent {
        match self.kind {
            SlotKind::RuntimeTunable => FixedExtent::Slot(slot),
            SlotKind::FixedConstant(k) => FixedExtent::Const(k),
        }
    }

    fn tile_adverb(&mut self, a: &Adverb, st: &TilingState, path: &str) -> Result<Adverb, Unchanged> {
        let d = st.depth();
        let f = self.prog.get(&a.func).expect("validated").clone();
        let args: Vec<Name> = a
            .args
            .iter()
            .map(|e| e.as_var().expect("normalized operands").to_string())
            .collect();
        let global: Vec<usize> = args.iter().zip(&a.axes).map(|(v, &ax)| st.global_axis(v, ax)).collect();
        let kind = a.kind();
        let slot_path = format!("{path}/{}({})", kind.to_string().to_lowercase(), f.name);
        let slot = self.new_slot(kind, d, global.clone(), slot_path.clone());

        // ε and Δ of the nested function's parameters.
        let mut param_eps = BTreeMap::new();
        let mut param_delta = HashMap::new();
        for ((p, v), (&ax, &g)) in f.params.iter().zip(&args).zip(a.axes.iter().zip(&global)) {
            let mut e = st.eps_of(v).to_vec();
            e.push((d, ax));
            param_eps.insert(p.clone(), e);
            let mut removed = st.delta.get(v).cloned().unwrap_or_default();
            removed.insert(g);
            param_delta.insert(p.clone(), removed);
        }

        let recurse = kind == AdverbKind::Map && block_contains_adverb(&f.body);
        let func = if recurse {
            self.tile_nested(&f, st, &param_eps, &param_delta, a, &slot_path)?
        } else {
            self.rebuild_nested(&f, a, st, &param_eps)?
        };

        let op = match &a.op {
            AdverbOp::Map => AdverbOp::Map,
            AdverbOp::Reduce { combine, init } => AdverbOp::Reduce {
                combine: self.lift(combine, st)?,
                init: init.clone(),
            },
            AdverbOp::Scan { combine, emit, init } => AdverbOp::Scan {
                combine: self.lift(combine, st)?,
                emit: match emit {
                    Some(em) => Some(self.lift(em, st)?),
                    None => None,
                },
                init: init.clone(),
            },
        };
        let extent = self.fixed_extent(slot);
        let fk = specialize_fixed(&mut self.prog, &func, extent);
        Ok(Adverb {
            op,
            func,
            args: args.into_iter().map(Expr::Var).collect(),
            axes: global,
            tile: Some(TileInfo {
                slot,
                depth: d,
                fixed_fn: Some(fk),
            }),
        })
    }

    /// Map whose nested function contains adverbs: tile a clone of its body.
    fn tile_nested(
        &mut self,
        f: &Function,
        st: &TilingState,
        param_eps: &BTreeMap<Name, Vec<(usize, usize)>>,
        param_delta: &HashMap<Name, BTreeSet<usize>>,
        a: &Adverb,
        path: &str,
    ) -> Result<Name, Unchanged> {
        let d = st.depth();
        let mut inner = TilingState {
            sigma: st.sigma.clone(),
            delta: param_delta.clone(),
            eps: param_eps.clone(),
        };
        inner.sigma.push(Visited {
            kind: a.kind(),
            axes: a.axes.clone(),
        });
        let mut closure = f.closure.clone();
        for c in &f.closure {
            if let Some(e) = st.eps.get(c) {
                inner.eps.insert(c.clone(), e.clone());
            }
            if let Some(r) = st.delta.get(c) {
                inner.delta.insert(c.clone(), r.clone());
            }
        }
        // Every enclosing tile level needs a variable in scope to iterate over.
        for depth in 0..d {
            if Self::anchor(&inner, depth, &[]).is_some() {
                continue;
            }
            let mut taken = f.params.clone();
            taken.extend(closure.iter().cloned());
            let anchor = Self::anchor(st, depth, &taken).ok_or(Unchanged::UnanchoredLevel(depth))?;
            inner.eps.insert(anchor.clone(), st.eps_of(&anchor).to_vec());
            if let Some(r) = st.delta.get(&anchor) {
                inner.delta.insert(anchor.clone(), r.clone());
            }
            closure.push(anchor);
        }

        let name = self.prog.fresh_name(&format!("{}$t{d}", f.name));
        // Reserve the name while the body is transformed.
        self.prog.upsert(Function::new(
            name.clone(),
            f.params.clone(),
            closure.clone(),
            f.body.clone(),
        ));
        let body = self.tile_block(&f.body, &mut inner, path)?;
        let mut g = Function::new(name.clone(), f.params.clone(), closure, body);
        let fv = function_free_vars(&self.prog, &g);
        g.closure.retain(|c| fv.contains(c));
        for v in fv {
            if !g.closure.contains(&v) {
                g.closure.push(v);
            }
        }
        self.prog.upsert(g);
        Ok(name)
    }

    /// Rebuilds the untiled operator nest that processes one tile.
    fn rebuild_nested(
        &mut self,
        f: &Function,
        a: &Adverb,
        st: &TilingState,
        param_eps: &BTreeMap<Name, Vec<(usize, usize)>>,
    ) -> Result<Name, Unchanged> {
        let d = st.depth();
        // The emit is applied after tiles are stitched together.
        let op = match &a.op {
            AdverbOp::Scan { combine, init, .. } => AdverbOp::Scan {
                combine: combine.clone(),
                emit: None,
                init: init.clone(),
            },
            other => other.clone(),
        };
        let innermost = Expr::adverb(Adverb {
            op: op.clone(),
            func: f.name.clone(),
            args: f.params.iter().cloned().map(Expr::Var).collect(),
            axes: vec![0; f.params.len()],
            tile: None,
        });
        let mut vars = f.params.clone();
        let mut eps = st.eps.clone();
        for (p, e) in param_eps {
            eps.insert(p.clone(), e.clone());
        }
        for v in free_vars_expr(&self.prog, &innermost) {
            if f.params.contains(&v) {
                continue;
            }
            if !st.eps_of(&v).is_empty() {
                vars.push(v);
            }
        }
        // A needed outer name spelled like a parameter would be shadowed.
        for v in free_vars_expr(&self.prog, &innermost) {
            if f.params.contains(&v) && !param_eps.contains_key(&v) {
                return Err(Unchanged::NameCapture(v));
            }
        }
        if let Some(init) = a.op.init() {
            for v in free_vars_expr(&self.prog, init) {
                if f.params.contains(&v) {
                    return Err(Unchanged::NameCapture(v));
                }
            }
        }
        for depth in 0..d {
            if vars
                .iter()
                .any(|v| eps.get(v).is_some_and(|e| e.iter().any(|(x, _)| *x == depth)))
            {
                continue;
            }
            let mut taken = vars.clone();
            taken.extend(f.params.iter().cloned());
            let anchor = Self::anchor(st, depth, &taken).ok_or(Unchanged::UnanchoredLevel(depth))?;
            vars.push(anchor);
        }

        let mut levels: Vec<Level> = (0..d).map(Level::map).collect();
        levels.push(Level { depth: d, op });
        let expr = build_tree(&mut self.prog, &f.name, &levels, &vars, &eps, &f.name)?;
        let name = self.prog.fresh_name(&format!("{}$t{d}", f.name));
        let mut g = Function::new(name.clone(), f.params.clone(), vec![], vec![Stmt::Return(expr)]);
        g.closure = function_free_vars(&self.prog, &g).into_iter().collect();
        self.prog.upsert(g);
        Ok(name)
    }

    /// Lifts a combine (or emit) function over the `depth` leading tile
    /// dimensions of partial results.
    fn lift(&mut self, combine: &str, st: &TilingState) -> Result<Name, Unchanged> {
        let d = st.depth();
        if d == 0 {
            return Ok(combine.to_string());
        }
        let c = self.prog.get(combine).expect("validated").clone();
        let mut eps = st.eps.clone();
        let all: Vec<(usize, usize)> = (0..d).map(|x| (x, 0)).collect();
        for p in &c.params {
            eps.insert(p.clone(), all.clone());
        }
        let mut vars = c.params.clone();
        for v in &c.closure {
            if c.params.contains(v) {
                return Err(Unchanged::NameCapture(v.clone()));
            }
            if !st.eps_of(v).is_empty() {
                vars.push(v.clone());
            }
        }
        let levels: Vec<Level> = (0..d).map(Level::map).collect();
        let expr = build_tree(&mut self.prog, combine, &levels, &vars, &eps, combine)?;
        let name = self.prog.fresh_name(&format!("{combine}$t{d}"));
        let mut g = Function::new(name.clone(), c.params.clone(), vec![], vec![Stmt::Return(expr)]);
        g.closure = function_free_vars(&self.prog, &g).into_iter().collect();
        self.prog.upsert(g);
        Ok(name)
    }
}

fn collect_assigned(block: &[Stmt], out: &mut BTreeSet<Name>) {
    for s in block {
        match s {
            Stmt::Assign(x, _) => {
                out.insert(x.clone());
            }
            Stmt::Return(_) => {}
            Stmt::If {
                then_block, else_block, ..
            } => {
                collect_assigned(then_block, out);
                collect_assigned(else_block, out);
            }
            Stmt::For { var, body, .. } => {
                out.insert(var.clone());
                collect_assigned(body, out);
            }
        }
    }
}
