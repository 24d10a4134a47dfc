use std::collections::{BTreeSet, HashSet};

use super::{walk_block_exprs, walk_expr, Block, Expr, Function, Name, Program, Stmt};

/// Free variables of an expression. An adverb's nested functions contribute
/// their closure parameters, which are looked up at the application site.
pub fn free_vars_expr(program: &Program, e: &Expr) -> BTreeSet<Name> {
    let mut out = BTreeSet::new();
    walk_expr(e, &mut |x| collect_expr_vars(program, x, &mut out));
    out
}

fn collect_expr_vars(program: &Program, e: &Expr, out: &mut BTreeSet<Name>) {
    match e {
        Expr::Var(v) => {
            out.insert(v.clone());
        }
        Expr::Adverb(a) => {
            for f in a.function_refs() {
                if let Some(func) = program.get(f) {
                    out.extend(func.closure.iter().cloned());
                }
            }
        }
        Expr::AllPairs(ap) => {
            if let Some(func) = program.get(&ap.func) {
                out.extend(func.closure.iter().cloned());
            }
        }
        _ => {}
    }
}

/// Free variables of a block under sequential (function-scoped) binding: a name
/// assigned earlier in the block is bound for later statements.
pub fn free_vars_block(program: &Program, block: &Block) -> BTreeSet<Name> {
    let mut bound = BTreeSet::new();
    let mut free = BTreeSet::new();
    free_in_block(program, block, &mut bound, &mut free);
    free
}

fn free_in_block(program: &Program, block: &Block, bound: &mut BTreeSet<Name>, free: &mut BTreeSet<Name>) {
    let note = |e: &Expr, bound: &BTreeSet<Name>, free: &mut BTreeSet<Name>| {
        for v in free_vars_expr(program, e) {
            if !bound.contains(&v) {
                free.insert(v);
            }
        }
    };
    for s in block {
        match s {
            Stmt::Assign(x, e) => {
                note(e, bound, free);
                bound.insert(x.clone());
            }
            Stmt::Return(e) => note(e, bound, free),
            Stmt::If {
                cond,
                then_block,
                else_block,
            } => {
                note(cond, bound, free);
                let mut b1 = bound.clone();
                free_in_block(program, then_block, &mut b1, free);
                let mut b2 = bound.clone();
                free_in_block(program, else_block, &mut b2, free);
                bound.extend(b1);
                bound.extend(b2);
            }
            Stmt::For { var, seq, body } => {
                note(seq, bound, free);
                bound.insert(var.clone());
                free_in_block(program, body, bound, free);
            }
        }
    }
}

/// Free variables of a function body that are not parameters (closure needs).
pub fn function_free_vars(program: &Program, f: &Function) -> BTreeSet<Name> {
    let mut fv = free_vars_block(program, &f.body);
    for p in &f.params {
        fv.remove(p);
    }
    fv
}

pub fn contains_adverb(e: &Expr) -> bool {
    let mut found = false;
    walk_expr(e, &mut |x| {
        found |= matches!(x, Expr::Adverb(_) | Expr::AllPairs(_));
    });
    found
}

pub fn block_contains_adverb(block: &Block) -> bool {
    let mut found = false;
    walk_block_exprs(block, &mut |x| {
        found |= matches!(x, Expr::Adverb(_) | Expr::AllPairs(_));
    });
    found
}

/// True if `block` contains a tiled adverb.
pub fn contains_tiled(block: &Block) -> bool {
    let mut found = false;
    walk_block_exprs(block, &mut |x| {
        if let Expr::Adverb(a) = x {
            found |= a.is_tiled();
        }
    });
    found
}

/// Functions referenced by adverbs in `block`, in first-occurrence order.
pub fn referenced_functions(block: &Block) -> Vec<Name> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    walk_block_exprs(block, &mut |x| {
        let names: Vec<&str> = match x {
            Expr::Adverb(a) => a.function_refs(),
            Expr::AllPairs(ap) => vec![ap.func.as_str()],
            _ => vec![],
        };
        for n in names {
            if seen.insert(n.to_string()) {
                out.push(n.to_string());
            }
        }
    });
    out
}

fn has_control_flow(block: &Block) -> bool {
    block.iter().any(|s| matches!(s, Stmt::If { .. } | Stmt::For { .. }))
}

/// True if `f`, or any function reachable from it through adverbs, contains an
/// `if` or `for` statement.
pub fn contains_control_flow(program: &Program, f: &Function) -> bool {
    control_flow_site(program, f).is_some()
}

/// The first function reachable from `f` (including `f`) whose body holds an
/// `if` or `for` statement.
pub fn control_flow_site(program: &Program, f: &Function) -> Option<Name> {
    let mut visited = HashSet::new();
    let mut stack = vec![f];
    while let Some(func) = stack.pop() {
        if !visited.insert(func.name.clone()) {
            continue;
        }
        if has_control_flow(&func.body) {
            return Some(func.name.clone());
        }
        for name in referenced_functions(&func.body) {
            if let Some(g) = program.get(&name) {
                stack.push(g);
            }
        }
    }
    None
}
