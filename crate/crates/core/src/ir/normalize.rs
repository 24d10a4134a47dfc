//! Operand normalization: after this pass every adverb sits at the top of an
//! assignment or return, its arguments are variables and its `init` is a
//! variable or constant. Nested adverbs are hoisted into fresh temporaries.

use std::collections::HashSet;

use super::{walk_block_exprs, AdverbOp, Block, Expr, Function, Name, Program, Stmt};

/// Generates names that do not collide with anything already used in a function.
pub(crate) struct Fresh {
    used: HashSet<Name>,
    prefix: &'static str,
    next: usize,
}

impl Fresh {
    pub(crate) fn new(f: &Function, prefix: &'static str) -> Self {
        Fresh {
            used: names_in_function(f),
            prefix,
            next: 0,
        }
    }

    pub(crate) fn name(&mut self) -> Name {
        loop {
            let n = format!("{}{}", self.prefix, self.next);
            self.next += 1;
            if self.used.insert(n.clone()) {
                return n;
            }
        }
    }
}

/// Every variable name mentioned by `f` (params, closure, targets, uses).
pub(crate) fn names_in_function(f: &Function) -> HashSet<Name> {
    let mut used: HashSet<Name> = f.params.iter().chain(&f.closure).cloned().collect();
    collect_targets(&f.body, &mut used);
    walk_block_exprs(&f.body, &mut |e| {
        if let Expr::Var(v) = e {
            used.insert(v.clone());
        }
    });
    used
}

fn collect_targets(block: &Block, used: &mut HashSet<Name>) {
    for s in block {
        match s {
            Stmt::Assign(x, _) => {
                used.insert(x.clone());
            }
            Stmt::Return(_) => {}
            Stmt::If {
                then_block, else_block, ..
            } => {
                collect_targets(then_block, used);
                collect_targets(else_block, used);
            }
            Stmt::For { var, body, .. } => {
                used.insert(var.clone());
                collect_targets(body, used);
            }
        }
    }
}

pub fn normalize_adverb_operands(program: &Program) -> Program {
    let mut out = program.clone();
    for f in program.functions() {
        let mut fresh = Fresh::new(f, "$a");
        let body = normalize_block(&f.body, &mut fresh);
        out.get_mut(&f.name).expect("present").body = body;
    }
    out
}

fn normalize_block(block: &Block, fresh: &mut Fresh) -> Block {
    let mut out = Vec::with_capacity(block.len());
    for s in block {
        match s {
            Stmt::Assign(x, e) => {
                let e = top_level(e, &mut out, fresh);
                out.push(Stmt::Assign(x.clone(), e));
            }
            Stmt::Return(e) => {
                let e = top_level(e, &mut out, fresh);
                out.push(Stmt::Return(e));
            }
            Stmt::If {
                cond,
                then_block,
                else_block,
            } => {
                let cond = hoist_adverbs(cond, &mut out, fresh);
                out.push(Stmt::If {
                    cond,
                    then_block: normalize_block(then_block, fresh),
                    else_block: normalize_block(else_block, fresh),
                });
            }
            Stmt::For { var, seq, body } => {
                let seq = hoist_adverbs(seq, &mut out, fresh);
                out.push(Stmt::For {
                    var: var.clone(),
                    seq,
                    body: normalize_block(body, fresh),
                });
            }
        }
    }
    out
}

/// Right-hand side of an assignment or return: an adverb stays in place with
/// normalized operands; anything else has its adverbs hoisted.
fn top_level(e: &Expr, pre: &mut Block, fresh: &mut Fresh) -> Expr {
    match e {
        Expr::Adverb(a) => {
            let mut a = (**a).clone();
            a.args = a.args.iter().map(|x| to_var(x, pre, fresh)).collect();
            a.op = match a.op {
                AdverbOp::Map => AdverbOp::Map,
                AdverbOp::Reduce { combine, init } => AdverbOp::Reduce {
                    combine,
                    init: to_atom(&init, pre, fresh),
                },
                AdverbOp::Scan { combine, emit, init } => AdverbOp::Scan {
                    combine,
                    emit,
                    init: to_atom(&init, pre, fresh),
                },
            };
            Expr::Adverb(Box::new(a))
        }
        Expr::AllPairs(ap) => {
            let mut ap = (**ap).clone();
            ap.left = to_var(&ap.left, pre, fresh);
            ap.right = to_var(&ap.right, pre, fresh);
            Expr::AllPairs(Box::new(ap))
        }
        _ => hoist_adverbs(e, pre, fresh),
    }
}

fn to_var(e: &Expr, pre: &mut Block, fresh: &mut Fresh) -> Expr {
    if let Expr::Var(_) = e {
        return e.clone();
    }
    let value = top_level(e, pre, fresh);
    let t = fresh.name();
    pre.push(Stmt::Assign(t.clone(), value));
    Expr::Var(t)
}

fn to_atom(e: &Expr, pre: &mut Block, fresh: &mut Fresh) -> Expr {
    match e {
        Expr::Var(_) | Expr::Const(_) => e.clone(),
        _ => to_var(e, pre, fresh),
    }
}

fn hoist_adverbs(e: &Expr, pre: &mut Block, fresh: &mut Fresh) -> Expr {
    match e {
        Expr::Const(_) | Expr::Var(_) => e.clone(),
        Expr::BinOp(op, a, b) => {
            let a = hoist_adverbs(a, pre, fresh);
            let b = hoist_adverbs(b, pre, fresh);
            Expr::binop(*op, a, b)
        }
        Expr::ArrayLit(items) => Expr::ArrayLit(items.iter().map(|i| hoist_adverbs(i, pre, fresh)).collect()),
        Expr::Index(a, i) => {
            let a = hoist_adverbs(a, pre, fresh);
            let i = hoist_adverbs(i, pre, fresh);
            Expr::Index(Box::new(a), Box::new(i))
        }
        Expr::Adverb(_) | Expr::AllPairs(_) => to_var(e, pre, fresh),
    }
}
