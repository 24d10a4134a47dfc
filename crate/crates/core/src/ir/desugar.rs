use super::normalize::Fresh;
use super::{Adverb, AllPairs, Block, Expr, Function, Name, Program, Stmt};

/// Rewrites every `allpairs(f, X, Y; axes=[a, b])` into
/// `map(f$apo, X; axes=[a])`, where `f$apo(x)` maps `f$api` over `Y` along
/// `b` and `f$api(y)` calls `f`'s body with `x` captured by closure.
pub fn desugar_allpairs(program: &Program) -> Program {
    let mut out = program.clone();
    let names: Vec<Name> = program.functions().map(|f| f.name.clone()).collect();
    for name in names {
        let f = out.get(&name).expect("present").clone();
        let mut ctx = Ctx {
            fresh: Fresh::new(&f, "$ap"),
            new_fns: Vec::new(),
        };
        let body = rewrite_block(&out, &f.body, &mut ctx);
        out.get_mut(&name).expect("present").body = body;
        for g in ctx.new_fns {
            out.upsert(g);
        }
    }
    out
}

struct Ctx {
    fresh: Fresh,
    new_fns: Vec<Function>,
}

fn rewrite_block(p: &Program, block: &Block, ctx: &mut Ctx) -> Block {
    let mut out = Vec::with_capacity(block.len());
    for s in block {
        match s {
            Stmt::Assign(x, e) => {
                let e = rewrite(p, e, &mut out, ctx);
                out.push(Stmt::Assign(x.clone(), e));
            }
            Stmt::Return(e) => {
                let e = rewrite(p, e, &mut out, ctx);
                out.push(Stmt::Return(e));
            }
            Stmt::If {
                cond,
                then_block,
                else_block,
            } => {
                let cond = rewrite(p, cond, &mut out, ctx);
                out.push(Stmt::If {
                    cond,
                    then_block: rewrite_block(p, then_block, ctx),
                    else_block: rewrite_block(p, else_block, ctx),
                });
            }
            Stmt::For { var, seq, body } => {
                let seq = rewrite(p, seq, &mut out, ctx);
                out.push(Stmt::For {
                    var: var.clone(),
                    seq,
                    body: rewrite_block(p, body, ctx),
                });
            }
        }
    }
    out
}

fn rewrite(p: &Program, e: &Expr, pre: &mut Block, ctx: &mut Ctx) -> Expr {
    match e {
        Expr::Const(_) | Expr::Var(_) => e.clone(),
        Expr::BinOp(op, a, b) => {
            let a = rewrite(p, a, pre, ctx);
            let b = rewrite(p, b, pre, ctx);
            Expr::binop(*op, a, b)
        }
        Expr::ArrayLit(items) => Expr::ArrayLit(items.iter().map(|i| rewrite(p, i, pre, ctx)).collect()),
        Expr::Index(a, i) => {
            let a = rewrite(p, a, pre, ctx);
            let i = rewrite(p, i, pre, ctx);
            Expr::Index(Box::new(a), Box::new(i))
        }
        Expr::Adverb(a) => {
            let mut a = (**a).clone();
            if let super::AdverbOp::Reduce { init, .. } | super::AdverbOp::Scan { init, .. } = &mut a.op {
                *init = rewrite(p, init, pre, ctx);
            }
            a.args = a.args.iter().map(|x| rewrite(p, x, pre, ctx)).collect();
            Expr::Adverb(Box::new(a))
        }
        Expr::AllPairs(ap) => {
            let left = rewrite(p, &ap.left, pre, ctx);
            let right = rewrite(p, &ap.right, pre, ctx);
            expand(p, ap, left, right, pre, ctx)
        }
    }
}

fn expand(p: &Program, ap: &AllPairs, left: Expr, right: Expr, pre: &mut Block, ctx: &mut Ctx) -> Expr {
    let f = p.get(&ap.func).expect("validated program");
    let (p0, p1) = (f.params[0].clone(), f.params[1].clone());

    // The outer function sees `right` through its closure, so it must be a
    // variable that its own parameter does not shadow.
    let ys = match &right {
        Expr::Var(v) if *v != p0 => v.clone(),
        _ => {
            let t = ctx.fresh.name();
            pre.push(Stmt::Assign(t.clone(), right));
            t
        }
    };

    let taken = |n: &str, ctx: &Ctx| p.contains(n) || ctx.new_fns.iter().any(|g| g.name == n);
    let unique = |base: String, ctx: &Ctx| {
        if !taken(&base, ctx) {
            return base;
        }
        (1..)
            .map(|i| format!("{base}_{i}"))
            .find(|n| !taken(n, ctx))
            .expect("unbounded")
    };

    let inner_name = unique(format!("{}$api", f.name), ctx);
    let mut inner_closure = vec![p0.clone()];
    inner_closure.extend(f.closure.iter().cloned());
    let inner = Function::new(inner_name.clone(), vec![p1], inner_closure, f.body.clone());
    ctx.new_fns.push(inner);

    let outer_name = unique(format!("{}$apo", f.name), ctx);
    let mut outer_closure = vec![ys.clone()];
    outer_closure.extend(f.closure.iter().filter(|c| **c != ys).cloned());
    let outer_body = vec![Stmt::Return(Expr::adverb(Adverb::map(
        inner_name,
        vec![Expr::Var(ys)],
        vec![ap.axes[1]],
    )))];
    ctx.new_fns
        .push(Function::new(outer_name.clone(), vec![p0], outer_closure, outer_body));

    Expr::adverb(Adverb::map(outer_name, vec![left], vec![ap.axes[0]]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{parse_program, print_program, walk_block_exprs};

    #[test]
    fn allpairs_becomes_nested_maps() {
        let p = parse_program(
            "fn mul2(a, b) { return a * b; }
             fn add2(a, b) { return a + b; }
             fn dot(x, y) { return reduce(mul2, combine=add2, init=0, x, y; axes=[0, 0]); }
             fn main(X, Y) { return allpairs(dot, X, Y; axes=[0, 0]); }",
        )
        .unwrap();
        let d = desugar_allpairs(&p);
        let text = print_program(&d).unwrap();
        for f in d.functions() {
            walk_block_exprs(&f.body, &mut |e| assert!(!matches!(e, Expr::AllPairs(_)), "{text}"));
        }
        let Stmt::Return(Expr::Adverb(outer)) = &d.get("main").unwrap().body[0] else {
            panic!("{text}")
        };
        assert_eq!(outer.func, "dot$apo");
        let o = d.get("dot$apo").unwrap();
        assert_eq!(o.closure, vec!["Y".to_string()]);
        let Stmt::Return(Expr::Adverb(inner)) = &o.body[0] else {
            panic!()
        };
        assert_eq!(inner.func, "dot$api");
        assert_eq!(d.get("dot$api").unwrap().closure, vec!["x".to_string()]);
        parse_program(&text).unwrap();
    }

    #[test]
    fn program_without_allpairs_unchanged() {
        let p = parse_program("fn g(x) { return x; } fn main(a) { return map(g, a; axes=[0]); }").unwrap();
        assert_eq!(desugar_allpairs(&p), p);
    }

    #[test]
    fn shadowing_operand_is_hoisted() {
        let p = parse_program(
            "fn f(x, y) { return x - y; }
             fn main(x, z) { return allpairs(f, z, x; axes=[0, 0]); }",
        )
        .unwrap();
        let d = desugar_allpairs(&p);
        let main = d.get("main").unwrap();
        assert_eq!(main.body[0], Stmt::Assign("$ap0".into(), Expr::var("x")));
        print_program(&d).unwrap();
    }
}
