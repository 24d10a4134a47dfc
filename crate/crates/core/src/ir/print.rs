use std::fmt::Write;

use super::validate::validate_with;
use super::{AdverbOp, Block, Expr, FixedExtent, Function, IrError, Program, Scalar, Stmt};

/// Prints a user-level program in the textual format accepted by
/// [`parse_program`](super::parse_program). Fails validation on tiled programs.
pub fn print_program(p: &Program) -> Result<String, IrError> {
    validate_with(p, false)?;
    Ok(render(p))
}

/// Prints any program, including tiled nodes, in the debug dialect.
pub fn print_program_debug(p: &Program) -> Result<String, IrError> {
    validate_with(p, true)?;
    Ok(render(p))
}

fn render(p: &Program) -> String {
    let mut out = String::new();
    for (i, f) in p.functions().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        print_function(&mut out, f);
    }
    out
}

fn print_function(out: &mut String, f: &Function) {
    let _ = write!(out, "fn {}({})", f.name, f.params.join(", "));
    if !f.closure.is_empty() {
        let _ = write!(out, " uses {}", f.closure.join(", "));
    }
    match f.fixed_extent {
        Some(FixedExtent::Const(k)) => {
            let _ = write!(out, " fixed({k})");
        }
        Some(FixedExtent::Slot(s)) => {
            let _ = write!(out, " fixed(slot {s})");
        }
        None => {}
    }
    out.push_str(" {\n");
    print_block(out, &f.body, 1);
    out.push_str("}\n");
}

fn print_block(out: &mut String, block: &Block, indent: usize) {
    let pad = "    ".repeat(indent);
    for s in block {
        match s {
            Stmt::Assign(x, e) => {
                let _ = writeln!(out, "{pad}{x} = {};", print_expr(e));
            }
            Stmt::Return(e) => {
                let _ = writeln!(out, "{pad}return {};", print_expr(e));
            }
            Stmt::If {
                cond,
                then_block,
                else_block,
            } => {
                let _ = writeln!(out, "{pad}if {} {{", print_expr(cond));
                print_block(out, then_block, indent + 1);
                let _ = writeln!(out, "{pad}}} else {{");
                print_block(out, else_block, indent + 1);
                let _ = writeln!(out, "{pad}}}");
            }
            Stmt::For { var, seq, body } => {
                let _ = writeln!(out, "{pad}for {var} in {} {{", print_expr(seq));
                print_block(out, body, indent + 1);
                let _ = writeln!(out, "{pad}}}");
            }
        }
    }
}

fn print_scalar(s: &Scalar) -> String {
    match s {
        Scalar::Int(v) => v.to_string(),
        Scalar::Float(v) => format!("{v:?}"),
    }
}

fn print_operand(e: &Expr) -> String {
    match e {
        Expr::BinOp(..) => format!("({})", print_expr(e)),
        _ => print_expr(e),
    }
}

fn join_axes(axes: &[usize]) -> String {
    axes.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(", ")
}

pub fn print_expr(e: &Expr) -> String {
    match e {
        Expr::Const(s) => print_scalar(s),
        Expr::Var(v) => v.clone(),
        Expr::BinOp(op, a, b) => format!("{} {} {}", print_operand(a), op.symbol(), print_operand(b)),
        Expr::ArrayLit(items) => {
            format!("[{}]", items.iter().map(print_expr).collect::<Vec<_>>().join(", "))
        }
        Expr::Index(a, i) => {
            let base = match **a {
                Expr::Const(Scalar::Int(v)) if v < 0 => format!("({})", print_expr(a)),
                Expr::Const(Scalar::Float(v)) if v.is_sign_negative() => format!("({})", print_expr(a)),
                _ => print_operand(a),
            };
            format!("{base}[{}]", print_expr(i))
        }
        Expr::Adverb(a) => {
            let mut s = String::new();
            let kw = match a.op {
                AdverbOp::Map => "map",
                AdverbOp::Reduce { .. } => "reduce",
                AdverbOp::Scan { .. } => "scan",
            };
            match &a.tile {
                Some(t) => {
                    let _ = write!(s, "tiled{kw}[slot={}, depth={}", t.slot, t.depth);
                    if let Some(fk) = &t.fixed_fn {
                        let _ = write!(s, ", fk={fk}");
                    }
                    s.push_str("](");
                }
                None => {
                    let _ = write!(s, "{kw}(");
                }
            }
            s.push_str(&a.func);
            match &a.op {
                AdverbOp::Map => {}
                AdverbOp::Reduce { combine, init } => {
                    let _ = write!(s, ", combine={combine}, init={}", print_expr(init));
                }
                AdverbOp::Scan { combine, emit, init } => {
                    let _ = write!(s, ", combine={combine}");
                    if let Some(em) = emit {
                        let _ = write!(s, ", emit={em}");
                    }
                    let _ = write!(s, ", init={}", print_expr(init));
                }
            }
            for arg in &a.args {
                let _ = write!(s, ", {}", print_expr(arg));
            }
            let _ = write!(s, "; axes=[{}])", join_axes(&a.axes));
            s
        }
        Expr::AllPairs(ap) => format!(
            "allpairs({}, {}, {}; axes=[{}])",
            ap.func,
            print_expr(&ap.left),
            print_expr(&ap.right),
            join_axes(&ap.axes)
        ),
    }
}
