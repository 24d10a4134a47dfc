use std::collections::HashSet;
use std::fmt;

use super::analysis::function_free_vars;
use super::{walk_block_exprs, Block, Expr, Function, IrError, Program, Stmt};

/// Structural rules every well-formed program satisfies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Invariant {
    /// Every block has at least one statement.
    NonEmptyBlock,
    /// A `return` is the final statement of its block.
    ReturnLast,
    UniqueFunctionNames,
    UniqueParams,
    /// Every referenced function exists.
    KnownFunction,
    /// An adverb has one axis per argument.
    AxesMatchArgs,
    /// An adverb has at least one argument.
    NonEmptyArgs,
    /// Nested function parameter counts match their use.
    FunctionArity,
    /// Every free variable of a body is a parameter or closure parameter.
    ClosedBody,
    /// Tiled adverbs and fixed-extent functions only come out of the tiling pass.
    NoTiledInInput,
}

impl fmt::Display for Invariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Invariant::NonEmptyBlock => "blocks are non-empty",
            Invariant::ReturnLast => "return is the last statement of its block",
            Invariant::UniqueFunctionNames => "function names are unique",
            Invariant::UniqueParams => "parameter names are unique",
            Invariant::KnownFunction => "referenced functions exist",
            Invariant::AxesMatchArgs => "one axis per adverb argument",
            Invariant::NonEmptyArgs => "adverbs take at least one argument",
            Invariant::FunctionArity => "nested function arity matches its use",
            Invariant::ClosedBody => "free variables are params or closure params",
            Invariant::NoTiledInInput => "no tiled nodes in input programs",
        })
    }
}

/// Validates a user-level program (tiled nodes rejected).
pub fn validate(program: &Program) -> Result<(), IrError> {
    validate_with(program, false)
}

pub(crate) fn validate_with(program: &Program, allow_tiled: bool) -> Result<(), IrError> {
    for f in program.functions() {
        validate_function(program, f, allow_tiled)?;
    }
    Ok(())
}

fn validate_function(program: &Program, f: &Function, allow_tiled: bool) -> Result<(), IrError> {
    let ctx = |msg: String| format!("in `{}`: {msg}", f.name);
    let mut seen = HashSet::new();
    for p in f.params.iter().chain(&f.closure) {
        if !seen.insert(p) {
            return Err(IrError::invalid(
                Invariant::UniqueParams,
                ctx(format!("`{p}` declared twice")),
            ));
        }
    }
    if f.fixed_extent.is_some() && !allow_tiled {
        return Err(IrError::invalid(
            Invariant::NoTiledInInput,
            ctx("fixed-extent function".into()),
        ));
    }
    validate_block(&f.body, &ctx)?;

    let mut err = None;
    walk_block_exprs(&f.body, &mut |e| {
        if err.is_none() {
            err = check_expr(program, e, allow_tiled)
                .err()
                .map(|(inv, msg)| IrError::invalid(inv, ctx(msg)));
        }
    });
    if let Some(e) = err {
        return Err(e);
    }

    let free = function_free_vars(program, f);
    if let Some(v) = free.iter().find(|v| !f.closure.contains(v)) {
        return Err(IrError::invalid(
            Invariant::ClosedBody,
            ctx(format!("unbound variable `{v}`")),
        ));
    }
    Ok(())
}

fn validate_block(block: &Block, ctx: &dyn Fn(String) -> String) -> Result<(), IrError> {
    if block.is_empty() {
        return Err(IrError::invalid(Invariant::NonEmptyBlock, ctx("empty block".into())));
    }
    for (i, s) in block.iter().enumerate() {
        match s {
            Stmt::Return(_) if i + 1 != block.len() => {
                return Err(IrError::invalid(
                    Invariant::ReturnLast,
                    ctx("statements after return".into()),
                ))
            }
            Stmt::If {
                then_block, else_block, ..
            } => {
                validate_block(then_block, ctx)?;
                validate_block(else_block, ctx)?;
            }
            Stmt::For { body, .. } => validate_block(body, ctx)?,
            _ => {}
        }
    }
    Ok(())
}

fn arity(program: &Program, name: &str, expected: usize, role: &str) -> Result<(), (Invariant, String)> {
    let Some(g) = program.get(name) else {
        return Err((Invariant::KnownFunction, format!("unknown function `{name}`")));
    };
    if g.params.len() != expected {
        return Err((
            Invariant::FunctionArity,
            format!(
                "{role} `{name}` takes {} parameters, expected {expected}",
                g.params.len()
            ),
        ));
    }
    Ok(())
}

fn check_expr(program: &Program, e: &Expr, allow_tiled: bool) -> Result<(), (Invariant, String)> {
    match e {
        Expr::Adverb(a) => {
            if a.is_tiled() && !allow_tiled {
                return Err((Invariant::NoTiledInInput, format!("tiled {}", a.kind())));
            }
            if a.args.is_empty() {
                return Err((Invariant::NonEmptyArgs, format!("{} without arguments", a.kind())));
            }
            if a.axes.len() != a.args.len() {
                return Err((
                    Invariant::AxesMatchArgs,
                    format!("{} has {} arguments but {} axes", a.kind(), a.args.len(), a.axes.len()),
                ));
            }
            arity(program, &a.func, a.args.len(), "nested function")?;
            if let Some(fk) = a.tile.as_ref().and_then(|t| t.fixed_fn.as_deref()) {
                arity(program, fk, a.args.len(), "fixed-size function")?;
            }
            if let Some(c) = a.op.combine() {
                arity(program, c, 2, "combine function")?;
            }
            if let super::AdverbOp::Scan { emit: Some(em), .. } = &a.op {
                arity(program, em, 1, "emit function")?;
            }
            Ok(())
        }
        Expr::AllPairs(ap) => arity(program, &ap.func, 2, "allpairs function"),
        _ => Ok(()),
    }
}
