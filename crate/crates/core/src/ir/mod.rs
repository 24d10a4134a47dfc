//! Tree-structured data-parallel IR: expressions, statements, functions and
//! programs, plus the textual format and structural utilities.
//!
//! Adverbs (`Map`, `Reduce`, `Scan`, `AllPairs`) refer to nested functions by
//! name; inline lambdas in source text are lifted into the function table at
//! parse time. Tiled adverbs are the same [`Adverb`] node carrying a
//! [`TileInfo`]; they only come out of the tiling pass.

mod analysis;
mod desugar;
mod normalize;
mod parse;
mod print;
mod validate;

use std::fmt;

use indexmap::IndexMap;
use thiserror::Error;

pub use crate::ndarray::{BinOp, Scalar};
pub use analysis::{
    block_contains_adverb, contains_adverb, contains_control_flow, contains_tiled, control_flow_site, free_vars_block,
    free_vars_expr, function_free_vars, referenced_functions,
};
pub use desugar::desugar_allpairs;
pub use normalize::normalize_adverb_operands;
pub use parse::{parse_program, parse_program_with, ParseOptions};
pub use print::{print_expr, print_program, print_program_debug};
pub use validate::{validate, Invariant};

pub type Name = String;
pub type Block = Vec<Stmt>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IrError {
    #[error("syntax error at {line}:{col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("invalid program ({invariant}): {detail}")]
    Validation { invariant: Invariant, detail: String },
}

impl IrError {
    pub(crate) fn invalid(invariant: Invariant, detail: impl Into<String>) -> Self {
        IrError::Validation {
            invariant,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(Scalar),
    Var(Name),
    BinOp(BinOp, Box<Expr>, Box<Expr>),
    ArrayLit(Vec<Expr>),
    Index(Box<Expr>, Box<Expr>),
    Adverb(Box<Adverb>),
    AllPairs(Box<AllPairs>),
}

impl Expr {
    pub fn var(name: impl Into<Name>) -> Expr {
        Expr::Var(name.into())
    }

    pub fn int(v: i64) -> Expr {
        Expr::Const(Scalar::Int(v))
    }

    pub fn float(v: f64) -> Expr {
        Expr::Const(Scalar::Float(v))
    }

    pub fn binop(op: BinOp, a: Expr, b: Expr) -> Expr {
        Expr::BinOp(op, Box::new(a), Box::new(b))
    }

    pub fn adverb(a: Adverb) -> Expr {
        Expr::Adverb(Box::new(a))
    }

    pub fn as_adverb(&self) -> Option<&Adverb> {
        match self {
            Expr::Adverb(a) => Some(a),
            _ => None,
        }
    }

    pub fn as_var(&self) -> Option<&str> {
        match self {
            Expr::Var(v) => Some(v),
            _ => None,
        }
    }
}

/// Per-kind payload of an adverb.
#[derive(Debug, Clone, PartialEq)]
pub enum AdverbOp {
    Map,
    Reduce {
        combine: Name,
        init: Expr,
    },
    /// `emit: None` is the identity.
    Scan {
        combine: Name,
        emit: Option<Name>,
        init: Expr,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AdverbKind {
    Map,
    Reduce,
    Scan,
}

impl fmt::Display for AdverbKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdverbKind::Map => "Map",
            AdverbKind::Reduce => "Reduce",
            AdverbKind::Scan => "Scan",
        })
    }
}

impl AdverbOp {
    pub fn kind(&self) -> AdverbKind {
        match self {
            AdverbOp::Map => AdverbKind::Map,
            AdverbOp::Reduce { .. } => AdverbKind::Reduce,
            AdverbOp::Scan { .. } => AdverbKind::Scan,
        }
    }

    pub fn combine(&self) -> Option<&str> {
        match self {
            AdverbOp::Map => None,
            AdverbOp::Reduce { combine, .. } | AdverbOp::Scan { combine, .. } => Some(combine),
        }
    }

    pub fn init(&self) -> Option<&Expr> {
        match self {
            AdverbOp::Map => None,
            AdverbOp::Reduce { init, .. } | AdverbOp::Scan { init, .. } => Some(init),
        }
    }
}

/// Marks an adverb as tiled: which TileSpec slot gives its tile size, how many
/// tiled operators enclose it, and the fixed-size variant `f^k` of its nested
/// function used on full tiles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileInfo {
    pub slot: usize,
    pub depth: usize,
    pub fixed_fn: Option<Name>,
}

/// `Map`/`Reduce`/`Scan` applied to `args`, slicing `args[i]` along `axes[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adverb {
    pub op: AdverbOp,
    pub func: Name,
    pub args: Vec<Expr>,
    pub axes: Vec<usize>,
    pub tile: Option<TileInfo>,
}

impl Adverb {
    pub fn map(func: impl Into<Name>, args: Vec<Expr>, axes: Vec<usize>) -> Adverb {
        Adverb {
            op: AdverbOp::Map,
            func: func.into(),
            args,
            axes,
            tile: None,
        }
    }

    pub fn reduce(
        func: impl Into<Name>,
        combine: impl Into<Name>,
        init: Expr,
        args: Vec<Expr>,
        axes: Vec<usize>,
    ) -> Adverb {
        Adverb {
            op: AdverbOp::Reduce {
                combine: combine.into(),
                init,
            },
            func: func.into(),
            args,
            axes,
            tile: None,
        }
    }

    pub fn kind(&self) -> AdverbKind {
        self.op.kind()
    }

    pub fn is_tiled(&self) -> bool {
        self.tile.is_some()
    }

    /// Names of every function this node refers to.
    pub fn function_refs(&self) -> Vec<&str> {
        let mut out = vec![self.func.as_str()];
        match &self.op {
            AdverbOp::Map => {}
            AdverbOp::Reduce { combine, .. } => out.push(combine),
            AdverbOp::Scan { combine, emit, .. } => {
                out.push(combine);
                if let Some(e) = emit {
                    out.push(e);
                }
            }
        }
        if let Some(TileInfo { fixed_fn: Some(fk), .. }) = &self.tile {
            out.push(fk);
        }
        out
    }
}

/// Generalized outer product: `out[i][j] = f(left_i, right_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AllPairs {
    pub func: Name,
    pub left: Expr,
    pub right: Expr,
    pub axes: [usize; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stmt {
    Assign(Name, Expr),
    Return(Expr),
    If {
        cond: Expr,
        then_block: Block,
        else_block: Block,
    },
    For {
        var: Name,
        seq: Expr,
        body: Block,
    },
}

/// Iteration extent a specialized function (`f^k`) is compiled for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixedExtent {
    /// Fixed at compile time (register tiles).
    Const(usize),
    /// Whatever run-time size the given TileSpec slot holds (cache tiles).
    Slot(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Function {
    pub name: Name,
    pub params: Vec<Name>,
    /// Names captured from the adverb application site.
    pub closure: Vec<Name>,
    pub body: Block,
    pub fixed_extent: Option<FixedExtent>,
}

impl Function {
    pub fn new(name: impl Into<Name>, params: Vec<Name>, closure: Vec<Name>, body: Block) -> Self {
        Function {
            name: name.into(),
            params,
            closure,
            body,
            fixed_extent: None,
        }
    }
}

/// A flat table of uniquely named functions. The entry point is `main`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Program {
    functions: IndexMap<Name, Function>,
}

pub const ENTRY: &str = "main";

impl Program {
    pub fn new() -> Self {
        Program::default()
    }

    /// Adds a function; names must be unique.
    pub fn insert(&mut self, f: Function) -> Result<(), IrError> {
        if self.functions.contains_key(&f.name) {
            return Err(IrError::invalid(
                Invariant::UniqueFunctionNames,
                format!("function `{}` defined twice", f.name),
            ));
        }
        self.functions.insert(f.name.clone(), f);
        Ok(())
    }

    /// Adds or replaces a function.
    pub fn upsert(&mut self, f: Function) {
        self.functions.insert(f.name.clone(), f);
    }

    pub fn get(&self, name: &str) -> Option<&Function> {
        self.functions.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Function> {
        self.functions.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.functions.contains_key(name)
    }

    pub fn functions(&self) -> impl Iterator<Item = &Function> {
        self.functions.values()
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn entry(&self) -> Option<&Function> {
        self.get(ENTRY)
    }

    /// `base` itself if unused, else `base_1`, `base_2`, ...
    pub fn fresh_name(&self, base: &str) -> Name {
        if !self.contains(base) {
            return base.to_string();
        }
        (1..)
            .map(|i| format!("{base}_{i}"))
            .find(|n| !self.contains(n))
            .expect("unbounded")
    }
}

/// Visits every expression in `block` (pre-order, including sub-expressions).
pub fn walk_block_exprs<'a>(block: &'a Block, f: &mut dyn FnMut(&'a Expr)) {
    for s in block {
        match s {
            Stmt::Assign(_, e) | Stmt::Return(e) => walk_expr(e, f),
            Stmt::If {
                cond,
                then_block,
                else_block,
            } => {
                walk_expr(cond, f);
                walk_block_exprs(then_block, f);
                walk_block_exprs(else_block, f);
            }
            Stmt::For { seq, body, .. } => {
                walk_expr(seq, f);
                walk_block_exprs(body, f);
            }
        }
    }
}

pub fn walk_expr<'a>(e: &'a Expr, f: &mut dyn FnMut(&'a Expr)) {
    f(e);
    match e {
        Expr::Const(_) | Expr::Var(_) => {}
        Expr::BinOp(_, a, b) | Expr::Index(a, b) => {
            walk_expr(a, f);
            walk_expr(b, f);
        }
        Expr::ArrayLit(items) => items.iter().for_each(|i| walk_expr(i, f)),
        Expr::Adverb(a) => {
            if let Some(init) = a.op.init() {
                walk_expr(init, f);
            }
            a.args.iter().for_each(|x| walk_expr(x, f));
        }
        Expr::AllPairs(ap) => {
            walk_expr(&ap.left, f);
            walk_expr(&ap.right, f);
        }
    }
}
