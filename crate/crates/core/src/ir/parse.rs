//! Lexer and recursive-descent parser for the textual IR.
//!
//! ```text
//! fn NAME(PARAMS) [uses CLOSUREPARAMS] { STMT* }
//! STMT := ID = EXPR ; | return EXPR ; | if EXPR { STMT* } else { STMT* }
//!       | for ID in EXPR { STMT* }
//! EXPR := literal | ID | EXPR op EXPR | [EXPR, ...] | EXPR[EXPR]
//!       | map(F, EXPR, ...; axes=[...])
//!       | reduce(F, combine=F, init=EXPR, EXPR, ...; axes=[...])
//!       | scan(F, combine=F, emit=F, init=EXPR, EXPR, ...; axes=[...])
//!       | allpairs(F, EXPR, EXPR; axes=[I, J])
//! F    := NAME | fn(PARAMS) { STMT* }
//! ```
//!
//! The debug dialect (enabled by [`ParseOptions::allow_tiled`]) additionally
//! accepts `tiledmap[slot=S, depth=D, fk=NAME](...)` (and `tiledreduce`,
//! `tiledscan`) and a `fixed(K)` / `fixed(slot S)` annotation after a
//! function's closure list.

use super::analysis::function_free_vars;
use super::validate::validate_with;
use super::{
    Adverb, AdverbOp, AllPairs, BinOp, Block, Expr, FixedExtent, Function, IrError, Name, Program, Scalar, Stmt,
    TileInfo,
};

#[derive(Debug, Clone, Copy, Default)]
pub struct ParseOptions {
    /// Accept tiled adverbs and fixed-extent annotations.
    pub allow_tiled: bool,
}

/// Parses and validates a user program (tiled nodes rejected).
pub fn parse_program(text: &str) -> Result<Program, IrError> {
    parse_program_with(text, ParseOptions::default())
}

pub fn parse_program_with(text: &str, opts: ParseOptions) -> Result<Program, IrError> {
    let tokens = lex(text)?;
    let mut parser = Parser {
        tokens,
        pos: 0,
        opts,
        program: Program::new(),
        lifted: Vec::new(),
        current_fn: String::new(),
        lambda_count: 0,
    };
    parser.program()?;
    let mut program = parser.program;
    resolve_lambda_closures(&mut program, &parser.lifted);
    validate_with(&program, opts.allow_tiled)?;
    Ok(program)
}

/// Lifted lambdas capture whatever they reference; nested lambdas can make
/// this depend on each other, so iterate to a fixed point.
fn resolve_lambda_closures(program: &mut Program, lifted: &[Name]) {
    loop {
        let mut changed = false;
        for name in lifted {
            let f = program.get(name).expect("lifted lambda present");
            let fv: Vec<Name> = function_free_vars(program, f).into_iter().collect();
            if fv != f.closure {
                program.get_mut(name).expect("present").closure = fv;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(u64),
    Float(f64),
    Sym(&'static str),
    Eof,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    col: usize,
}

const SYMBOLS: &[&str] = &["(", ")", "{", "}", "[", "]", ",", ";", "=", "+", "-", "*", "/"];

fn lex(text: &str) -> Result<Vec<Token>, IrError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);
    while i < chars.len() {
        let c = chars[i];
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        if c == '#' || (c == '/' && chars.get(i + 1) == Some(&'/')) {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        let start_col = col;
        if c.is_ascii_alphabetic() || c == '_' || c == '$' {
            let s = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_' || chars[i] == '$') {
                i += 1;
            }
            let word: String = chars[s..i].iter().collect();
            col += i - s;
            out.push(Token {
                tok: Tok::Ident(word),
                line,
                col: start_col,
            });
            continue;
        }
        if c.is_ascii_digit() {
            let s = i;
            let mut is_float = false;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            if i < chars.len() && chars[i] == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit()) {
                is_float = true;
                i += 1;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    is_float = true;
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let lit: String = chars[s..i].iter().collect();
            col += i - s;
            let tok = if is_float {
                Tok::Float(lit.parse().map_err(|_| syntax(line, start_col, "bad float literal"))?)
            } else {
                Tok::Int(
                    lit.parse()
                        .map_err(|_| syntax(line, start_col, "integer literal too large"))?,
                )
            };
            out.push(Token {
                tok,
                line,
                col: start_col,
            });
            continue;
        }
        let sym = SYMBOLS.iter().find(|s| s.starts_with(c));
        match sym {
            Some(s) => {
                out.push(Token {
                    tok: Tok::Sym(s),
                    line,
                    col: start_col,
                });
                i += 1;
                col += 1;
            }
            None => return Err(syntax(line, col, format!("unexpected character `{c}`"))),
        }
    }
    out.push(Token {
        tok: Tok::Eof,
        line,
        col,
    });
    Ok(out)
}

fn syntax(line: usize, col: usize, msg: impl Into<String>) -> IrError {
    IrError::Syntax {
        line,
        col,
        msg: msg.into(),
    }
}

const KEYWORDS: &[&str] = &[
    "fn",
    "uses",
    "return",
    "if",
    "else",
    "for",
    "in",
    "map",
    "reduce",
    "scan",
    "allpairs",
    "min",
    "max",
    "inf",
    "nan",
    "NaN",
    "tiledmap",
    "tiledreduce",
    "tiledscan",
    "fixed",
];

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    opts: ParseOptions,
    program: Program,
    lifted: Vec<Name>,
    current_fn: Name,
    lambda_count: usize,
}

type PResult<T> = Result<T, IrError>;

impl Parser {
    fn peek(&self) -> &Tok {
        &self.tokens[self.pos].tok
    }

    fn peek_at(&self, off: usize) -> &Tok {
        let i = (self.pos + off).min(self.tokens.len() - 1);
        &self.tokens[i].tok
    }

    fn here(&self) -> (usize, usize) {
        let t = &self.tokens[self.pos];
        (t.line, t.col)
    }

    fn err<T>(&self, msg: impl Into<String>) -> PResult<T> {
        let (l, c) = self.here();
        Err(syntax(l, c, msg))
    }

    fn bump(&mut self) -> Tok {
        let t = self.tokens[self.pos].tok.clone();
        if self.pos < self.tokens.len() - 1 {
            self.pos += 1;
        }
        t
    }

    fn is_sym(&self, s: &str) -> bool {
        matches!(self.peek(), Tok::Sym(x) if *x == s)
    }

    fn is_word(&self, w: &str) -> bool {
        matches!(self.peek(), Tok::Ident(x) if x == w)
    }

    fn eat_sym(&mut self, s: &str) -> bool {
        if self.is_sym(s) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect_sym(&mut self, s: &str) -> PResult<()> {
        if self.eat_sym(s) {
            Ok(())
        } else {
            self.err(format!("expected `{s}`, found {}", describe(self.peek())))
        }
    }

    fn expect_word(&mut self, w: &str) -> PResult<()> {
        if self.is_word(w) {
            self.bump();
            Ok(())
        } else {
            self.err(format!("expected `{w}`, found {}", describe(self.peek())))
        }
    }

    fn ident(&mut self) -> PResult<Name> {
        match self.peek().clone() {
            Tok::Ident(w) if !KEYWORDS.contains(&w.as_str()) => {
                self.bump();
                Ok(w)
            }
            other => self.err(format!("expected identifier, found {}", describe(&other))),
        }
    }

    fn uint(&mut self) -> PResult<usize> {
        match self.peek().clone() {
            Tok::Int(v) => {
                self.bump();
                usize::try_from(v).or_else(|_| self.err("integer too large"))
            }
            other => self.err(format!("expected integer, found {}", describe(&other))),
        }
    }

    fn program(&mut self) -> PResult<()> {
        while !matches!(self.peek(), Tok::Eof) {
            let f = self.function()?;
            self.program.insert(f)?;
        }
        Ok(())
    }

    fn name_list(&mut self, close: &str) -> PResult<Vec<Name>> {
        let mut out = Vec::new();
        if self.eat_sym(close) {
            return Ok(out);
        }
        loop {
            out.push(self.ident()?);
            if self.eat_sym(close) {
                return Ok(out);
            }
            self.expect_sym(",")?;
        }
    }

    fn function(&mut self) -> PResult<Function> {
        self.expect_word("fn")?;
        let name = self.ident()?;
        self.current_fn = name.clone();
        self.lambda_count = 0;
        self.expect_sym("(")?;
        let params = self.name_list(")")?;
        let mut closure = Vec::new();
        if self.is_word("uses") {
            self.bump();
            closure.push(self.ident()?);
            while self.eat_sym(",") {
                closure.push(self.ident()?);
            }
        }
        let mut fixed_extent = None;
        if self.is_word("fixed") {
            if !self.opts.allow_tiled {
                return self.err("fixed-extent annotations are only accepted in the debug dialect");
            }
            self.bump();
            self.expect_sym("(")?;
            fixed_extent = Some(if self.is_word("slot") {
                self.bump();
                FixedExtent::Slot(self.uint()?)
            } else {
                FixedExtent::Const(self.uint()?)
            });
            self.expect_sym(")")?;
        }
        let body = self.braced_block()?;
        Ok(Function {
            name,
            params,
            closure,
            body,
            fixed_extent,
        })
    }

    fn braced_block(&mut self) -> PResult<Block> {
        self.expect_sym("{")?;
        let mut stmts = Vec::new();
        while !self.eat_sym("}") {
            if matches!(self.peek(), Tok::Eof) {
                return self.err("unexpected end of input, expected `}`");
            }
            stmts.push(self.statement()?);
        }
        Ok(stmts)
    }

    /// `;` terminates simple statements; it may be omitted before `}`.
    fn terminator(&mut self) -> PResult<()> {
        if self.eat_sym(";") || self.is_sym("}") {
            Ok(())
        } else {
            self.err(format!("expected `;`, found {}", describe(self.peek())))
        }
    }

    fn statement(&mut self) -> PResult<Stmt> {
        if self.is_word("return") {
            self.bump();
            let e = self.expr()?;
            self.terminator()?;
            return Ok(Stmt::Return(e));
        }
        if self.is_word("if") {
            self.bump();
            let cond = self.expr()?;
            let then_block = self.braced_block()?;
            self.expect_word("else")?;
            let else_block = self.braced_block()?;
            return Ok(Stmt::If {
                cond,
                then_block,
                else_block,
            });
        }
        if self.is_word("for") {
            self.bump();
            let var = self.ident()?;
            self.expect_word("in")?;
            let seq = self.expr()?;
            let body = self.braced_block()?;
            return Ok(Stmt::For { var, seq, body });
        }
        let target = self.ident()?;
        self.expect_sym("=")?;
        let e = self.expr()?;
        self.terminator()?;
        Ok(Stmt::Assign(target, e))
    }

    fn expr(&mut self) -> PResult<Expr> {
        let mut lhs = self.additive()?;
        loop {
            let op = if self.is_word("min") {
                BinOp::Min
            } else if self.is_word("max") {
                BinOp::Max
            } else {
                return Ok(lhs);
            };
            self.bump();
            let rhs = self.additive()?;
            lhs = Expr::binop(op, lhs, rhs);
        }
    }

    fn additive(&mut self) -> PResult<Expr> {
        let mut lhs = self.term()?;
        loop {
            let op = if self.is_sym("+") {
                BinOp::Add
            } else if self.is_sym("-") {
                BinOp::Sub
            } else {
                return Ok(lhs);
            };
            self.bump();
            let rhs = self.term()?;
            lhs = Expr::binop(op, lhs, rhs);
        }
    }

    fn term(&mut self) -> PResult<Expr> {
        let mut lhs = self.postfix()?;
        loop {
            let op = if self.is_sym("*") {
                BinOp::Mul
            } else if self.is_sym("/") {
                BinOp::Div
            } else {
                return Ok(lhs);
            };
            self.bump();
            let rhs = self.postfix()?;
            lhs = Expr::binop(op, lhs, rhs);
        }
    }

    fn postfix(&mut self) -> PResult<Expr> {
        let mut e = self.primary()?;
        while self.eat_sym("[") {
            let idx = self.expr()?;
            self.expect_sym("]")?;
            e = Expr::Index(Box::new(e), Box::new(idx));
        }
        Ok(e)
    }

    fn literal(&mut self, negative: bool) -> PResult<Expr> {
        let tok = self.bump();
        let s = match tok {
            Tok::Int(v) => {
                if negative {
                    if v > i64::MAX as u64 + 1 {
                        return self.err("integer literal too large");
                    }
                    Scalar::Int((v as i64).wrapping_neg())
                } else {
                    Scalar::Int(i64::try_from(v).or_else(|_| self.err("integer literal too large"))?)
                }
            }
            Tok::Float(v) => Scalar::Float(if negative { -v } else { v }),
            Tok::Ident(w) if w == "inf" => Scalar::Float(if negative { f64::NEG_INFINITY } else { f64::INFINITY }),
            Tok::Ident(w) if w == "nan" || w == "NaN" => Scalar::Float(f64::NAN),
            other => return self.err(format!("expected literal, found {}", describe(&other))),
        };
        Ok(Expr::Const(s))
    }

    fn primary(&mut self) -> PResult<Expr> {
        match self.peek().clone() {
            Tok::Int(_) | Tok::Float(_) => self.literal(false),
            Tok::Sym("-") => {
                self.bump();
                self.literal(true)
            }
            Tok::Sym("(") => {
                self.bump();
                let e = self.expr()?;
                self.expect_sym(")")?;
                Ok(e)
            }
            Tok::Sym("[") => {
                self.bump();
                let mut items = Vec::new();
                if !self.eat_sym("]") {
                    loop {
                        items.push(self.expr()?);
                        if self.eat_sym("]") {
                            break;
                        }
                        self.expect_sym(",")?;
                    }
                }
                Ok(Expr::ArrayLit(items))
            }
            Tok::Ident(w) => match w.as_str() {
                "inf" | "nan" | "NaN" => self.literal(false),
                "map" | "reduce" | "scan" => {
                    self.bump();
                    self.adverb(&w, None)
                }
                "tiledmap" | "tiledreduce" | "tiledscan" => {
                    if !self.opts.allow_tiled {
                        return self.err(format!("`{w}` is internal syntax and cannot appear in input programs"));
                    }
                    self.bump();
                    let info = self.tile_info()?;
                    self.adverb(&w["tiled".len()..], Some(info))
                }
                "allpairs" => {
                    self.bump();
                    self.allpairs()
                }
                _ => Ok(Expr::Var(self.ident()?)),
            },
            other => self.err(format!("expected expression, found {}", describe(&other))),
        }
    }

    fn tile_info(&mut self) -> PResult<TileInfo> {
        self.expect_sym("[")?;
        self.expect_word("slot")?;
        self.expect_sym("=")?;
        let slot = self.uint()?;
        self.expect_sym(",")?;
        self.expect_word("depth")?;
        self.expect_sym("=")?;
        let depth = self.uint()?;
        let mut fixed_fn = None;
        if self.eat_sym(",") {
            self.expect_word("fk")?;
            self.expect_sym("=")?;
            fixed_fn = Some(self.ident()?);
        }
        self.expect_sym("]")?;
        Ok(TileInfo { slot, depth, fixed_fn })
    }

    /// A function reference: a name, or an inline `fn(params) { ... }` which is
    /// lifted into the function table.
    fn fn_ref(&mut self) -> PResult<Name> {
        if self.is_word("fn") && matches!(self.peek_at(1), Tok::Sym("(")) {
            self.bump();
            self.expect_sym("(")?;
            let params = self.name_list(")")?;
            let body = self.braced_block()?;
            let mut name;
            loop {
                name = format!("{}$lam{}", self.current_fn, self.lambda_count);
                self.lambda_count += 1;
                if !self.program.contains(&name) && !self.lifted.contains(&name) {
                    break;
                }
            }
            self.program.upsert(Function::new(name.clone(), params, vec![], body));
            self.lifted.push(name.clone());
            return Ok(name);
        }
        self.ident()
    }

    fn keyword_arg(&mut self, key: &str) -> PResult<()> {
        self.expect_word(key)?;
        self.expect_sym("=")
    }

    fn axes(&mut self, n_args: usize) -> PResult<Vec<usize>> {
        if !self.eat_sym(";") {
            return Ok(vec![0; n_args]);
        }
        self.keyword_arg("axes")?;
        self.expect_sym("[")?;
        let mut axes = Vec::new();
        if !self.eat_sym("]") {
            loop {
                axes.push(self.uint()?);
                if self.eat_sym("]") {
                    break;
                }
                self.expect_sym(",")?;
            }
        }
        Ok(axes)
    }

    fn adverb(&mut self, kind: &str, tile: Option<TileInfo>) -> PResult<Expr> {
        self.expect_sym("(")?;
        let func = self.fn_ref()?;
        let op = match kind {
            "map" => AdverbOp::Map,
            "reduce" => {
                self.expect_sym(",")?;
                self.keyword_arg("combine")?;
                let combine = self.fn_ref()?;
                self.expect_sym(",")?;
                self.keyword_arg("init")?;
                let init = self.expr()?;
                AdverbOp::Reduce { combine, init }
            }
            _ => {
                self.expect_sym(",")?;
                self.keyword_arg("combine")?;
                let combine = self.fn_ref()?;
                self.expect_sym(",")?;
                let mut emit = None;
                if self.is_word("emit") {
                    self.keyword_arg("emit")?;
                    emit = Some(self.fn_ref()?);
                    self.expect_sym(",")?;
                }
                self.keyword_arg("init")?;
                let init = self.expr()?;
                AdverbOp::Scan { combine, emit, init }
            }
        };
        let mut args = Vec::new();
        while self.eat_sym(",") {
            args.push(self.expr()?);
        }
        let axes = self.axes(args.len())?;
        self.expect_sym(")")?;
        Ok(Expr::Adverb(Box::new(Adverb {
            op,
            func,
            args,
            axes,
            tile,
        })))
    }

    fn allpairs(&mut self) -> PResult<Expr> {
        self.expect_sym("(")?;
        let func = self.fn_ref()?;
        self.expect_sym(",")?;
        let left = self.expr()?;
        self.expect_sym(",")?;
        let right = self.expr()?;
        let axes = self.axes(2)?;
        self.expect_sym(")")?;
        if axes.len() != 2 {
            return self.err(format!("allpairs takes exactly two axes, got {}", axes.len()));
        }
        Ok(Expr::AllPairs(Box::new(AllPairs {
            func,
            left,
            right,
            axes: [axes[0], axes[1]],
        })))
    }
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Ident(w) => format!("`{w}`"),
        Tok::Int(v) => format!("`{v}`"),
        Tok::Float(v) => format!("`{v}`"),
        Tok::Sym(s) => format!("`{s}`"),
        Tok::Eof => "end of input".to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{AdverbKind, Invariant};

    pub(crate) const SUM_ROWS: &str = "
        fn add2(a, b) { return a + b; }
        fn sum_row(row) {
            return reduce(fn(x) { return x; }, combine=add2, init=0, row; axes=[0]);
        }
        fn main(Xs) { return map(sum_row, Xs; axes=[0]); }
    ";

    #[test]
    fn parses_listing_one() {
        let p = parse_program(SUM_ROWS).unwrap();
        let main = p.get("main").unwrap();
        let Stmt::Return(Expr::Adverb(m)) = &main.body[0] else {
            panic!("expected map")
        };
        assert_eq!(m.kind(), AdverbKind::Map);
        assert_eq!(m.axes, vec![0]);
        let inner = p.get(&m.func).unwrap();
        let Stmt::Return(Expr::Adverb(r)) = &inner.body[0] else {
            panic!("expected reduce")
        };
        assert_eq!(r.kind(), AdverbKind::Reduce);
        assert_eq!(r.axes, vec![0]);
        assert_eq!(r.op.init(), Some(&Expr::int(0)));
        let lam = p.get(&r.func).unwrap();
        assert_eq!(lam.name, "sum_row$lam0");
        assert!(lam.closure.is_empty());
    }

    #[test]
    fn identity_without_semicolon() {
        let p = parse_program("fn id(x){ return x }").unwrap();
        assert_eq!(p.len(), 1);
        assert!(p.get("id").unwrap().closure.is_empty());
    }

    #[test]
    fn rejects_tiled_nodes_in_input() {
        let err =
            parse_program("fn f(x) { return x; } fn main(a) { return tiledmap[slot=0, depth=0](f, a; axes=[0]); }")
                .unwrap_err();
        assert!(matches!(err, IrError::Syntax { .. }), "{err}");
        let ok = parse_program_with(
            "fn f(x) { return x; } fn main(a) { return tiledmap[slot=0, depth=0](f, a; axes=[0]); }",
            ParseOptions { allow_tiled: true },
        );
        assert!(ok.is_ok());
    }

    #[test]
    fn syntax_errors_carry_position() {
        let err = parse_program("fn main(a) {\n  return a +;\n}").unwrap_err();
        assert_eq!(
            err,
            IrError::Syntax {
                line: 2,
                col: 13,
                msg: "expected expression, found `;`".into()
            }
        );
    }

    #[test]
    fn validation_errors_name_the_invariant() {
        let err = parse_program("fn main(a) { return map(g, a; axes=[0]); }").unwrap_err();
        assert!(matches!(
            err,
            IrError::Validation {
                invariant: Invariant::KnownFunction,
                ..
            }
        ));
        let err = parse_program("fn g(x) { return x; } fn main(a, b) { return map(g, a, b; axes=[0]); }").unwrap_err();
        assert!(matches!(
            err,
            IrError::Validation {
                invariant: Invariant::AxesMatchArgs,
                ..
            }
        ));
    }

    #[test]
    fn literals_and_precedence() {
        let p = parse_program("fn main(a) { return a + 2 * -3 max 1.5e1; }").unwrap();
        let Stmt::Return(e) = &p.get("main").unwrap().body[0] else {
            panic!()
        };
        let expected = Expr::binop(
            BinOp::Max,
            Expr::binop(
                BinOp::Add,
                Expr::var("a"),
                Expr::binop(BinOp::Mul, Expr::int(2), Expr::int(-3)),
            ),
            Expr::float(15.0),
        );
        assert_eq!(e, &expected);
    }
}
