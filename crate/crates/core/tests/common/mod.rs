//! Random program generator and helpers shared by integration tests.
#![allow(dead_code)]

use dptile::ir::{parse_program, Program};
use dptile::ndarray::{Layout, NdArray, Scalar};
use dptile::semantics::{eval_program, EvalConfig, EvalStats, Value};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const MIN_I64: &str = "-9223372036854775808";

#[derive(Debug, Clone, PartialEq)]
pub enum Ty {
    Scalar,
    Array(Vec<usize>),
}

impl Ty {
    fn slice(&self, axis: usize) -> Ty {
        match self {
            Ty::Array(s) if s.len() == 1 => Ty::Scalar,
            Ty::Array(s) => {
                let mut s = s.clone();
                s.remove(axis);
                Ty::Array(s)
            }
            Ty::Scalar => unreachable!("slicing a scalar"),
        }
    }

    fn prepend(&self, n: usize) -> Ty {
        match self {
            Ty::Scalar => Ty::Array(vec![n]),
            Ty::Array(s) => {
                let mut v = vec![n];
                v.extend(s);
                Ty::Array(v)
            }
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            Ty::Scalar => &[],
            Ty::Array(s) => s,
        }
    }
}

#[derive(Debug, Clone)]
struct Var {
    name: String,
    ty: Ty,
}

/// A generated program plus the inputs of its entry function.
#[derive(Debug, Clone)]
pub struct Case {
    pub seed: u64,
    pub source: String,
    pub program: Program,
    pub inputs: Vec<Value>,
}

/// Generates closed, control-flow-free int64 programs whose adverb nests are
/// at most `max_depth` deep over extents in `1..=max_extent`.
pub struct ProgramGen {
    rng: ChaCha8Rng,
    fns: Vec<String>,
    next: usize,
    max_depth: usize,
    max_extent: usize,
}

impl ProgramGen {
    pub fn new(seed: u64, max_depth: usize, max_extent: usize) -> Self {
        ProgramGen {
            rng: ChaCha8Rng::seed_from_u64(seed),
            fns: Vec::new(),
            next: 0,
            max_depth,
            max_extent,
        }
    }

    fn fresh(&mut self, prefix: &str) -> String {
        self.next += 1;
        format!("{prefix}{}", self.next)
    }

    pub fn case(seed: u64) -> Case {
        let mut g = ProgramGen::new(seed, 3, 7);
        let (source, shapes) = g.program();
        let program =
            parse_program(&source).unwrap_or_else(|e| panic!("generated program does not parse: {e}\n{source}"));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        let mut inputs: Vec<Value> = shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let data: Vec<i64> = (0..n).map(|_| rng.random_range(-9..=9)).collect();
                Value::Array(NdArray::from_i64(s.clone(), data, Layout::RowMajor).expect("shape"))
            })
            .collect();
        inputs.push(Value::int(rng.random_range(-5..=5)));
        Case {
            seed,
            source,
            program,
            inputs,
        }
    }

    /// Returns program text and the array input shapes (a trailing scalar input follows them).
    fn program(&mut self) -> (String, Vec<Vec<usize>>) {
        let dims: Vec<usize> = (0..3).map(|_| self.rng.random_range(1..=self.max_extent)).collect();
        let n_arrays = self.rng.random_range(1..=3);
        let mut params = Vec::new();
        let mut shapes = Vec::new();
        for i in 0..n_arrays {
            let rank = [1, 2, 2, 3, 3][self.rng.random_range(0..5)];
            let shape: Vec<usize> = (0..rank).map(|_| dims[self.rng.random_range(0..dims.len())]).collect();
            params.push(Var {
                name: format!("A{i}"),
                ty: Ty::Array(shape.clone()),
            });
            shapes.push(shape);
        }
        params.push(Var {
            name: "s".into(),
            ty: Ty::Scalar,
        });
        let mut body = String::new();
        let mut scope = params.clone();
        let (ret, _) = self.body(&mut scope, &mut body, self.max_depth, true);
        let names: Vec<String> = params.iter().map(|v| v.name.clone()).collect();
        let main = format!("fn main({}) {{\n{body}    return {ret};\n}}\n", names.join(", "));
        let mut src = String::from(
            "fn add2(a, b) { return a + b; }\nfn max2(a, b) { return a max b; }\nfn dbl(a) { return a * 2; }\n",
        );
        for f in &self.fns {
            src.push_str(f);
        }
        src.push_str(&main);
        (src, shapes)
    }

    /// Emits a few statements into `out` and returns the expression to return.
    fn body(&mut self, scope: &mut Vec<Var>, out: &mut String, depth_left: usize, want_adverb: bool) -> (String, Ty) {
        let n_stmts = self.rng.random_range(0..=3);
        for _ in 0..n_stmts {
            let adverb = depth_left > 0 && self.has_arrays(scope) && self.rng.random_bool(0.3);
            let (e, ty) = if adverb {
                self.adverb(scope, depth_left)
            } else {
                self.value_expr(scope)
            };
            let name = self.fresh("t");
            out.push_str(&format!("    {name} = {e};\n"));
            scope.push(Var { name, ty });
        }
        if depth_left > 0 && self.has_arrays(scope) && (want_adverb || self.rng.random_bool(0.85)) {
            self.adverb(scope, depth_left)
        } else {
            self.value_expr(scope)
        }
    }

    fn has_arrays(&self, scope: &[Var]) -> bool {
        scope.iter().any(|v| matches!(v.ty, Ty::Array(_)))
    }

    fn pick<'a>(&mut self, vars: &[&'a Var]) -> &'a Var {
        vars[self.rng.random_range(0..vars.len())]
    }

    fn scalar_expr(&mut self, scope: &[Var]) -> String {
        let scalars: Vec<&Var> = scope.iter().filter(|v| v.ty == Ty::Scalar).collect();
        let vectors: Vec<&Var> = scope
            .iter()
            .filter(|v| matches!(&v.ty, Ty::Array(s) if s.len() == 1 && s[0] > 0))
            .collect();
        let atom = |g: &mut Self| -> String {
            let r = g.rng.random_range(0..10);
            if r < 5 && !scalars.is_empty() {
                g.pick(&scalars).name.clone()
            } else if r < 7 && !vectors.is_empty() {
                let v = g.pick(&vectors);
                let n = v.ty.shape()[0];
                format!("{}[{}]", v.name, g.rng.random_range(0..n))
            } else {
                g.rng.random_range(-4..=4).to_string()
            }
        };
        let a = atom(self);
        if self.rng.random_bool(0.6) {
            let b = atom(self);
            let op = ["+", "-", "*", "max", "min"][self.rng.random_range(0..5)];
            format!("({a}) {op} ({b})")
        } else {
            a
        }
    }

    /// A non-adverb expression: a scalar, or an array combined elementwise with a scalar.
    fn value_expr(&mut self, scope: &[Var]) -> (String, Ty) {
        let arrays: Vec<&Var> = scope.iter().filter(|v| matches!(v.ty, Ty::Array(_))).collect();
        if !arrays.is_empty() && self.rng.random_bool(0.3) {
            let v = self.pick(&arrays);
            let s = self.scalar_expr(scope);
            let op = ["+", "*", "max"][self.rng.random_range(0..3)];
            (format!("{} {op} ({s})", v.name), v.ty.clone())
        } else {
            (self.scalar_expr(scope), Ty::Scalar)
        }
    }

    fn adverb(&mut self, scope: &[Var], depth_left: usize) -> (String, Ty) {
        let arrays: Vec<&Var> = scope
            .iter()
            .filter(|v| matches!(&v.ty, Ty::Array(s) if !s.is_empty()))
            .collect();
        // Prefer slicing the enclosing function's parameters so nests are genuine.
        let own: Vec<&Var> = arrays.iter().copied().filter(|v| v.name.starts_with('p')).collect();
        let first = if !own.is_empty() && self.rng.random_bool(0.7) {
            self.pick(&own).clone()
        } else {
            self.pick(&arrays).clone()
        };
        let axis = self.rng.random_range(0..first.ty.shape().len());
        let n = first.ty.shape()[axis];
        let mut args = vec![(first.clone(), axis)];
        if self.rng.random_bool(0.35) {
            let partners: Vec<(Var, usize)> = arrays
                .iter()
                .flat_map(|v| {
                    v.ty.shape()
                        .iter()
                        .enumerate()
                        .filter(|(_, &e)| e == n)
                        .map(|(ax, _)| ((*v).clone(), ax))
                        .collect::<Vec<_>>()
                })
                .collect();
            if !partners.is_empty() {
                let p = partners[self.rng.random_range(0..partners.len())].clone();
                args.push(p);
            }
        }

        let fname = self.fresh("f");
        let params: Vec<Var> = args
            .iter()
            .enumerate()
            .map(|(i, (v, ax))| Var {
                name: format!("p{}_{i}", self.next),
                ty: v.ty.slice(*ax),
            })
            .collect();
        let mut closure: Vec<Var> = scope.iter().filter(|_| self.rng.random_bool(0.5)).cloned().collect();
        closure.retain(|c| !params.iter().any(|p| p.name == c.name));
        let mut inner_scope: Vec<Var> = params.iter().cloned().chain(closure.iter().cloned()).collect();
        let mut body = String::new();
        let (ret, ret_ty) = self.body(&mut inner_scope, &mut body, depth_left - 1, false);
        let uses = if closure.is_empty() {
            String::new()
        } else {
            format!(
                " uses {}",
                closure.iter().map(|c| c.name.clone()).collect::<Vec<_>>().join(", ")
            )
        };
        let pnames: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
        self.fns.push(format!(
            "fn {fname}({}){uses} {{\n{body}    return {ret};\n}}\n",
            pnames.join(", ")
        ));

        let arg_list: Vec<String> = args.iter().map(|(v, _)| v.name.clone()).collect();
        let axes: Vec<String> = args.iter().map(|(_, a)| a.to_string()).collect();
        let (combine, init) = if self.rng.random_bool(0.5) {
            ("add2", "0".to_string())
        } else {
            ("max2", MIN_I64.to_string())
        };
        let tail = format!("{}; axes=[{}])", arg_list.join(", "), axes.join(", "));
        match self.rng.random_range(0..4) {
            0 | 3 => (format!("map({fname}, {tail}"), ret_ty.prepend(n)),
            1 => (
                format!("reduce({fname}, combine={combine}, init={init}, {tail}"),
                ret_ty,
            ),
            _ => {
                let emit = if self.rng.random_bool(0.3) { ", emit=dbl" } else { "" };
                (
                    format!("scan({fname}, combine={combine}{emit}, init={init}, {tail}"),
                    ret_ty.prepend(n),
                )
            }
        }
    }
}

/// Untiled reference result.
pub fn eval_untiled(p: &Program, inputs: &[Value]) -> Value {
    eval_program(p, inputs.to_vec(), EvalConfig::default())
        .unwrap_or_else(|e| panic!("untiled evaluation failed: {e}"))
        .0
}

pub fn eval_tiled(p: &Program, inputs: &[Value], sizes: &[usize]) -> Result<(Value, EvalStats), String> {
    eval_program(p, inputs.to_vec(), EvalConfig::with_tile_sizes(sizes.to_vec())).map_err(|e| e.to_string())
}

/// Logical shape and elements, ignoring layout and scalar/rank-0 representation.
pub fn flat(v: &Value) -> (Vec<usize>, Vec<Scalar>) {
    let a = v.to_array();
    (a.shape().to_vec(), a.to_scalars())
}
