//! Shared test support: small types, a random well-typed program generator
//! and a brute-force reference evaluator that shares no code with the
//! array evaluator.

#![allow(dead_code)]

use std::collections::HashMap;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::Rng;
use skn_core::typecheck::{apply_subst, Subst};
use skn_core::{check_program, render_program, Goal, Program, RelTable, RelationDef, SemiringSpec, Type, Value, Weight};

pub fn b2() -> Type {
    Type::sum(Type::Unit, Type::Unit)
}

/// Right-nested sum of `n` Units.
pub fn canon(n: usize) -> Type {
    assert!(n >= 1);
    if n == 1 {
        Type::Unit
    } else {
        Type::sum(Type::Unit, canon(n - 1))
    }
}

/// A three-valued type that is not the canonical one.
pub fn skewed3() -> Type {
    Type::sum(b2(), Type::Unit)
}

/// Concrete stand-ins for a type variable, sizes 1 to 3, including
/// non-canonical shapes.
pub fn tyvar_choices() -> Vec<Type> {
    vec![Type::Unit, Type::prod(Type::Unit, Type::Unit), b2(), canon(3), skewed3()]
}

pub fn load_corpus(name: &str) -> Program {
    let path = format!("{}/../../corpus/{name}.skn", env!("CARGO_MANIFEST_DIR"));
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"));
    skn_core::load_program(&text).unwrap_or_else(|e| panic!("{path}: {e}"))
}

pub fn corpus_names() -> Vec<String> {
    let dir = format!("{}/../../corpus", env!("CARGO_MANIFEST_DIR"));
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| {
            let name = e.ok()?.file_name().into_string().ok()?;
            Some(name.strip_suffix(".skn")?.to_string())
        })
        .collect();
    names.sort();
    names
}

// ---------------------------------------------------------------------------
// Reference evaluator

/// Every value of a concrete type: lefts before rights, pairs row-major.
pub fn values_of(t: &Type) -> Vec<Value> {
    match t {
        Type::Unit => vec![Value::Sole],
        Type::Sum(a, b) => values_of(a)
            .into_iter()
            .map(|v| Value::Left(None, Box::new(v)))
            .chain(values_of(b).into_iter().map(|v| Value::Right(None, Box::new(v))))
            .collect(),
        Type::Prod(a, b) => {
            let right = values_of(b);
            let mut out = Vec::new();
            for x in values_of(a) {
                for y in &right {
                    out.push(Value::Pair(Box::new(x.clone()), Box::new(y.clone())));
                }
            }
            out
        }
        Type::Var(a) => panic!("type variable {a} has no values"),
    }
}

/// Every tuple of values for the given types, row-major.
pub fn tuples_of(types: &[Type]) -> Vec<Vec<Value>> {
    let mut out = vec![Vec::new()];
    for t in types {
        let vals = values_of(t);
        out = out
            .into_iter()
            .flat_map(|prefix| {
                vals.iter().map(move |v| {
                    let mut row = prefix.clone();
                    row.push(v.clone());
                    row
                })
            })
            .collect();
    }
    out
}

pub fn ground(v: &Value, env: &HashMap<String, Value>) -> Value {
    match v {
        Value::Sole => Value::Sole,
        Value::Left(_, x) => Value::Left(None, Box::new(ground(x, env))),
        Value::Right(_, x) => Value::Right(None, Box::new(ground(x, env))),
        Value::Pair(a, b) => Value::Pair(Box::new(ground(a, env)), Box::new(ground(b, env))),
        Value::Var(x) => env.get(x).unwrap_or_else(|| panic!("unbound {x}")).clone(),
    }
}

pub type RefTables = HashMap<String, HashMap<Vec<Value>, Weight>>;

/// Weight of `g` under `env`, summing over every value of each fresh
/// variable.
pub fn ref_goal(g: &Goal, env: &mut HashMap<String, Value>, tables: &RefTables, sr: &SemiringSpec) -> Weight {
    match g {
        Goal::Conj(a, b) => {
            let wa = ref_goal(a, env, tables, sr);
            let wb = ref_goal(b, env, tables, sr);
            sr.mul(wa, wb)
        }
        Goal::Disj(a, b) => {
            let wa = ref_goal(a, env, tables, sr);
            let wb = ref_goal(b, env, tables, sr);
            sr.add(wa, wb)
        }
        Goal::Fresh { var, ty, body } => {
            let saved = env.remove(var);
            let mut total = sr.zero;
            for v in values_of(ty) {
                env.insert(var.clone(), v);
                let w = ref_goal(body, env, tables, sr);
                total = sr.add(total, w);
            }
            env.remove(var);
            if let Some(s) = saved {
                env.insert(var.clone(), s);
            }
            total
        }
        Goal::Unify(a, b) => {
            if ground(a, env) == ground(b, env) {
                sr.one
            } else {
                sr.zero
            }
        }
        Goal::Disunify(a, b) => {
            if ground(a, env) != ground(b, env) {
                sr.one
            } else {
                sr.zero
            }
        }
        Goal::Call(c) => {
            let args: Vec<Value> = c.args.iter().map(|v| ground(v, env)).collect();
            tables
                .get(&c.rel)
                .and_then(|t| t.get(&args))
                .copied()
                .unwrap_or(sr.zero)
        }
        Goal::Factor(lit) => sr.parse_weight(lit).expect("weight literal"),
    }
}

/// One round of naive evaluation of every relation.
pub fn ref_step(p: &Program, prev: &RefTables, sr: &SemiringSpec) -> RefTables {
    let mut next = RefTables::new();
    for r in &p.relations {
        let mut table = HashMap::new();
        for row in tuples_of(&r.param_types()) {
            let mut env: HashMap<String, Value> =
                r.params.iter().map(|(x, _)| x.clone()).zip(row.iter().cloned()).collect();
            table.insert(row, ref_goal(&r.body, &mut env, prev, sr));
        }
        next.insert(r.name.clone(), table);
    }
    next
}

fn ref_equal(a: &RefTables, b: &RefTables, sr: &SemiringSpec) -> bool {
    b.iter().all(|(rel, tb)| {
        tb.iter().all(|(k, wb)| {
            let wa = a.get(rel).and_then(|t| t.get(k)).copied().unwrap_or(sr.zero);
            sr.approx_eq(wa, *wb)
        })
    })
}

/// Least fixpoint by naive iteration from all-zero tables; `None` when it
/// does not settle within `max_iters` rounds.
pub fn reference_fixpoint(p: &Program, sr: &SemiringSpec, max_iters: usize) -> Option<(RefTables, usize)> {
    let mut cur = RefTables::new();
    for round in 1..=max_iters {
        let next = ref_step(p, &cur, sr);
        let done = ref_equal(&cur, &next, sr);
        cur = next;
        if done {
            return Some((cur, round));
        }
    }
    None
}

/// Cell-by-cell comparison of an array table against a reference table.
pub fn compare_table(t: &RelTable, reference: &HashMap<Vec<Value>, Weight>, sr: &SemiringSpec) -> Result<(), String> {
    if t.cells.len() != reference.len() {
        return Err(format!("{}: {} cells vs {} reference cells", t.rel, t.cells.len(), reference.len()));
    }
    for (vals, w) in t.rows() {
        let key: Vec<Value> = vals.iter().map(Value::strip_annotations).collect();
        let want = reference
            .get(&key)
            .ok_or_else(|| format!("{}: reference has no cell {key:?}", t.rel))?;
        if !sr.approx_eq(w, *want) {
            return Err(format!("{} at {key:?}: array {w}, reference {want}", t.rel));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Random programs

#[derive(Clone, Debug)]
struct Sig {
    name: String,
    tyvars: Vec<String>,
    params: Vec<Type>,
}

/// Which goal forms the generator may emit.
#[derive(Clone, Copy, Debug)]
pub struct GenOptions {
    pub factors: bool,
    pub calls: bool,
    pub max_depth: usize,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions {
            factors: true,
            calls: true,
            max_depth: 5,
        }
    }
}

struct GoalGen<'a> {
    rng: &'a mut StdRng,
    opts: GenOptions,
    sigs: &'a [Sig],
    callable: Vec<usize>,
    me: usize,
    tyvars: Vec<String>,
    counter: usize,
}

impl GoalGen<'_> {
    fn fresh_name(&mut self) -> String {
        self.counter += 1;
        format!("v{}", self.counter)
    }

    /// A type for a fresh binder: small, and over the relation's own type
    /// variables when it has any.
    fn binder_type(&mut self) -> Type {
        if !self.tyvars.is_empty() && self.rng.gen_bool(0.4) {
            let a = Type::var(self.tyvars.choose(self.rng).unwrap().clone());
            return match self.rng.gen_range(0..4) {
                0 => Type::sum(a, Type::Unit),
                1 => Type::prod(a, Type::Unit),
                _ => a,
            };
        }
        let mut choices = tyvar_choices();
        choices.push(Type::sum(Type::Unit, b2()));
        choices.choose(self.rng).unwrap().clone()
    }

    fn value(&mut self, t: &Type, env: &[(String, Type)], pending: &mut Vec<(String, Type)>) -> Value {
        let same: Vec<String> = env
            .iter()
            .chain(pending.iter())
            .filter(|(_, u)| u == t)
            .map(|(x, _)| x.clone())
            .collect();
        let reuse = match t {
            Type::Var(_) => 0.8,
            _ => 0.4,
        };
        if !same.is_empty() && self.rng.gen_bool(reuse) {
            return Value::var(same.choose(self.rng).unwrap().clone());
        }
        match t {
            Type::Var(_) => {
                let x = self.fresh_name();
                pending.push((x.clone(), t.clone()));
                Value::var(x)
            }
            Type::Unit => Value::Sole,
            Type::Sum(l, r) => {
                if self.rng.gen_bool(0.5) {
                    Value::Left(Some(t.clone()), Box::new(self.value(l, env, pending)))
                } else {
                    Value::Right(Some(t.clone()), Box::new(self.value(r, env, pending)))
                }
            }
            Type::Prod(l, r) => {
                let a = self.value(l, env, pending);
                let b = self.value(r, env, pending);
                Value::pair(a, b)
            }
        }
    }

    /// A variable of type `t`, reused from scope or made fresh.
    fn var_of(&mut self, t: &Type, env: &[(String, Type)], pending: &mut Vec<(String, Type)>) -> Value {
        let same: Vec<String> = env
            .iter()
            .chain(pending.iter())
            .filter(|(_, u)| u == t)
            .map(|(x, _)| x.clone())
            .collect();
        if !same.is_empty() && self.rng.gen_bool(0.7) {
            return Value::var(same.choose(self.rng).unwrap().clone());
        }
        let x = self.fresh_name();
        pending.push((x.clone(), t.clone()));
        Value::var(x)
    }

    /// An argument for a parameter of generic type `t`, with a variable at
    /// every type-variable position.
    fn call_value(
        &mut self,
        t: &Type,
        sigma: &Subst,
        env: &[(String, Type)],
        pending: &mut Vec<(String, Type)>,
    ) -> Value {
        match t {
            Type::Var(a) => self.var_of(&sigma[a], env, pending),
            Type::Unit => Value::Sole,
            Type::Sum(l, r) => {
                let whole = apply_subst(t, sigma);
                if self.rng.gen_bool(0.5) {
                    Value::Left(Some(whole), Box::new(self.call_value(l, sigma, env, pending)))
                } else {
                    Value::Right(Some(whole), Box::new(self.call_value(r, sigma, env, pending)))
                }
            }
            Type::Prod(l, r) => {
                let a = self.call_value(l, sigma, env, pending);
                let b = self.call_value(r, sigma, env, pending);
                Value::pair(a, b)
            }
        }
    }

    fn call(&mut self, callee: usize, env: &[(String, Type)], pending: &mut Vec<(String, Type)>) -> Goal {
        let sig = &self.sigs[callee];
        let mut sigma = Subst::new();
        for a in &sig.tyvars {
            let image = if callee == self.me {
                Type::var(a.clone())
            } else if !self.tyvars.is_empty() && self.rng.gen_bool(0.6) {
                Type::var(self.tyvars.choose(self.rng).unwrap().clone())
            } else if self.rng.gen_bool(0.5) {
                [canon(3), skewed3()].choose(self.rng).unwrap().clone()
            } else {
                tyvar_choices().choose(self.rng).unwrap().clone()
            };
            sigma.insert(a.clone(), image);
        }
        let name = sig.name.clone();
        let params = sig.params.clone();
        let args = params
            .iter()
            .map(|t| {
                if self.rng.gen_bool(0.8) {
                    self.call_value(t, &sigma, env, pending)
                } else {
                    self.value(&apply_subst(t, &sigma), env, pending)
                }
            })
            .collect();
        Goal::call(name, args)
    }

    fn atom(&mut self, env: &[(String, Type)]) -> Goal {
        let mut pending = Vec::new();
        let mut kinds = vec![0, 0, 1];
        if self.opts.factors {
            kinds.push(2);
        }
        if self.opts.calls && !self.callable.is_empty() {
            kinds.extend([3, 3]);
        }
        let g = match *kinds.choose(self.rng).unwrap() {
            k @ (0 | 1) => {
                let t = if !env.is_empty() && self.rng.gen_bool(0.8) {
                    env.choose(self.rng).unwrap().1.clone()
                } else {
                    self.binder_type()
                };
                let a = self.value(&t, env, &mut pending);
                let b = self.value(&t, env, &mut pending);
                if k == 0 {
                    Goal::Unify(a, b)
                } else {
                    Goal::Disunify(a, b)
                }
            }
            2 => Goal::Factor(["0", "1"].choose(self.rng).unwrap().to_string()),
            _ => {
                let callee = *self.callable.choose(self.rng).unwrap();
                self.call(callee, env, &mut pending)
            }
        };
        Goal::fresh_all(pending, g)
    }

    fn goal(&mut self, env: &mut Vec<(String, Type)>, depth: usize) -> Goal {
        if depth <= 1 {
            return self.atom(env);
        }
        match self.rng.gen_range(0..7) {
            0 | 1 => {
                let a = self.goal(env, depth - 1);
                let b = self.goal(env, depth - 1);
                Goal::conj(a, b)
            }
            2 | 3 => {
                let a = self.goal(env, depth - 1);
                let b = self.goal(env, depth - 1);
                Goal::disj(a, b)
            }
            4 | 5 => {
                let x = self.fresh_name();
                let t = self.binder_type();
                env.push((x.clone(), t.clone()));
                let body = self.goal(env, depth - 1);
                env.pop();
                Goal::fresh(x, t, body)
            }
            _ => self.atom(env),
        }
    }
}

fn poly_param_type(rng: &mut StdRng, tyvars: &[String]) -> Type {
    let a = Type::var(tyvars.choose(rng).unwrap().clone());
    match rng.gen_range(0..6) {
        0 => Type::sum(a, Type::Unit),
        1 => Type::sum(Type::Unit, a),
        2 if tyvars.len() > 1 => Type::sum(Type::var(tyvars[0].clone()), Type::var(tyvars[1].clone())),
        3 => Type::prod(a.clone(), a),
        _ => a,
    }
}

fn mono_param_type(rng: &mut StdRng) -> Type {
    let choices = [
        Type::Unit,
        b2(),
        canon(3),
        skewed3(),
        canon(4),
        Type::prod(b2(), b2()),
        Type::sum(b2(), b2()),
    ];
    choices.choose(rng).unwrap().clone()
}

/// A random well-typed program: one or two polymorphic relations followed
/// by a monomorphic `root` that calls them at concrete types of size at
/// most 3. Polymorphic relations may call earlier ones and recurse on
/// themselves at their own types; `root` may call anything.
pub fn random_program(rng: &mut StdRng, opts: GenOptions) -> Program {
    let npoly = rng.gen_range(1..=2);
    let mut sigs = Vec::new();
    for i in 0..npoly {
        let tyvars: Vec<String> = if rng.gen_bool(0.5) {
            vec!["a".into()]
        } else {
            vec!["a".into(), "b".into()]
        };
        let mut params: Vec<Type> = (0..rng.gen_range(1..=2)).map(|_| poly_param_type(rng, &tyvars)).collect();
        for a in &tyvars {
            if !params.iter().any(|t| t.mentions(a)) {
                params.push(Type::var(a.clone()));
            }
        }
        sigs.push(Sig {
            name: format!("p{i}"),
            tyvars,
            params,
        });
    }
    sigs.push(Sig {
        name: "root".into(),
        tyvars: vec![],
        params: (0..rng.gen_range(1..=2)).map(|_| mono_param_type(rng)).collect(),
    });

    let mut relations = Vec::new();
    for (i, sig) in sigs.iter().enumerate() {
        let params: Vec<(String, Type)> = sig
            .params
            .iter()
            .enumerate()
            .map(|(k, t)| (format!("x{k}"), t.clone()))
            .collect();
        let depth = rng.gen_range(1..=opts.max_depth);
        let mut gen = GoalGen {
            rng: &mut *rng,
            opts,
            sigs: &sigs,
            callable: (0..=i).collect(),
            me: i,
            tyvars: sig.tyvars.clone(),
            counter: 0,
        };
        let mut env = params.clone();
        let mut body = gen.goal(&mut env, depth);
        if sig.tyvars.is_empty() {
            let mut pending = Vec::new();
            let callee = gen.rng.gen_range(0..npoly);
            let call = gen.call(callee, &env, &mut pending);
            let call = Goal::fresh_all(pending, call);
            body = if gen.rng.gen_bool(0.5) {
                Goal::disj(call, body)
            } else {
                Goal::conj(call, body)
            };
        }
        relations.push(RelationDef {
            name: sig.name.clone(),
            tyvars: sig.tyvars.clone(),
            params,
            body,
        });
    }
    let p = Program { relations };
    check_program(&p).unwrap_or_else(|e| panic!("generated an ill-typed program ({e}):\n{}", render_program(&p)))
}

/// A single monomorphic relation whose body has no factors and no calls.
pub fn random_plain_relation(rng: &mut StdRng) -> Program {
    let sig = Sig {
        name: "g".into(),
        tyvars: vec![],
        params: (0..rng.gen_range(1..=2)).map(|_| mono_param_type(rng)).collect(),
    };
    let params: Vec<(String, Type)> = sig
        .params
        .iter()
        .enumerate()
        .map(|(k, t)| (format!("x{k}"), t.clone()))
        .collect();
    let opts = GenOptions {
        factors: false,
        calls: false,
        max_depth: 5,
    };
    let depth = rng.gen_range(1..=opts.max_depth);
    let sigs = [sig];
    let mut gen = GoalGen {
        rng,
        opts,
        sigs: &sigs,
        callable: vec![],
        me: 0,
        tyvars: vec![],
        counter: 0,
    };
    let mut env = params.clone();
    let body = gen.goal(&mut env, depth);
    let p = Program {
        relations: vec![RelationDef {
            name: "g".into(),
            tyvars: vec![],
            params,
            body,
        }],
    };
    check_program(&p).unwrap_or_else(|e| panic!("generated an ill-typed program ({e}):\n{}", render_program(&p)))
}
