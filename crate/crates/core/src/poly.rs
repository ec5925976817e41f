//! Lowering polymorphic relations to monomorphic code.
//!
//! Two strategies are offered. [`PolyMode::Monomorphize`] emits one
//! instance per size assignment of a relation's type variables, using the
//! canonical type of each size. [`PolyMode::LargeEnough`] emits one
//! "large-enough" instance per relation and serves bigger calls from it:
//! the call is replaced by a call on fresh variables at the large-enough
//! types, plus a generated goal asserting that the two variable families
//! have the same equality pattern (same shells, and the same equalities
//! between corresponding holes). Calls that cannot be served this way are
//! monomorphized.
//!
//! Equality patterns are only sound when addition is idempotent, so the
//! large-enough mode refuses other semirings.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use thiserror::Error;

use crate::eval::{index_value, try_type_size, ValueEnv};
use crate::semiring::SemiringSpec;
use crate::syntax::{collect_type_vars, Call, Goal, Program, RelationDef, Type, Value};
use crate::typecheck::{apply_subst, apply_subst_value, check_program, CallInfo, Subst, TypeErrors};

/// Largest type-variable size a lowering will instantiate.
pub const DEFAULT_MAX_TYVAR_SIZE: usize = 4096;
pub const DEFAULT_MAX_INSTANCES: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PolyMode {
    Monomorphize,
    LargeEnough,
}

impl PolyMode {
    pub fn name(self) -> &'static str {
        match self {
            PolyMode::Monomorphize => "monomorphize",
            PolyMode::LargeEnough => "large-enough",
        }
    }
}

impl fmt::Display for PolyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
#[error("unknown poly mode `{0}` (expected monomorphize or large-enough)")]
pub struct UnknownPolyMode(pub String);

impl FromStr for PolyMode {
    type Err = UnknownPolyMode;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "monomorphize" | "mono" => Ok(PolyMode::Monomorphize),
            "large-enough" => Ok(PolyMode::LargeEnough),
            _ => Err(UnknownPolyMode(s.to_string())),
        }
    }
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum ShapeError {
    #[error("value `{value}` does not have the shape of `{ty}`")]
    Mismatch { value: Value, ty: Type },
    #[error("variable `{0}` has no value in the environment")]
    Unbound(String),
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum LowerError {
    #[error("the {0} semiring does not have idempotent addition; use --poly-mode monomorphize")]
    NonIdempotentSemiring(String),
    #[error("instance explosion: {0}")]
    InstanceExplosion(String),
    #[error("call to `{rel}` at sizes {sizes:?} is below its large-enough sizes {needed:?}")]
    NotLargeEnough {
        rel: String,
        sizes: Vec<usize>,
        needed: Vec<usize>,
    },
    #[error("call to `{rel}` cannot be renamed: {reason}")]
    NonGeneric { rel: String, reason: String },
    #[error("call to `{0}` carries no type information; type-check the program first")]
    Unchecked(String),
    #[error("lowered program is ill-typed (this is a bug):\n{0}")]
    Internal(TypeErrors),
}

// ---------------------------------------------------------------------------
// Shells and holes

/// A value with every type-variable-typed part replaced by a hole.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Shell {
    Sole,
    Left(Box<Shell>),
    Right(Box<Shell>),
    Pair(Box<Shell>, Box<Shell>),
    Hole(String),
}

impl fmt::Display for Shell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shell::Sole => f.write_str("sole"),
            Shell::Left(s) => write!(f, "(left {s})"),
            Shell::Right(s) => write!(f, "(right {s})"),
            Shell::Pair(a, b) => write!(f, "(pair {a} {b})"),
            Shell::Hole(a) => write!(f, "(hole {a})"),
        }
    }
}

fn mismatch(v: &Value, t: &Type) -> ShapeError {
    ShapeError::Mismatch {
        value: v.clone(),
        ty: t.clone(),
    }
}

pub fn shell_of(t: &Type, v: &Value) -> Result<Shell, ShapeError> {
    Ok(match (t, v) {
        (Type::Var(a), _) => Shell::Hole(a.clone()),
        (Type::Unit, Value::Sole) => Shell::Sole,
        (Type::Sum(a, _), Value::Left(_, inner)) => Shell::Left(Box::new(shell_of(a, inner)?)),
        (Type::Sum(_, b), Value::Right(_, inner)) => Shell::Right(Box::new(shell_of(b, inner)?)),
        (Type::Prod(a, b), Value::Pair(p, q)) => {
            Shell::Pair(Box::new(shell_of(a, p)?), Box::new(shell_of(b, q)?))
        }
        _ => return Err(mismatch(v, t)),
    })
}

/// Values sitting in `alpha`'s holes, in left-to-right order.
pub fn holes_of(alpha: &str, t: &Type, v: &Value) -> Result<Vec<Value>, ShapeError> {
    let mut out = Vec::new();
    push_holes(alpha, t, v, &mut out)?;
    Ok(out)
}

fn push_holes(alpha: &str, t: &Type, v: &Value, out: &mut Vec<Value>) -> Result<(), ShapeError> {
    match (t, v) {
        (Type::Var(a), _) => {
            if a == alpha {
                out.push(v.strip_annotations());
            }
        }
        (Type::Unit, Value::Sole) => {}
        (Type::Sum(a, _), Value::Left(_, inner)) => push_holes(alpha, a, inner, out)?,
        (Type::Sum(_, b), Value::Right(_, inner)) => push_holes(alpha, b, inner, out)?,
        (Type::Prod(a, b), Value::Pair(p, q)) => {
            push_holes(alpha, a, p, out)?;
            push_holes(alpha, b, q, out)?;
        }
        _ => return Err(mismatch(v, t)),
    }
    Ok(())
}

fn lookup<'a>(env: &'a ValueEnv, x: &str) -> Result<&'a Value, ShapeError> {
    env.get(x).ok_or_else(|| ShapeError::Unbound(x.to_string()))
}

pub fn envshell(delta: &[(String, Type)], env: &ValueEnv) -> Result<IndexMap<String, Shell>, ShapeError> {
    delta
        .iter()
        .map(|(x, t)| Ok((x.clone(), shell_of(t, lookup(env, x)?)?)))
        .collect()
}

pub fn envholes(alpha: &str, delta: &[(String, Type)], env: &ValueEnv) -> Result<Vec<Value>, ShapeError> {
    let mut out = Vec::new();
    for (x, t) in delta {
        push_holes(alpha, t, lookup(env, x)?, &mut out)?;
    }
    Ok(out)
}

fn delta_tyvars(delta: &[(String, Type)]) -> Vec<String> {
    let mut out = Vec::new();
    for (_, t) in delta {
        collect_type_vars(t, &mut out);
    }
    out
}

/// Whether two environments over `delta` have the same equality pattern:
/// equal shells, and for every type variable, hole `i` equals hole `j` in
/// one environment exactly when it does in the other.
pub fn eqpat_check(delta: &[(String, Type)], env1: &ValueEnv, env2: &ValueEnv) -> Result<bool, ShapeError> {
    if envshell(delta, env1)? != envshell(delta, env2)? {
        return Ok(false);
    }
    for alpha in delta_tyvars(delta) {
        let h1 = envholes(&alpha, delta, env1)?;
        let h2 = envholes(&alpha, delta, env2)?;
        for i in 0..h1.len() {
            for j in i + 1..h1.len() {
                if (h1[i] == h1[j]) != (h2[i] == h2[j]) {
                    return Ok(false);
                }
            }
        }
    }
    Ok(true)
}

// ---------------------------------------------------------------------------
// Occurrence counts and sizes

pub fn count_type(alpha: &str, t: &Type) -> usize {
    match t {
        Type::Unit => 0,
        Type::Sum(a, b) => count_type(alpha, a).max(count_type(alpha, b)),
        Type::Prod(a, b) => count_type(alpha, a) + count_type(alpha, b),
        Type::Var(v) => usize::from(v == alpha),
    }
}

pub fn count_env(alpha: &str, delta: &[(String, Type)]) -> usize {
    delta.iter().map(|(_, t)| count_type(alpha, t)).sum()
}

/// Largest occurrence count of `alpha` over every environment reached
/// inside `g`, starting from `delta`.
pub fn count_goal(alpha: &str, g: &Goal, delta: &[(String, Type)]) -> usize {
    fn go(alpha: &str, g: &Goal, base: usize) -> usize {
        match g {
            Goal::Conj(a, b) | Goal::Disj(a, b) => go(alpha, a, base).max(go(alpha, b, base)),
            Goal::Fresh { ty, body, .. } => go(alpha, body, base + count_type(alpha, ty)),
            _ => base,
        }
    }
    go(alpha, g, count_env(alpha, delta))
}

pub fn count_relation(alpha: &str, rel: &RelationDef) -> usize {
    count_goal(alpha, &rel.body, &rel.params)
}

/// Right-nested sum of `n` Units.
///
/// # Panics
/// If `n == 0`.
pub fn canonical_type(n: usize) -> Type {
    assert!(n >= 1, "no type has zero values");
    (1..n).fold(Type::Unit, |acc, _| Type::sum(Type::Unit, acc))
}

/// Required size per type variable, in the relation's type-variable order.
pub type SizeSubst = IndexMap<String, usize>;

pub fn smallest_large_enough(rel: &RelationDef) -> SizeSubst {
    rel.tyvars
        .iter()
        .map(|a| (a.clone(), count_relation(a, rel).max(1)))
        .collect()
}

pub fn canonical_subst(sizes: &SizeSubst) -> Subst {
    sizes.iter().map(|(a, &n)| (a.clone(), canonical_type(n))).collect()
}

/// Identifies one monomorphic instance of a polymorphic relation.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct InstanceKey {
    pub rel: String,
    pub sizes: Vec<usize>,
}

impl InstanceKey {
    pub fn mangled(&self) -> String {
        mangle(&self.rel, &self.sizes)
    }
}

impl fmt::Display for InstanceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.mangled())
    }
}

/// `R$3,4`: the instance of `R` whose type variables have sizes 3 and 4.
pub fn mangle(rel: &str, sizes: &[usize]) -> String {
    let list: Vec<String> = sizes.iter().map(|n| n.to_string()).collect();
    format!("{rel}${}", list.join(","))
}

// ---------------------------------------------------------------------------
// Instantiation

fn subst_goal(g: &Goal, s: &Subst) -> Goal {
    match g {
        Goal::Conj(a, b) => Goal::conj(subst_goal(a, s), subst_goal(b, s)),
        Goal::Disj(a, b) => Goal::disj(subst_goal(a, s), subst_goal(b, s)),
        Goal::Fresh { var, ty, body } => Goal::fresh(var.clone(), apply_subst(ty, s), subst_goal(body, s)),
        Goal::Unify(a, b) => Goal::Unify(apply_subst_value(a, s), apply_subst_value(b, s)),
        Goal::Disunify(a, b) => Goal::Disunify(apply_subst_value(a, s), apply_subst_value(b, s)),
        Goal::Call(c) => Goal::Call(Call {
            rel: c.rel.clone(),
            args: c.args.iter().map(|v| apply_subst_value(v, s)).collect(),
            info: c.info.as_ref().map(|info| {
                Box::new(CallInfo {
                    id: info.id,
                    subst: info.subst.iter().map(|(b, t)| (b.clone(), apply_subst(t, s))).collect(),
                    generic_env: info.generic_env.clone(),
                })
            }),
        }),
        Goal::Factor(r) => Goal::Factor(r.clone()),
    }
}

/// `rel` with `sigma` applied to every type it mentions. Polymorphic
/// relations are renamed after the sizes of their instantiated type
/// variables; monomorphic ones come back unchanged.
///
/// # Panics
/// If `sigma` leaves one of `rel`'s type variables non-concrete.
pub fn instantiate_relation(rel: &RelationDef, sigma: &Subst) -> RelationDef {
    if !rel.is_polymorphic() {
        return rel.clone();
    }
    let sizes: Vec<usize> = rel
        .tyvars
        .iter()
        .map(|a| {
            let t = sigma.get(a).unwrap_or_else(|| panic!("no type for `{a}`"));
            try_type_size(t).unwrap_or_else(|| panic!("`{a}` maps to non-concrete `{t}`"))
        })
        .collect();
    RelationDef {
        name: mangle(&rel.name, &sizes),
        tyvars: Vec::new(),
        params: rel.params.iter().map(|(x, t)| (x.clone(), apply_subst(t, sigma))).collect(),
        body: subst_goal(&rel.body, sigma),
    }
}

// ---------------------------------------------------------------------------
// Code generation helpers

/// Hands out variable names unused anywhere in one relation.
#[derive(Clone, Debug, Default)]
pub struct NameGen {
    used: HashSet<String>,
    next: usize,
}

impl NameGen {
    pub fn for_relation(rel: &RelationDef) -> NameGen {
        let mut used: HashSet<String> = rel.params.iter().map(|(x, _)| x.clone()).collect();
        collect_goal_names(&rel.body, &mut used);
        NameGen { used, next: 0 }
    }

    pub fn fresh(&mut self, base: &str) -> String {
        let stem = base.split('%').next().unwrap_or(base);
        loop {
            self.next += 1;
            let cand = format!("{stem}%{}", self.next);
            if self.used.insert(cand.clone()) {
                return cand;
            }
        }
    }
}

fn collect_goal_names(g: &Goal, out: &mut HashSet<String>) {
    let mut vals = Vec::new();
    match g {
        Goal::Conj(a, b) | Goal::Disj(a, b) => {
            collect_goal_names(a, out);
            collect_goal_names(b, out);
        }
        Goal::Fresh { var, body, .. } => {
            out.insert(var.clone());
            collect_goal_names(body, out);
        }
        Goal::Unify(a, b) | Goal::Disunify(a, b) => {
            a.collect_vars(&mut vals);
            b.collect_vars(&mut vals);
        }
        Goal::Call(c) => c.args.iter().for_each(|a| a.collect_vars(&mut vals)),
        Goal::Factor(_) => {}
    }
    out.extend(vals);
}

/// Fills every sum annotation of a value with no variables, given its type.
pub fn annotate_value(v: &Value, t: &Type) -> Value {
    match (v, t) {
        (Value::Left(_, inner), Type::Sum(a, _)) => Value::Left(Some(t.clone()), Box::new(annotate_value(inner, a))),
        (Value::Right(_, inner), Type::Sum(_, b)) => Value::Right(Some(t.clone()), Box::new(annotate_value(inner, b))),
        (Value::Pair(p, q), Type::Prod(a, b)) => Value::pair(annotate_value(p, a), annotate_value(q, b)),
        _ => v.clone(),
    }
}

fn unify(a: Value, b: Value) -> Goal {
    Goal::Unify(a, b)
}

struct EqpatGen<'a> {
    s1: &'a Subst,
    s2: &'a Subst,
    names: &'a mut NameGen,
    /// Per type variable, the ancillary hole variables of both families.
    slots: IndexMap<String, Vec<(String, String)>>,
}

impl EqpatGen<'_> {
    fn deconstruct(&mut self, u1: Value, u2: Value, g: &Type, base: &HashMap<String, usize>) -> Goal {
        if g.is_concrete() {
            return unify(u1, u2);
        }
        match g {
            Type::Var(a) => {
                let (h1, h2) = self.slots[a][base[a]].clone();
                Goal::conj(unify(u1, Value::var(h1)), unify(u2, Value::var(h2)))
            }
            Type::Prod(a, b) => {
                let (p1, q1, p2, q2) = (
                    self.names.fresh("p"),
                    self.names.fresh("q"),
                    self.names.fresh("p"),
                    self.names.fresh("q"),
                );
                let mut base_b = base.clone();
                for (alpha, off) in base_b.iter_mut() {
                    *off += count_type(alpha, a);
                }
                let left = self.deconstruct(Value::var(&p1), Value::var(&p2), a, base);
                let right = self.deconstruct(Value::var(&q1), Value::var(&q2), b, &base_b);
                Goal::fresh_all(
                    vec![
                        (p1.clone(), apply_subst(a, self.s1)),
                        (q1.clone(), apply_subst(b, self.s1)),
                        (p2.clone(), apply_subst(a, self.s2)),
                        (q2.clone(), apply_subst(b, self.s2)),
                    ],
                    Goal::conj_all(vec![
                        unify(u1, Value::pair(Value::var(p1), Value::var(q1))),
                        unify(u2, Value::pair(Value::var(p2), Value::var(q2))),
                        left,
                        right,
                    ]),
                )
            }
            Type::Sum(a, b) => {
                let t1 = apply_subst(g, self.s1);
                let t2 = apply_subst(g, self.s2);
                let mut branch = |inner: &Type, is_left: bool| {
                    let c1 = self.names.fresh("c");
                    let c2 = self.names.fresh("c");
                    let wrap = |t: &Type, c: &str| {
                        if is_left {
                            Value::Left(Some(t.clone()), Box::new(Value::var(c)))
                        } else {
                            Value::Right(Some(t.clone()), Box::new(Value::var(c)))
                        }
                    };
                    let (w1, w2) = (wrap(&t1, &c1), wrap(&t2, &c2));
                    let rest = self.deconstruct(Value::var(&c1), Value::var(&c2), inner, base);
                    Goal::fresh_all(
                        vec![(c1, apply_subst(inner, self.s1)), (c2, apply_subst(inner, self.s2))],
                        Goal::conj_all(vec![unify(u1.clone(), w1), unify(u2.clone(), w2), rest]),
                    )
                };
                let l = branch(a, true);
                let r = branch(b, false);
                Goal::disj(l, r)
            }
            Type::Unit => unreachable!("concrete"),
        }
    }
}

/// Goal succeeding (with weight one, under idempotent addition) exactly
/// when the `vars1` family, typed at `s1(delta)`, and the `vars2` family,
/// typed at `s2(delta)`, have the same equality pattern.
///
/// Hole slots of the two branches of a sum share offsets, so each type
/// variable `α` gets exactly `#_α delta` ancillary pairs; slots a shell does
/// not use stay unconstrained.
pub fn enforce_eqpat_codegen(
    delta: &[(String, Type)],
    vars1: &[String],
    vars2: &[String],
    s1: &Subst,
    s2: &Subst,
    names: &mut NameGen,
) -> Goal {
    assert_eq!(delta.len(), vars1.len());
    assert_eq!(delta.len(), vars2.len());
    let tyvars = delta_tyvars(delta);
    let mut binders = Vec::new();
    let mut slots = IndexMap::new();
    for a in &tyvars {
        let t1 = s1.get(a).cloned().unwrap_or_else(|| Type::var(a));
        let t2 = s2.get(a).cloned().unwrap_or_else(|| Type::var(a));
        let mut list = Vec::new();
        for _ in 0..count_env(a, delta) {
            let h1 = names.fresh("h");
            let h2 = names.fresh("h");
            binders.push((h1.clone(), t1.clone()));
            binders.push((h2.clone(), t2.clone()));
            list.push((h1, h2));
        }
        slots.insert(a.clone(), list);
    }
    let mut gen = EqpatGen { s1, s2, names, slots };
    let mut goals = Vec::new();
    let mut base: HashMap<String, usize> = tyvars.iter().map(|a| (a.clone(), 0)).collect();
    for (((_, g), x1), x2) in delta.iter().zip(vars1).zip(vars2) {
        goals.push(gen.deconstruct(Value::var(x1), Value::var(x2), g, &base));
        for (a, off) in base.iter_mut() {
            *off += count_type(a, g);
        }
    }
    for list in gen.slots.values() {
        for i in 0..list.len() {
            for j in i + 1..list.len() {
                let (a1, a2) = (Value::var(&list[i].0), Value::var(&list[i].1));
                let (b1, b2) = (Value::var(&list[j].0), Value::var(&list[j].1));
                goals.push(Goal::disj(
                    Goal::conj(unify(a1.clone(), b1.clone()), unify(a2.clone(), b2.clone())),
                    Goal::conj(Goal::Disunify(a1, b1), Goal::Disunify(a2, b2)),
                ));
            }
        }
    }
    Goal::fresh_all(binders, Goal::conj_all(goals))
}

/// Goal relating `u : s1(t)` to `c : s2(t)` when the two agree on shell and
/// each hole of `c` holds the value with the same index as the
/// corresponding hole of `u`. Every `u` has exactly one such `c`, so the
/// weight is exactly one in any semiring.
fn cast_goal(u: Value, c: Value, t: &Type, s1: &Subst, s2: &Subst, names: &mut NameGen) -> Goal {
    let t1 = apply_subst(t, s1);
    let t2 = apply_subst(t, s2);
    if t1 == t2 {
        return unify(u, c);
    }
    match t {
        Type::Var(_) => {
            let n = try_type_size(&t1).expect("concrete");
            let branches = (0..n)
                .map(|i| {
                    let v1 = annotate_value(&index_value(i, &t1).expect("in range"), &t1);
                    let v2 = annotate_value(&index_value(i, &t2).expect("in range"), &t2);
                    Goal::conj(unify(u.clone(), v1), unify(c.clone(), v2))
                })
                .collect();
            Goal::disj_all(branches)
        }
        Type::Prod(a, b) => {
            let (p1, q1, p2, q2) = (names.fresh("p"), names.fresh("q"), names.fresh("p"), names.fresh("q"));
            let ga = cast_goal(Value::var(&p1), Value::var(&p2), a, s1, s2, names);
            let gb = cast_goal(Value::var(&q1), Value::var(&q2), b, s1, s2, names);
            Goal::fresh_all(
                vec![
                    (p1.clone(), apply_subst(a, s1)),
                    (q1.clone(), apply_subst(b, s1)),
                    (p2.clone(), apply_subst(a, s2)),
                    (q2.clone(), apply_subst(b, s2)),
                ],
                Goal::conj_all(vec![
                    unify(u, Value::pair(Value::var(p1), Value::var(q1))),
                    unify(c, Value::pair(Value::var(p2), Value::var(q2))),
                    ga,
                    gb,
                ]),
            )
        }
        Type::Sum(a, b) => {
            let mut branch = |inner: &Type, is_left: bool| {
                let (c1, c2) = (names.fresh("c"), names.fresh("c"));
                let wrap = |t: &Type, x: &str| {
                    if is_left {
                        Value::Left(Some(t.clone()), Box::new(Value::var(x)))
                    } else {
                        Value::Right(Some(t.clone()), Box::new(Value::var(x)))
                    }
                };
                let rest = cast_goal(Value::var(&c1), Value::var(&c2), inner, s1, s2, names);
                Goal::fresh_all(
                    vec![(c1.clone(), apply_subst(inner, s1)), (c2.clone(), apply_subst(inner, s2))],
                    Goal::conj_all(vec![unify(u.clone(), wrap(&t1, &c1)), unify(c.clone(), wrap(&t2, &c2)), rest]),
                )
            };
            let l = branch(a, true);
            let r = branch(b, false);
            Goal::disj(l, r)
        }
        Type::Unit => unreachable!("equal under both substitutions"),
    }
}

/// Rebuilds an argument for a callee instantiated at `s2`: variables are
/// renamed through `rename` and sum annotations follow the callee's
/// parameter type `t`.
fn retarget_arg(v: &Value, t: &Type, s2: &Subst, rename: &HashMap<String, String>) -> Value {
    match (v, t) {
        (Value::Var(x), _) => Value::Var(rename.get(x).cloned().unwrap_or_else(|| x.clone())),
        (Value::Left(_, inner), Type::Sum(a, _)) => {
            Value::Left(Some(apply_subst(t, s2)), Box::new(retarget_arg(inner, a, s2, rename)))
        }
        (Value::Right(_, inner), Type::Sum(_, b)) => {
            Value::Right(Some(apply_subst(t, s2)), Box::new(retarget_arg(inner, b, s2, rename)))
        }
        (Value::Pair(p, q), Type::Prod(a, b)) => {
            Value::pair(retarget_arg(p, a, s2, rename), retarget_arg(q, b, s2, rename))
        }
        _ => v.clone(),
    }
}

fn call_info(call: &Call) -> Result<&CallInfo, LowerError> {
    call.info
        .as_deref()
        .ok_or_else(|| LowerError::Unchecked(call.rel.clone()))
}

fn call_sizes(callee: &RelationDef, info: &CallInfo, max: usize) -> Result<SizeSubst, LowerError> {
    callee
        .tyvars
        .iter()
        .map(|a| {
            let t = info.subst.get(a).ok_or_else(|| LowerError::Unchecked(callee.name.clone()))?;
            if !t.is_concrete() {
                return Err(LowerError::Unchecked(callee.name.clone()));
            }
            match try_type_size(t) {
                Some(n) if n <= max => Ok((a.clone(), n)),
                _ => Err(LowerError::InstanceExplosion(format!(
                    "`{}` needs type variable `{a}` at `{t}`, larger than {max} values",
                    callee.name
                ))),
            }
        })
        .collect()
}

/// Serves a type-checked call from the instance of `callee` at `target`.
///
/// With the call's own types equal to the canonical target types this is a
/// plain call; otherwise the call moves onto fresh copies of its variables
/// at the target types, guarded by [`enforce_eqpat_codegen`].
pub fn compile_call(
    call: &Call,
    callee: &RelationDef,
    target: &SizeSubst,
    names: &mut NameGen,
) -> Result<Goal, LowerError> {
    let info = call_info(call)?;
    let sizes = call_sizes(callee, info, usize::MAX)?;
    if sizes.iter().any(|(a, n)| *n < target[a]) {
        return Err(LowerError::NotLargeEnough {
            rel: callee.name.clone(),
            sizes: sizes.values().copied().collect(),
            needed: target.values().copied().collect(),
        });
    }
    let delta = info.generic_env.as_ref().map_err(|e| LowerError::NonGeneric {
        rel: callee.name.clone(),
        reason: e.to_string(),
    })?;
    let s2 = canonical_subst(target);
    let name = mangle(&callee.name, &target.values().copied().collect::<Vec<_>>());
    let s1: Subst = callee
        .tyvars
        .iter()
        .map(|a| (a.clone(), info.subst[a].clone()))
        .collect();
    if s1 == s2 {
        return Ok(Goal::Call(Call::new(name, call.args.clone())));
    }
    let moved: Vec<(String, Type)> = delta.iter().filter(|(_, g)| !g.is_concrete()).cloned().collect();
    let mut rename = HashMap::new();
    let mut binders = Vec::new();
    let mut vars1 = Vec::new();
    let mut vars2 = Vec::new();
    for (x, g) in &moved {
        let x2 = names.fresh(x);
        binders.push((x2.clone(), apply_subst(g, &s2)));
        rename.insert(x.clone(), x2.clone());
        vars1.push(x.clone());
        vars2.push(x2);
    }
    let args = call
        .args
        .iter()
        .zip(&callee.params)
        .map(|(v, (_, t))| retarget_arg(v, t, &s2, &rename))
        .collect();
    let guard = enforce_eqpat_codegen(&moved, &vars1, &vars2, &s1, &s2, names);
    Ok(Goal::fresh_all(
        binders,
        Goal::conj(Goal::Call(Call::new(name, args)), guard),
    ))
}

/// Calls the canonical-type instance of `callee` at the call's own sizes,
/// casting arguments whose types differ from the canonical ones.
fn monomorphic_call(call: &Call, callee: &RelationDef, sizes: &SizeSubst, names: &mut NameGen) -> Result<Goal, LowerError> {
    let info = call_info(call)?;
    let s1: Subst = callee
        .tyvars
        .iter()
        .map(|a| (a.clone(), info.subst[a].clone()))
        .collect();
    let sc = canonical_subst(sizes);
    let name = mangle(&callee.name, &sizes.values().copied().collect::<Vec<_>>());
    let mut binders = Vec::new();
    let mut casts = Vec::new();
    let mut args = Vec::new();
    for (v, (_, t)) in call.args.iter().zip(&callee.params) {
        let t1 = apply_subst(t, &s1);
        let t2 = apply_subst(t, &sc);
        if t1 == t2 {
            args.push(v.clone());
            continue;
        }
        let c = names.fresh("arg");
        casts.push(cast_goal(v.clone(), Value::var(&c), t, &s1, &sc, names));
        binders.push((c.clone(), t2));
        args.push(Value::var(c));
    }
    let mut goals = vec![Goal::Call(Call::new(name, args))];
    goals.extend(casts);
    Ok(Goal::fresh_all(binders, Goal::conj_all(goals)))
}

// ---------------------------------------------------------------------------
// Whole-program lowering

#[derive(Clone, Debug, PartialEq)]
pub struct LowerOptions {
    pub mode: PolyMode,
    pub max_instances: usize,
    pub max_tyvar_size: usize,
}

impl LowerOptions {
    pub fn new(mode: PolyMode) -> LowerOptions {
        LowerOptions {
            mode,
            max_instances: DEFAULT_MAX_INSTANCES,
            max_tyvar_size: DEFAULT_MAX_TYVAR_SIZE,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lowered {
    /// Monomorphic, type-checked program.
    pub program: Program,
    /// Instances of polymorphic relations, in discovery order.
    pub instances: Vec<InstanceKey>,
    /// Human-readable notes on calls that fell back to monomorphization.
    pub notes: Vec<String>,
}

/// Polymorphic relations whose large-enough instance determines all bigger
/// instances. A relation qualifies when every call in its body whose types
/// depend on the relation's own type variables reaches a qualifying
/// relation at sizes no smaller than that relation's large-enough sizes
/// (evaluated at the caller's large-enough sizes).
pub fn large_enough_safe(p: &Program) -> HashSet<String> {
    let le: HashMap<&str, SizeSubst> = p
        .relations
        .iter()
        .filter(|r| r.is_polymorphic())
        .map(|r| (r.name.as_str(), smallest_large_enough(r)))
        .collect();
    let mut safe: HashSet<String> = le.keys().map(|s| s.to_string()).collect();
    loop {
        let mut dropped = Vec::new();
        for name in &safe {
            let rel = p.relation(name).expect("known relation");
            let at = canonical_subst(&le[name.as_str()]);
            let mut ok = true;
            rel.body.for_each_call(&mut |c| {
                let Some(callee) = p.relation(&c.rel).filter(|r| r.is_polymorphic()) else {
                    return;
                };
                let Some(info) = c.info.as_deref() else {
                    ok = false;
                    return;
                };
                let depends = info
                    .subst
                    .values()
                    .any(|t| rel.tyvars.iter().any(|a| t.mentions(a)));
                if !depends {
                    return;
                }
                if !safe.contains(&callee.name) {
                    ok = false;
                    return;
                }
                let need = &le[callee.name.as_str()];
                for (b, &n) in need {
                    let size = info.subst.get(b).map(|t| apply_subst(t, &at)).and_then(|t| try_type_size(&t));
                    if size.is_none_or(|s| s < n) {
                        ok = false;
                    }
                }
            });
            if !ok {
                dropped.push(name.clone());
            }
        }
        if dropped.is_empty() {
            return safe;
        }
        for d in dropped {
            safe.remove(&d);
        }
    }
}

struct Lowerer<'a> {
    program: &'a Program,
    opts: &'a LowerOptions,
    le: HashMap<String, SizeSubst>,
    safe: HashSet<String>,
    queue: VecDeque<InstanceKey>,
    seen: HashSet<InstanceKey>,
    order: Vec<InstanceKey>,
    notes: Vec<String>,
}

impl Lowerer<'_> {
    fn request(&mut self, key: InstanceKey) -> Result<(), LowerError> {
        if self.seen.insert(key.clone()) {
            if self.seen.len() > self.opts.max_instances {
                return Err(LowerError::InstanceExplosion(format!(
                    "more than {} instances needed (last: {key}); is a relation calling itself at growing types?",
                    self.opts.max_instances
                )));
            }
            self.order.push(key.clone());
            self.queue.push_back(key);
        }
        Ok(())
    }

    fn rewrite(&mut self, g: &Goal, caller: &str, names: &mut NameGen) -> Result<Goal, LowerError> {
        Ok(match g {
            Goal::Conj(a, b) => Goal::conj(self.rewrite(a, caller, names)?, self.rewrite(b, caller, names)?),
            Goal::Disj(a, b) => Goal::disj(self.rewrite(a, caller, names)?, self.rewrite(b, caller, names)?),
            Goal::Fresh { var, ty, body } => Goal::fresh(var.clone(), ty.clone(), self.rewrite(body, caller, names)?),
            Goal::Call(c) => self.rewrite_call(c, caller, names)?,
            other => other.clone(),
        })
    }

    fn rewrite_call(&mut self, c: &Call, caller: &str, names: &mut NameGen) -> Result<Goal, LowerError> {
        let program = self.program;
        let callee = program
            .relation(&c.rel)
            .ok_or_else(|| LowerError::Unchecked(c.rel.clone()))?;
        if !callee.is_polymorphic() {
            return Ok(Goal::Call(Call::new(c.rel.clone(), c.args.clone())));
        }
        let info = call_info(c)?;
        let sizes = call_sizes(callee, info, self.opts.max_tyvar_size)?;
        if self.opts.mode == PolyMode::LargeEnough {
            let target = self.le[&callee.name].clone();
            let attempt = if self.safe.contains(&callee.name) {
                compile_call(c, callee, &target, names)
            } else {
                Err(LowerError::NonGeneric {
                    rel: callee.name.clone(),
                    reason: "its body calls relations below their large-enough sizes".into(),
                })
            };
            match attempt {
                Ok(g) => {
                    self.request(InstanceKey {
                        rel: callee.name.clone(),
                        sizes: target.values().copied().collect(),
                    })?;
                    return Ok(g);
                }
                Err(e @ (LowerError::NotLargeEnough { .. } | LowerError::NonGeneric { .. })) => {
                    self.notes.push(format!("in `{caller}`: {e}; monomorphizing"));
                }
                Err(e) => return Err(e),
            }
        }
        self.request(InstanceKey {
            rel: callee.name.clone(),
            sizes: sizes.values().copied().collect(),
        })?;
        monomorphic_call(c, callee, &sizes, names)
    }

    fn lower_relation(&mut self, rel: &RelationDef) -> Result<RelationDef, LowerError> {
        let mut names = NameGen::for_relation(rel);
        let body = self.rewrite(&rel.body, &rel.name, &mut names)?;
        Ok(RelationDef {
            body,
            ..rel.clone()
        })
    }
}

/// Lowers a type-checked program to a monomorphic one.
pub fn lower_program(p: &Program, mode: PolyMode, semiring: &SemiringSpec) -> Result<Lowered, LowerError> {
    lower_program_with(p, semiring, &LowerOptions::new(mode))
}

pub fn lower_program_with(p: &Program, semiring: &SemiringSpec, opts: &LowerOptions) -> Result<Lowered, LowerError> {
    if opts.mode == PolyMode::LargeEnough && !semiring.idempotent_add {
        return Err(LowerError::NonIdempotentSemiring(semiring.name().to_string()));
    }
    let le = p
        .relations
        .iter()
        .filter(|r| r.is_polymorphic())
        .map(|r| (r.name.clone(), smallest_large_enough(r)))
        .collect();
    let safe = match opts.mode {
        PolyMode::LargeEnough => large_enough_safe(p),
        PolyMode::Monomorphize => HashSet::new(),
    };
    let mut lw = Lowerer {
        program: p,
        opts,
        le,
        safe,
        queue: VecDeque::new(),
        seen: HashSet::new(),
        order: Vec::new(),
        notes: Vec::new(),
    };
    let mut out = Vec::new();
    for r in p.relations.iter().filter(|r| !r.is_polymorphic()) {
        out.push(lw.lower_relation(r)?);
    }
    while let Some(key) = lw.queue.pop_front() {
        let rel = p.relation(&key.rel).expect("queued relations exist");
        let sizes: SizeSubst = rel.tyvars.iter().cloned().zip(key.sizes.iter().copied()).collect();
        let inst = instantiate_relation(rel, &canonical_subst(&sizes));
        out.push(lw.lower_relation(&inst)?);
    }
    let program = check_program(&Program { relations: out }).map_err(LowerError::Internal)?;
    Ok(Lowered {
        program,
        instances: lw.order,
        notes: lw.notes,
    })
}

/// Instances a lowering would emit, in discovery order.
pub fn collect_instances(p: &Program, semiring: &SemiringSpec, opts: &LowerOptions) -> Result<Vec<InstanceKey>, LowerError> {
    lower_program_with(p, semiring, opts).map(|l| l.instances)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{fixpoint, FixpointOptions};
    use crate::semiring::Weight;
    use crate::syntax::{parse_program, parse_value};

    const EQUAL: &str = "(defrel (equal (x : a) (y : a)) (== x y))";
    const SUM_SWAP: &str = "
        (defrel (sum-swap (x : (Sum a b)) (y : (Sum b a)))
          (disj
            (fresh ((c : a)) (conj (== x (left c)) (== y (right c))))
            (fresh ((d : b)) (conj (== x (right d)) (== y (left d))))))";
    const TWO_VALUED: &str = "(defrel (two-valued (x : a)) (fresh ((y : a)) (=/= x y)))";

    fn checked(src: &str) -> Program {
        check_program(&parse_program(src).unwrap()).unwrap()
    }

    fn v(s: &str) -> Value {
        parse_value(s).unwrap()
    }

    fn env(pairs: &[(&str, &str)]) -> ValueEnv {
        pairs.iter().map(|(x, s)| (x.to_string(), v(s))).collect()
    }

    fn a() -> Type {
        Type::var("a")
    }

    #[test]
    fn shells() {
        assert_eq!(shell_of(&a(), &v("(left sole)")), Ok(Shell::Hole("a".into())));
        assert_eq!(
            shell_of(&Type::sum(a(), Type::Unit), &v("(left (right sole))")),
            Ok(Shell::Left(Box::new(Shell::Hole("a".into()))))
        );
        assert_eq!(
            shell_of(&Type::prod(a(), a()), &v("(pair sole sole)")).unwrap().to_string(),
            "(pair (hole a) (hole a))"
        );
        assert!(shell_of(&Type::Unit, &v("(left sole)")).is_err());
    }

    #[test]
    fn holes() {
        assert_eq!(holes_of("a", &a(), &v("(left sole)")), Ok(vec![v("(left sole)")]));
        assert_eq!(
            holes_of("a", &Type::prod(a(), a()), &v("(pair sole (left sole))")),
            Ok(vec![v("sole"), v("(left sole)")])
        );
        assert_eq!(holes_of("b", &a(), &v("sole")), Ok(vec![]));
    }

    fn sum_aa_delta() -> Vec<(String, Type)> {
        vec![("x".into(), Type::sum(a(), a())), ("y".into(), a())]
    }

    #[test]
    fn env_shells_and_holes() {
        let d = vec![("x".to_string(), a())];
        let e = env(&[("x", "sole")]);
        assert_eq!(envshell(&d, &e).unwrap()["x"], Shell::Hole("a".into()));
        assert_eq!(envholes("a", &d, &e), Ok(vec![v("sole")]));
        assert!(envshell(&[], &ValueEnv::new()).unwrap().is_empty());
        let e = env(&[("x", "(left (right sole))"), ("y", "(left sole)")]);
        let d = sum_aa_delta();
        assert_eq!(envshell(&d, &e).unwrap()["x"].to_string(), "(left (hole a))");
        assert_eq!(envholes("a", &d, &e), Ok(vec![v("(right sole)"), v("(left sole)")]));
    }

    #[test]
    fn eqpat_examples() {
        let d = sum_aa_delta();
        let zero2 = "(left sole)";
        let one2 = "(right sole)";
        let e1 = env(&[("x", "(left sole)"), ("y", "sole")]);
        let e2 = env(&[("x", "(right sole)"), ("y", "sole")]);
        assert_eq!(eqpat_check(&d, &e1, &e2), Ok(false));
        let e1 = env(&[("x", &format!("(left {one2})")), ("y", zero2)]);
        let e2 = env(&[("x", &format!("(left {zero2})")), ("y", one2)]);
        assert_eq!(eqpat_check(&d, &e1, &e2), Ok(true));
        let e1 = env(&[("x", &format!("(left {zero2})")), ("y", zero2)]);
        let e2 = env(&[("x", "(left sole)"), ("y", "sole")]);
        assert_eq!(eqpat_check(&d, &e1, &e2), Ok(true));
        let e2 = env(&[("x", &format!("(left {zero2})")), ("y", one2)]);
        assert_eq!(eqpat_check(&d, &e1, &e2), Ok(false));
    }

    #[test]
    fn counts() {
        assert_eq!(count_type("a", &Type::prod(a(), a())), 2);
        assert_eq!(count_type("a", &Type::sum(a(), a())), 1);
        let p = checked(&format!("{EQUAL} {SUM_SWAP} {TWO_VALUED}"));
        let swap = p.relation("sum-swap").unwrap();
        assert_eq!(count_relation("a", swap), 3);
        assert_eq!(count_relation("b", swap), 3);
        assert_eq!(count_relation("a", p.relation("two-valued").unwrap()), 2);
        assert_eq!(count_relation("a", p.relation("equal").unwrap()), 2);
    }

    #[test]
    fn canonical_types() {
        assert_eq!(canonical_type(1), Type::Unit);
        assert_eq!(canonical_type(2).to_string(), "(Sum Unit Unit)");
        assert_eq!(canonical_type(4).to_string(), "(Sum Unit (Sum Unit (Sum Unit Unit)))");
        for n in 1..20 {
            assert_eq!(try_type_size(&canonical_type(n)), Some(n));
        }
    }

    #[test]
    #[should_panic]
    fn canonical_type_zero() {
        canonical_type(0);
    }

    #[test]
    fn large_enough_sizes() {
        let p = checked(&format!("{EQUAL} {SUM_SWAP} {TWO_VALUED}"));
        let le = |n: &str| smallest_large_enough(p.relation(n).unwrap()).into_iter().collect::<Vec<_>>();
        assert_eq!(le("sum-swap"), vec![("a".into(), 3), ("b".into(), 3)]);
        assert_eq!(le("two-valued"), vec![("a".into(), 2)]);
        assert_eq!(le("equal"), vec![("a".into(), 2)]);
        let p = checked("(defrel (r (x : (Sum Unit a))) (== x x))");
        assert_eq!(smallest_large_enough(&p.relations[0])["a"], 1);
    }

    #[test]
    fn instantiation() {
        let p = checked(EQUAL);
        let s: Subst = [("a".to_string(), Type::Unit)].into_iter().collect();
        let r = instantiate_relation(&p.relations[0], &s);
        assert_eq!(r.name, "equal$1");
        assert!(r.tyvars.is_empty());
        assert_eq!(r.params, vec![("x".into(), Type::Unit), ("y".into(), Type::Unit)]);
        let p = checked("(defrel (r (x : Unit)) (== x sole))");
        assert_eq!(instantiate_relation(&p.relations[0], &Subst::new()), p.relations[0]);
    }

    fn ancillaries(g: &Goal) -> usize {
        match g {
            Goal::Fresh { var, body, .. } => usize::from(var.starts_with("h%")) + ancillaries(body),
            _ => 0,
        }
    }

    #[test]
    fn eqpat_codegen_shapes() {
        let s1: Subst = [("a".to_string(), Type::Unit)].into_iter().collect();
        let s2: Subst = [("a".to_string(), canonical_type(2))].into_iter().collect();
        let mut names = NameGen::default();
        let g = enforce_eqpat_codegen(&[("x".into(), a())], &["x".into()], &["x2".into()], &s1, &s2, &mut names);
        assert_eq!(ancillaries(&g), 2);
        assert!(!crate::syntax::render_goal(&g).contains("=/="));
        let g = enforce_eqpat_codegen(
            &[("x".into(), Type::sum(a(), a()))],
            &["x".into()],
            &["x2".into()],
            &s1,
            &s2,
            &mut names,
        );
        assert_eq!(ancillaries(&g), 2);
        let g = enforce_eqpat_codegen(&sum_aa_delta(), &["x".into(), "y".into()], &["x2".into(), "y2".into()], &s1, &s2, &mut names);
        assert_eq!(ancillaries(&g), 4);
        assert!(crate::syntax::render_goal(&g).contains("=/="));
    }

    /// Weight of the generated guard at every pair of environments over
    /// `delta`, against the direct equality-pattern check.
    fn guard_agrees(delta: &[(String, Type)], s1: &Subst, s2: &Subst) {
        let vars1: Vec<String> = delta.iter().map(|(x, _)| x.clone()).collect();
        let vars2: Vec<String> = vars1.iter().map(|x| format!("{x}'")).collect();
        let mut names = NameGen::default();
        let g = enforce_eqpat_codegen(delta, &vars1, &vars2, s1, s2, &mut names);
        let mut params: Vec<(String, Type)> = delta.iter().map(|(x, t)| (x.clone(), apply_subst(t, s1))).collect();
        params.extend(delta.iter().map(|(x, t)| (format!("{x}'"), apply_subst(t, s2))));
        let guard = RelationDef {
            name: "guard".into(),
            tyvars: vec![],
            params,
            body: g,
        };
        let p = check_program(&Program { relations: vec![guard] }).unwrap();
        let r = fixpoint(&p, &SemiringSpec::boolean(), &FixpointOptions::default()).unwrap();
        let n = delta.len();
        for (vals, w) in r.tables[0].rows() {
            let e1: ValueEnv = vars1.iter().cloned().zip(vals[..n].iter().cloned()).collect();
            let e2: ValueEnv = vars1.iter().cloned().zip(vals[n..].iter().cloned()).collect();
            let want = eqpat_check(delta, &e1, &e2).unwrap();
            assert_eq!(w, Weight::Bool(want), "{e1:?} vs {e2:?}");
        }
    }

    #[test]
    fn guard_matches_check_on_small_environments() {
        let sub = |n: usize, m: usize| -> Subst {
            [("a".to_string(), canonical_type(n)), ("b".to_string(), canonical_type(m))]
                .into_iter()
                .collect()
        };
        let b = Type::var("b");
        guard_agrees(&sum_aa_delta(), &sub(2, 1), &sub(3, 1));
        guard_agrees(
            &[("x".into(), Type::sum(a(), b.clone())), ("y".into(), Type::sum(b, a()))],
            &sub(3, 3),
            &sub(3, 4),
        );
        guard_agrees(
            &[("x".into(), Type::prod(a(), Type::sum(Type::Unit, a())))],
            &sub(2, 1),
            &sub(3, 1),
        );
    }

    fn boolean_table(p: &Program, rel: &str) -> Vec<bool> {
        let r = fixpoint(p, &SemiringSpec::boolean(), &FixpointOptions::default()).unwrap();
        r.table(rel)
            .unwrap_or_else(|| panic!("no table for {rel}"))
            .cells
            .iter()
            .map(|w| *w == Weight::Bool(true))
            .collect()
    }

    #[test]
    fn two_valued_small_call_falls_back() {
        let src = format!(
            "{TWO_VALUED}
             (defrel (small (x : Unit)) (two-valued x))
             (defrel (big (x : (Sum Unit Unit))) (two-valued x))"
        );
        let p = checked(&src);
        let sr = SemiringSpec::boolean();
        for mode in [PolyMode::Monomorphize, PolyMode::LargeEnough] {
            let l = lower_program(&p, mode, &sr).unwrap();
            assert_eq!(boolean_table(&l.program, "small"), vec![false], "{mode}");
            assert_eq!(boolean_table(&l.program, "big"), vec![true, true], "{mode}");
            assert!(l.program.relation("two-valued$1").is_some(), "{mode}");
        }
        let call = {
            let Goal::Call(c) = &p.relation("small").unwrap().body else { panic!() };
            c.clone()
        };
        let callee = p.relation("two-valued").unwrap();
        let err = compile_call(&call, callee, &smallest_large_enough(callee), &mut NameGen::default()).unwrap_err();
        assert!(matches!(err, LowerError::NotLargeEnough { .. }));
    }

    #[test]
    fn exact_size_call_is_direct() {
        let p = checked(&format!("{TWO_VALUED} (defrel (r (x : (Sum Unit Unit))) (two-valued x))"));
        let l = lower_program(&p, PolyMode::LargeEnough, &SemiringSpec::boolean()).unwrap();
        let Goal::Call(c) = &l.program.relation("r").unwrap().body else { panic!() };
        assert_eq!((c.rel.as_str(), c.args.clone()), ("two-valued$2", vec![Value::var("x")]));
    }

    #[test]
    fn sum_swap_large_call_uses_one_instance() {
        let t3 = canonical_type(3);
        let t4 = canonical_type(4);
        let src = format!(
            "{SUM_SWAP}
             (defrel (drive (x : (Sum {t3} {t4})) (y : (Sum {t4} {t3}))) (sum-swap x y))"
        );
        let p = checked(&src);
        let sr = SemiringSpec::boolean();
        let mono = lower_program(&p, PolyMode::Monomorphize, &sr).unwrap();
        let le = lower_program(&p, PolyMode::LargeEnough, &sr).unwrap();
        assert_eq!(mono.instances, vec![InstanceKey { rel: "sum-swap".into(), sizes: vec![3, 4] }]);
        assert_eq!(le.instances, vec![InstanceKey { rel: "sum-swap".into(), sizes: vec![3, 3] }]);
        assert_eq!(boolean_table(&mono.program, "drive"), boolean_table(&le.program, "drive"));
    }

    #[test]
    fn real_semiring_rejected_for_large_enough() {
        let p = checked(EQUAL);
        assert!(matches!(
            lower_program(&p, PolyMode::LargeEnough, &SemiringSpec::real()),
            Err(LowerError::NonIdempotentSemiring(_))
        ));
    }

    #[test]
    fn monomorphic_program_unchanged() {
        let p = checked("(defrel (r (x : (Sum Unit Unit))) (disj (== x (left sole)) (r x)))");
        for mode in [PolyMode::Monomorphize, PolyMode::LargeEnough] {
            let l = lower_program(&p, mode, &SemiringSpec::boolean()).unwrap();
            assert_eq!(l.program, p);
            assert!(l.instances.is_empty());
        }
    }

    #[test]
    fn growing_recursion_explodes() {
        let p = checked(
            "(defrel (grow (x : a)) (fresh ((y : (Prod a a))) (grow y)))
             (defrel (root (x : (Sum Unit Unit))) (grow x))",
        );
        let err = lower_program(&p, PolyMode::Monomorphize, &SemiringSpec::boolean()).unwrap_err();
        assert!(matches!(err, LowerError::InstanceExplosion(_)), "{err}");
        let mut opts = LowerOptions::new(PolyMode::Monomorphize);
        opts.max_instances = 3;
        opts.max_tyvar_size = usize::MAX;
        let err = collect_instances(&p, &SemiringSpec::boolean(), &opts).unwrap_err();
        assert!(err.to_string().contains("more than 3 instances"), "{err}");
    }

    #[test]
    fn non_canonical_types_are_cast() {
        let src = format!(
            "{EQUAL}
             (defrel (r (x : (Prod (Sum Unit Unit) (Sum Unit Unit))) (y : (Prod (Sum Unit Unit) (Sum Unit Unit))))
               (equal x y))"
        );
        let p = checked(&src);
        for (mode, sr) in [
            (PolyMode::Monomorphize, SemiringSpec::real()),
            (PolyMode::LargeEnough, SemiringSpec::boolean()),
            (PolyMode::LargeEnough, SemiringSpec::min_tropical()),
        ] {
            let l = lower_program(&p, mode, &sr).unwrap();
            let r = fixpoint(&l.program, &sr, &FixpointOptions::default()).unwrap();
            let t = r.table("r").unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    let want = if i == j { sr.one } else { sr.zero };
                    assert_eq!(t.get(&[i, j]), want, "{mode} {i} {j}");
                }
            }
        }
    }

    #[test]
    fn name_gen_avoids_existing_names() {
        let p = checked("(defrel (r (h%1 : Unit)) (fresh ((h%2 : Unit)) (== h%1 h%2)))");
        let mut g = NameGen::for_relation(&p.relations[0]);
        assert_eq!(g.fresh("h"), "h%3");
        assert_eq!(g.fresh("x%9"), "x%4");
    }

    #[test]
    fn poly_mode_parsing() {
        assert_eq!("large-enough".parse(), Ok(PolyMode::LargeEnough));
        assert_eq!("monomorphize".parse(), Ok(PolyMode::Monomorphize));
        assert!("fast".parse::<PolyMode>().is_err());
    }
}
