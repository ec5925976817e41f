//! Type checking for base and polymorphic programs.
//!
//! Checking fills in every `left`/`right` annotation and attaches a
//! [`CallInfo`] to each call. Bare sum constructors are resolved by
//! unification local to one leaf goal (`==`, `=/=` or a call); the
//! callee's type variables become unification variables at each call.

use std::collections::HashMap;
use std::fmt;

use indexmap::IndexMap;
use thiserror::Error;

use crate::syntax::{Call, Goal, Program, RelationDef, Type, Value};

/// Type-variable substitution, in the callee's type-variable order.
pub type Subst = IndexMap<String, Type>;

pub fn apply_subst(t: &Type, s: &Subst) -> Type {
    match t {
        Type::Unit => Type::Unit,
        Type::Sum(a, b) => Type::sum(apply_subst(a, s), apply_subst(b, s)),
        Type::Prod(a, b) => Type::prod(apply_subst(a, s), apply_subst(b, s)),
        Type::Var(v) => s.get(v).cloned().unwrap_or_else(|| t.clone()),
    }
}

pub fn apply_subst_value(v: &Value, s: &Subst) -> Value {
    match v {
        Value::Sole => Value::Sole,
        Value::Left(t, inner) => Value::Left(
            t.as_ref().map(|t| apply_subst(t, s)),
            Box::new(apply_subst_value(inner, s)),
        ),
        Value::Right(t, inner) => Value::Right(
            t.as_ref().map(|t| apply_subst(t, s)),
            Box::new(apply_subst_value(inner, s)),
        ),
        Value::Pair(a, b) => Value::pair(apply_subst_value(a, s), apply_subst_value(b, s)),
        Value::Var(x) => Value::Var(x.clone()),
    }
}

/// Signature of a relation as seen by its callers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelSig {
    pub tyvars: Vec<String>,
    pub params: Vec<Type>,
}

pub type RelEnv = IndexMap<String, RelSig>;

pub fn rel_env(p: &Program) -> RelEnv {
    p.relations
        .iter()
        .map(|r| {
            (
                r.name.clone(),
                RelSig {
                    tyvars: r.tyvars.clone(),
                    params: r.param_types(),
                },
            )
        })
        .collect()
}

/// Value-variable bindings plus the type variables in scope.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TypeEnv {
    pub vars: IndexMap<String, Type>,
    pub tyvars: Vec<String>,
}

impl TypeEnv {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_tyvars(tyvars: &[String]) -> Self {
        TypeEnv {
            vars: IndexMap::new(),
            tyvars: tyvars.to_vec(),
        }
    }

    pub fn bind(&mut self, x: impl Into<String>, t: Type) {
        self.vars.insert(x.into(), t);
    }
}

/// A variable occurs at two different generic positions of one call.
#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum NonGenericCall {
    #[error("variable `{var}` occurs at both `{first}` and `{second}`")]
    Conflict { var: String, first: Type, second: Type },
    #[error("argument `{value}` sits at type variable `{tyvar}` but is not a variable")]
    NonVariableAtTyvar { value: Value, tyvar: String },
}

/// What the checker learned about one call site.
#[derive(Clone, Debug, PartialEq)]
pub struct CallInfo {
    /// Preorder index of the call within its relation body.
    pub id: usize,
    pub subst: Subst,
    /// Caller variables free in the arguments, typed over the callee's
    /// type variables.
    pub generic_env: Result<Vec<(String, Type)>, NonGenericCall>,
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum CallTypeError {
    #[error("expected {expected} argument(s), found {found}")]
    Arity { expected: usize, found: usize },
    #[error("type variable `{tyvar}` would be both `{first}` and `{second}`")]
    Inconsistent { tyvar: String, first: Type, second: Type },
    #[error("expected an argument of type `{expected}`, found `{found}`")]
    Mismatch { expected: Type, found: Type },
}

/// First-order matching of declared parameter types against argument types.
pub fn infer_call_subst(sig: &RelSig, arg_types: &[Type]) -> Result<Subst, CallTypeError> {
    if sig.params.len() != arg_types.len() {
        return Err(CallTypeError::Arity {
            expected: sig.params.len(),
            found: arg_types.len(),
        });
    }
    let mut s = Subst::new();
    for (p, a) in sig.params.iter().zip(arg_types) {
        match_type(p, a, &sig.tyvars, &mut s, p, a)?;
    }
    let ordered = sig
        .tyvars
        .iter()
        .filter_map(|v| s.get(v).map(|t| (v.clone(), t.clone())))
        .collect();
    Ok(ordered)
}

fn match_type(
    pat: &Type,
    t: &Type,
    tyvars: &[String],
    s: &mut Subst,
    whole_pat: &Type,
    whole_t: &Type,
) -> Result<(), CallTypeError> {
    match (pat, t) {
        (Type::Var(v), _) if tyvars.contains(v) => match s.get(v) {
            Some(prev) if prev != t => Err(CallTypeError::Inconsistent {
                tyvar: v.clone(),
                first: prev.clone(),
                second: t.clone(),
            }),
            Some(_) => Ok(()),
            None => {
                s.insert(v.clone(), t.clone());
                Ok(())
            }
        },
        (Type::Unit, Type::Unit) => Ok(()),
        (Type::Sum(a, b), Type::Sum(c, d)) | (Type::Prod(a, b), Type::Prod(c, d)) => {
            match_type(a, c, tyvars, s, whole_pat, whole_t)?;
            match_type(b, d, tyvars, s, whole_pat, whole_t)
        }
        (Type::Var(a), Type::Var(b)) if a == b => Ok(()),
        _ => Err(CallTypeError::Mismatch {
            expected: whole_pat.clone(),
            found: whole_t.clone(),
        }),
    }
}

/// Computes the callee-generic type of every variable in `args`.
///
/// `param_types` are the callee's declared parameter types; the generic
/// type of a variable is the parameter sub-type at which it occurs.
pub fn generic_arg_env(
    args: &[Value],
    param_types: &[Type],
) -> Result<Vec<(String, Type)>, NonGenericCall> {
    let mut env: Vec<(String, Type)> = Vec::new();
    for (v, t) in args.iter().zip(param_types) {
        generic_walk(v, t, &mut env)?;
    }
    Ok(env)
}

fn generic_walk(v: &Value, pos: &Type, env: &mut Vec<(String, Type)>) -> Result<(), NonGenericCall> {
    match (v, pos) {
        (Value::Var(x), _) => {
            if let Some((_, prev)) = env.iter().find(|(y, _)| y == x) {
                if prev != pos {
                    return Err(NonGenericCall::Conflict {
                        var: x.clone(),
                        first: prev.clone(),
                        second: pos.clone(),
                    });
                }
            } else {
                env.push((x.clone(), pos.clone()));
            }
            Ok(())
        }
        (_, Type::Var(a)) => Err(NonGenericCall::NonVariableAtTyvar {
            value: v.clone(),
            tyvar: a.clone(),
        }),
        (Value::Left(_, inner), Type::Sum(a, _)) => generic_walk(inner, a, env),
        (Value::Right(_, inner), Type::Sum(_, b)) => generic_walk(inner, b, env),
        (Value::Pair(p, q), Type::Prod(a, b)) => {
            generic_walk(p, a, env)?;
            generic_walk(q, b, env)
        }
        // Remaining shapes are excluded by type checking.
        _ => Ok(()),
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
#[error("relation `{relation}`, at {path}: {message}")]
pub struct TypeError {
    pub relation: String,
    pub path: String,
    pub message: String,
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub struct TypeErrors(pub Vec<TypeError>);

impl fmt::Display for TypeErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "type error: {e}")?;
        }
        Ok(())
    }
}

pub fn check_type_valid(env: &TypeEnv, t: &Type) -> Result<(), String> {
    match t {
        Type::Unit => Ok(()),
        Type::Sum(a, b) | Type::Prod(a, b) => {
            check_type_valid(env, a)?;
            check_type_valid(env, b)
        }
        Type::Var(v) if env.tyvars.contains(v) => Ok(()),
        Type::Var(v) => Err(format!("unbound type variable `{v}`")),
    }
}

/// Type of `v` under `env`; `expected` resolves bare `left`/`right`.
pub fn type_of_value(env: &TypeEnv, v: &Value, expected: Option<&Type>) -> Result<Type, String> {
    let mut u = Unifier::default();
    let mut sums = Vec::new();
    let t = u.infer_value(env, v, &mut sums)?;
    if let Some(e) = expected {
        let e = u.import(e);
        u.unify(&t, &e)
            .map_err(|m| format!("`{v}` does not fit the expected type: {m}"))?;
    }
    u.resolve(&t)
        .ok_or_else(|| format!("cannot infer the type of `{v}`; add a `{{TYPE}}` annotation"))
}

/// Checks a whole program, returning a copy with annotations and call info.
pub fn check_program(p: &Program) -> Result<Program, TypeErrors> {
    let env = rel_env(p);
    let mut errors = Vec::new();
    let mut out = Program::default();
    for r in &p.relations {
        match check_relation(&env, r) {
            Ok(r) => out.relations.push(r),
            Err(mut es) => errors.append(&mut es),
        }
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(TypeErrors(errors))
    }
}

pub fn check_relation(relenv: &RelEnv, r: &RelationDef) -> Result<RelationDef, Vec<TypeError>> {
    let err = |path: &str, message: String| TypeError {
        relation: r.name.clone(),
        path: path.to_string(),
        message,
    };
    let mut errors = Vec::new();
    let mut env = TypeEnv::with_tyvars(&r.tyvars);
    for (x, t) in &r.params {
        if let Err(m) = check_type_valid(&env, t) {
            errors.push(err(&format!("parameter `{x}`"), m));
        }
        env.bind(x.clone(), t.clone());
    }
    for a in &r.tyvars {
        if !r.params.iter().any(|(_, t)| t.mentions(a)) {
            errors.push(err(
                "header",
                format!("type variable `{a}` does not occur in any parameter type"),
            ));
        }
    }
    if !errors.is_empty() {
        return Err(errors);
    }
    let mut ck = GoalChecker {
        relenv,
        relation: &r.name,
        errors: Vec::new(),
        next_call: 0,
    };
    let body = ck.check(&mut env, &r.body, "body");
    if ck.errors.is_empty() {
        Ok(RelationDef {
            body,
            ..r.clone()
        })
    } else {
        Err(ck.errors)
    }
}

/// Checks one goal against `relenv` and `env`, returning it annotated.
pub fn check_goal(relenv: &RelEnv, env: &TypeEnv, g: &Goal) -> Result<Goal, Vec<TypeError>> {
    let mut ck = GoalChecker {
        relenv,
        relation: "<goal>",
        errors: Vec::new(),
        next_call: 0,
    };
    let mut env = env.clone();
    let g = ck.check(&mut env, g, "goal");
    if ck.errors.is_empty() {
        Ok(g)
    } else {
        Err(ck.errors)
    }
}

struct GoalChecker<'a> {
    relenv: &'a RelEnv,
    relation: &'a str,
    errors: Vec<TypeError>,
    next_call: usize,
}

impl GoalChecker<'_> {
    fn fail(&mut self, path: &str, message: String) {
        self.errors.push(TypeError {
            relation: self.relation.to_string(),
            path: path.to_string(),
            message,
        });
    }

    fn check(&mut self, env: &mut TypeEnv, g: &Goal, path: &str) -> Goal {
        match g {
            Goal::Conj(a, b) | Goal::Disj(a, b) => {
                let kw = if matches!(g, Goal::Conj(..)) { "conj" } else { "disj" };
                let a = self.check(env, a, &format!("{path}/{kw}.0"));
                let b = self.check(env, b, &format!("{path}/{kw}.1"));
                if kw == "conj" {
                    Goal::conj(a, b)
                } else {
                    Goal::disj(a, b)
                }
            }
            Goal::Fresh { var, ty, body } => {
                let here = format!("{path}/fresh {var}");
                if let Err(m) = check_type_valid(env, ty) {
                    self.fail(&here, m);
                }
                let saved = env.vars.insert(var.clone(), ty.clone());
                let body = self.check(env, body, &here);
                match saved {
                    Some(t) => {
                        env.vars.insert(var.clone(), t);
                    }
                    None => {
                        env.vars.shift_remove(var);
                    }
                }
                Goal::fresh(var.clone(), ty.clone(), body)
            }
            Goal::Unify(a, b) | Goal::Disunify(a, b) => {
                let here = format!("{path}/{}", crate::syntax::render_goal(g));
                match self.check_pair(env, a, b) {
                    Ok((a, b)) => {
                        if matches!(g, Goal::Unify(..)) {
                            Goal::Unify(a, b)
                        } else {
                            Goal::Disunify(a, b)
                        }
                    }
                    Err(m) => {
                        self.fail(&here, m);
                        g.clone()
                    }
                }
            }
            Goal::Call(c) => {
                let id = self.next_call;
                self.next_call += 1;
                let here = format!("{path}/{}", crate::syntax::render_goal(g));
                match self.check_call(env, c, id) {
                    Ok(c) => Goal::Call(c),
                    Err(m) => {
                        self.fail(&here, m);
                        g.clone()
                    }
                }
            }
            Goal::Factor(_) => g.clone(),
        }
    }

    fn check_pair(&self, env: &TypeEnv, a: &Value, b: &Value) -> Result<(Value, Value), String> {
        let mut u = Unifier::default();
        let mut sums_a = Vec::new();
        let mut sums_b = Vec::new();
        let ta = u.infer_value(env, a, &mut sums_a)?;
        let tb = u.infer_value(env, b, &mut sums_b)?;
        u.unify(&ta, &tb).map_err(|m| {
            format!("`{a}` and `{b}` have no common type: {m}")
        })?;
        if u.resolve(&ta).is_none() {
            return Err(format!(
                "cannot infer the type of `{a}` and `{b}`; add a `{{TYPE}}` annotation"
            ));
        }
        let a = u.annotate(a, &mut sums_a.into_iter())?;
        let b = u.annotate(b, &mut sums_b.into_iter())?;
        Ok((a, b))
    }

    fn check_call(&self, env: &TypeEnv, c: &Call, id: usize) -> Result<Call, String> {
        let Some(sig) = self.relenv.get(&c.rel) else {
            return Err(format!("call to undefined relation `{}`", c.rel));
        };
        if sig.params.len() != c.args.len() {
            return Err(CallTypeError::Arity {
                expected: sig.params.len(),
                found: c.args.len(),
            }
            .to_string());
        }
        let mut u = Unifier::default();
        let metas: HashMap<String, usize> = sig
            .tyvars
            .iter()
            .map(|a| (a.clone(), u.fresh_meta(Some(a.clone()))))
            .collect();
        let mut all_sums = Vec::new();
        for (i, (arg, p)) in c.args.iter().zip(&sig.params).enumerate() {
            let mut sums = Vec::new();
            let ta = u.infer_value(env, arg, &mut sums)?;
            let tp = u.import_with(p, &metas);
            u.unify(&tp, &ta)
                .map_err(|m| format!("argument {} `{arg}` of `{}`: {m}", i + 1, c.rel))?;
            all_sums.push(sums);
        }
        let mut subst = Subst::new();
        for a in &sig.tyvars {
            match u.resolve(&IType::Meta(metas[a])) {
                Some(t) => {
                    subst.insert(a.clone(), t);
                }
                None => {
                    return Err(format!(
                        "cannot infer type variable `{a}` of `{}`; add annotations",
                        c.rel
                    ))
                }
            }
        }
        let mut args = Vec::new();
        for (arg, sums) in c.args.iter().zip(all_sums) {
            args.push(u.annotate(arg, &mut sums.into_iter())?);
        }
        let arg_types = args
            .iter()
            .map(|a| type_of_value(env, a, None))
            .collect::<Result<Vec<_>, _>>()?;
        let matched = infer_call_subst(sig, &arg_types).map_err(|e| e.to_string())?;
        assert_eq!(matched, subst, "call matching disagrees with unification");
        for (p, t) in sig.params.iter().zip(&arg_types) {
            assert_eq!(&apply_subst(p, &subst), t);
        }
        let generic_env = generic_arg_env(&args, &sig.params);
        Ok(Call {
            rel: c.rel.clone(),
            args,
            info: Some(Box::new(CallInfo {
                id,
                subst,
                generic_env,
            })),
        })
    }
}

// ---------------------------------------------------------------------------
// Unification over types with metavariables

#[derive(Clone, Debug, PartialEq, Eq)]
enum IType {
    Unit,
    Sum(Box<IType>, Box<IType>),
    Prod(Box<IType>, Box<IType>),
    Rigid(String),
    Meta(usize),
}

#[derive(Default)]
struct Unifier {
    bindings: Vec<Option<IType>>,
    origins: Vec<Option<String>>,
}

impl Unifier {
    fn fresh_meta(&mut self, origin: Option<String>) -> usize {
        self.bindings.push(None);
        self.origins.push(origin);
        self.bindings.len() - 1
    }

    fn import(&self, t: &Type) -> IType {
        self.import_with(t, &HashMap::new())
    }

    fn import_with(&self, t: &Type, metas: &HashMap<String, usize>) -> IType {
        match t {
            Type::Unit => IType::Unit,
            Type::Sum(a, b) => IType::Sum(
                Box::new(self.import_with(a, metas)),
                Box::new(self.import_with(b, metas)),
            ),
            Type::Prod(a, b) => IType::Prod(
                Box::new(self.import_with(a, metas)),
                Box::new(self.import_with(b, metas)),
            ),
            Type::Var(v) => match metas.get(v) {
                Some(&m) => IType::Meta(m),
                None => IType::Rigid(v.clone()),
            },
        }
    }

    fn shallow(&self, t: &IType) -> IType {
        let mut t = t.clone();
        while let IType::Meta(m) = t {
            match &self.bindings[m] {
                Some(b) => t = b.clone(),
                None => break,
            }
        }
        t
    }

    fn occurs(&self, m: usize, t: &IType) -> bool {
        match self.shallow(t) {
            IType::Meta(n) => n == m,
            IType::Sum(a, b) | IType::Prod(a, b) => self.occurs(m, &a) || self.occurs(m, &b),
            _ => false,
        }
    }

    fn unify(&mut self, a: &IType, b: &IType) -> Result<(), String> {
        let (a, b) = (self.shallow(a), self.shallow(b));
        match (&a, &b) {
            (IType::Meta(m), IType::Meta(n)) if m == n => Ok(()),
            (IType::Meta(m), t) | (t, IType::Meta(m)) => {
                if self.occurs(*m, t) {
                    return Err("infinite type".into());
                }
                self.bindings[*m] = Some(t.clone());
                Ok(())
            }
            (IType::Unit, IType::Unit) => Ok(()),
            (IType::Rigid(x), IType::Rigid(y)) if x == y => Ok(()),
            (IType::Sum(a1, a2), IType::Sum(b1, b2)) | (IType::Prod(a1, a2), IType::Prod(b1, b2)) => {
                self.unify(a1, b1)?;
                self.unify(a2, b2)
            }
            _ => Err(format!(
                "`{}` is not `{}`",
                self.show(&a),
                self.show(&b)
            )),
        }
    }

    /// Renders a partially solved type; unsolved parts print as the callee's
    /// type-variable name when known, `_` otherwise.
    fn show(&self, t: &IType) -> String {
        match self.shallow(t) {
            IType::Unit => "Unit".into(),
            IType::Sum(a, b) => format!("(Sum {} {})", self.show(&a), self.show(&b)),
            IType::Prod(a, b) => format!("(Prod {} {})", self.show(&a), self.show(&b)),
            IType::Rigid(v) => v,
            IType::Meta(m) => self.origins[m].clone().unwrap_or_else(|| "_".into()),
        }
    }

    fn resolve(&self, t: &IType) -> Option<Type> {
        Some(match self.shallow(t) {
            IType::Unit => Type::Unit,
            IType::Sum(a, b) => Type::sum(self.resolve(&a)?, self.resolve(&b)?),
            IType::Prod(a, b) => Type::prod(self.resolve(&a)?, self.resolve(&b)?),
            IType::Rigid(v) => Type::Var(v),
            IType::Meta(_) => return None,
        })
    }

    /// Infers a type for `v`, pushing the sum type of each `left`/`right`
    /// node in preorder onto `sums`.
    fn infer_value(&mut self, env: &TypeEnv, v: &Value, sums: &mut Vec<IType>) -> Result<IType, String> {
        match v {
            Value::Sole => Ok(IType::Unit),
            Value::Var(x) => env
                .vars
                .get(x)
                .map(|t| self.import(t))
                .ok_or_else(|| format!("unbound variable `{x}`")),
            Value::Left(annot, inner) | Value::Right(annot, inner) => {
                let is_left = matches!(v, Value::Left(..));
                let sum = match annot {
                    Some(t) => {
                        check_type_valid(env, t)?;
                        if !matches!(t, Type::Sum(..)) {
                            return Err(format!("annotation `{t}` on `{v}` is not a Sum type"));
                        }
                        self.import(t)
                    }
                    None => IType::Sum(
                        Box::new(IType::Meta(self.fresh_meta(None))),
                        Box::new(IType::Meta(self.fresh_meta(None))),
                    ),
                };
                sums.push(sum.clone());
                let ti = self.infer_value(env, inner, sums)?;
                let IType::Sum(l, r) = &sum else { unreachable!() };
                let side = if is_left { l } else { r };
                self.unify(side, &ti)
                    .map_err(|m| format!("in `{v}`: {m}"))?;
                Ok(sum)
            }
            Value::Pair(a, b) => {
                let ta = self.infer_value(env, a, sums)?;
                let tb = self.infer_value(env, b, sums)?;
                Ok(IType::Prod(Box::new(ta), Box::new(tb)))
            }
        }
    }

    fn annotate(&self, v: &Value, sums: &mut impl Iterator<Item = IType>) -> Result<Value, String> {
        Ok(match v {
            Value::Sole => Value::Sole,
            Value::Var(x) => Value::Var(x.clone()),
            Value::Left(_, inner) | Value::Right(_, inner) => {
                let s = sums.next().expect("one sum type per constructor");
                let t = self.resolve(&s).ok_or_else(|| {
                    format!("cannot infer the type of `{v}`; add a `{{TYPE}}` annotation")
                })?;
                let inner = Box::new(self.annotate(inner, sums)?);
                if matches!(v, Value::Left(..)) {
                    Value::Left(Some(t), inner)
                } else {
                    Value::Right(Some(t), inner)
                }
            }
            Value::Pair(a, b) => Value::pair(self.annotate(a, sums)?, self.annotate(b, sums)?),
        })
    }
}
