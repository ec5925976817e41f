//! Denotations: type enumeration, value indexing, goal weights, and the
//! least-fixpoint evaluator over dense relation tables.
//!
//! Values of a type are ordered lefts-then-rights for sums and row-major for
//! products; a table cell for arguments `v1..vn` sits at the row-major
//! position of their indices.
//!
//! The array evaluator turns each relation body into a plan once. `conj` and
//! `fresh` chains become a factor list summed over the bound variables
//! (eliminated one at a time, smallest intermediate first); `disj` adds
//! branch tables; leaf tables that do not depend on other relations are
//! computed once. Each fixpoint round only re-gathers call tables and
//! replays the products.

use std::collections::HashMap;

use indexmap::IndexMap;
use thiserror::Error;

use crate::semiring::{SemiringSpec, Weight, WeightParseError};
use crate::syntax::{Goal, Program, RelationDef, Type, Value};

/// Upper bound on the number of cells in any intermediate table.
pub const MAX_TABLE_CELLS: usize = 1 << 24;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error(transparent)]
    Weight(#[from] WeightParseError),
    #[error("relation `{0}` is polymorphic; lower the program first")]
    Polymorphic(String),
    #[error("type `{0}` is too large to enumerate")]
    TypeTooLarge(Type),
    #[error("relation `{rel}` needs an intermediate table of more than {MAX_TABLE_CELLS} cells")]
    TableTooLarge { rel: String },
    #[error("value `{value}` does not inhabit `{ty}`")]
    Mismatch { value: Value, ty: Type },
    #[error("index {index} is out of range for `{ty}` (size {size})")]
    OutOfRange { index: usize, ty: Type, size: usize },
    #[error("call to unknown relation `{0}`")]
    UnknownRelation(String),
    #[error("value `{0}` is missing its sum annotation")]
    Unannotated(Value),
    #[error("unbound variable `{0}`")]
    Unbound(String),
}

/// Number of values of a concrete type, or `None` on type variables or overflow.
pub fn try_type_size(t: &Type) -> Option<usize> {
    match t {
        Type::Unit => Some(1),
        Type::Sum(a, b) => try_type_size(a)?.checked_add(try_type_size(b)?),
        Type::Prod(a, b) => try_type_size(a)?.checked_mul(try_type_size(b)?),
        Type::Var(_) => None,
    }
}

/// `|t|`.
///
/// # Panics
/// If `t` mentions a type variable or its size overflows `usize`.
pub fn type_size(t: &Type) -> usize {
    try_type_size(t).unwrap_or_else(|| panic!("type_size on non-concrete or oversized type {t}"))
}

/// All values of `t` in canonical order.
pub fn enumerate_type(t: &Type) -> Vec<Value> {
    (0..type_size(t))
        .map(|i| index_value(i, t).expect("index in range"))
        .collect()
}

pub fn value_index(v: &Value, t: &Type) -> Result<usize, EvalError> {
    let mismatch = || EvalError::Mismatch {
        value: v.clone(),
        ty: t.clone(),
    };
    match (v, t) {
        (Value::Sole, Type::Unit) => Ok(0),
        (Value::Left(_, inner), Type::Sum(a, _)) => value_index(inner, a).map_err(|_| mismatch()),
        (Value::Right(_, inner), Type::Sum(a, b)) => {
            let off = try_type_size(a).ok_or_else(|| EvalError::TypeTooLarge(t.clone()))?;
            Ok(off + value_index(inner, b).map_err(|_| mismatch())?)
        }
        (Value::Pair(p, q), Type::Prod(a, b)) => {
            let n2 = try_type_size(b).ok_or_else(|| EvalError::TypeTooLarge(t.clone()))?;
            let i = value_index(p, a).map_err(|_| mismatch())?;
            let j = value_index(q, b).map_err(|_| mismatch())?;
            Ok(i * n2 + j)
        }
        _ => Err(mismatch()),
    }
}

pub fn index_value(i: usize, t: &Type) -> Result<Value, EvalError> {
    let size = try_type_size(t).ok_or_else(|| EvalError::TypeTooLarge(t.clone()))?;
    if i >= size {
        return Err(EvalError::OutOfRange {
            index: i,
            ty: t.clone(),
            size,
        });
    }
    Ok(match t {
        Type::Unit => Value::Sole,
        Type::Sum(a, b) => {
            let n1 = type_size(a);
            if i < n1 {
                Value::left(index_value(i, a)?)
            } else {
                Value::right(index_value(i - n1, b)?)
            }
        }
        Type::Prod(a, b) => {
            let n2 = type_size(b);
            Value::pair(index_value(i / n2, a)?, index_value(i % n2, b)?)
        }
        Type::Var(_) => unreachable!("size check rejects type variables"),
    })
}

/// Bindings of variables to concrete values.
pub type ValueEnv = IndexMap<String, Value>;

/// Substitutes `env` into `v`; the result carries no annotations.
///
/// # Panics
/// On a variable missing from `env`.
pub fn eval_value(v: &Value, env: &ValueEnv) -> Value {
    match v {
        Value::Sole => Value::Sole,
        Value::Left(_, inner) => Value::left(eval_value(inner, env)),
        Value::Right(_, inner) => Value::right(eval_value(inner, env)),
        Value::Pair(a, b) => Value::pair(eval_value(a, env), eval_value(b, env)),
        Value::Var(x) => env
            .get(x)
            .unwrap_or_else(|| panic!("unbound variable `{x}`"))
            .strip_annotations(),
    }
}

/// Dense table of weights over a relation's argument grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RelTable {
    pub rel: String,
    pub params: Vec<(String, Type)>,
    pub sizes: Vec<usize>,
    pub cells: Vec<Weight>,
}

impl RelTable {
    pub fn filled(rel: &RelationDef, w: Weight) -> Result<RelTable, EvalError> {
        let mut sizes = Vec::new();
        let mut total: usize = 1;
        for (_, t) in &rel.params {
            if !t.is_concrete() {
                return Err(EvalError::Polymorphic(rel.name.clone()));
            }
            let n = try_type_size(t).ok_or_else(|| EvalError::TypeTooLarge(t.clone()))?;
            total = total
                .checked_mul(n)
                .filter(|&c| c <= MAX_TABLE_CELLS)
                .ok_or_else(|| EvalError::TableTooLarge {
                    rel: rel.name.clone(),
                })?;
            sizes.push(n);
        }
        Ok(RelTable {
            rel: rel.name.clone(),
            params: rel.params.clone(),
            sizes,
            cells: vec![w; total],
        })
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.sizes.len());
        idx.iter().zip(&self.sizes).fold(0, |acc, (&i, &n)| {
            assert!(i < n, "index {i} out of range {n}");
            acc * n + i
        })
    }

    pub fn get(&self, idx: &[usize]) -> Weight {
        self.cells[self.offset(idx)]
    }

    pub fn get_values(&self, values: &[Value]) -> Result<Weight, EvalError> {
        let idx = values
            .iter()
            .zip(&self.params)
            .map(|(v, (_, t))| value_index(v, t))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.get(&idx))
    }

    /// Grid coordinates of cell `offset`.
    pub fn coords(&self, mut offset: usize) -> Vec<usize> {
        let mut out = vec![0; self.sizes.len()];
        for k in (0..self.sizes.len()).rev() {
            out[k] = offset % self.sizes[k];
            offset /= self.sizes[k];
        }
        out
    }

    /// Every cell with its argument values, in canonical order.
    pub fn rows(&self) -> impl Iterator<Item = (Vec<Value>, Weight)> + '_ {
        self.cells.iter().enumerate().map(move |(o, &w)| {
            let vals = self
                .coords(o)
                .into_iter()
                .zip(&self.params)
                .map(|(i, (_, t))| index_value(i, t).expect("in range"))
                .collect();
            (vals, w)
        })
    }
}

/// Pointwise goal weight, following the denotation equations directly.
///
/// `tables` supplies the weights of called relations; `env` must bind every
/// free variable of `g` to a concrete value of its type.
pub fn eval_goal(
    g: &Goal,
    tables: &HashMap<String, RelTable>,
    env: &ValueEnv,
    semiring: &SemiringSpec,
) -> Result<Weight, EvalError> {
    Ok(match g {
        Goal::Conj(a, b) => {
            let wa = eval_goal(a, tables, env, semiring)?;
            if semiring.is_zero(wa) {
                return Ok(semiring.zero);
            }
            semiring.mul(wa, eval_goal(b, tables, env, semiring)?)
        }
        Goal::Disj(a, b) => semiring.add(
            eval_goal(a, tables, env, semiring)?,
            eval_goal(b, tables, env, semiring)?,
        ),
        Goal::Fresh { var, ty, body } => {
            let n = try_type_size(ty).ok_or_else(|| EvalError::TypeTooLarge(ty.clone()))?;
            let mut inner = env.clone();
            let mut acc = semiring.zero;
            for i in 0..n {
                inner.insert(var.clone(), index_value(i, ty)?);
                acc = semiring.add(acc, eval_goal(body, tables, &inner, semiring)?);
            }
            acc
        }
        Goal::Unify(a, b) | Goal::Disunify(a, b) => {
            let same = eval_value(a, env) == eval_value(b, env);
            if same == matches!(g, Goal::Unify(..)) {
                semiring.one
            } else {
                semiring.zero
            }
        }
        Goal::Call(c) => {
            let t = tables
                .get(&c.rel)
                .ok_or_else(|| EvalError::UnknownRelation(c.rel.clone()))?;
            let vals: Vec<Value> = c.args.iter().map(|a| eval_value(a, env)).collect();
            t.get_values(&vals)?
        }
        Goal::Factor(lit) => semiring.parse_weight(lit)?,
    })
}

// ---------------------------------------------------------------------------
// Dense tables over numbered variables

type VarId = u32;

#[derive(Clone, Debug, PartialEq)]
struct Table {
    /// Sorted ascending; the first variable is the most significant axis.
    vars: Vec<VarId>,
    dims: Vec<usize>,
    cells: Vec<Weight>,
}

impl Table {
    fn scalar(w: Weight) -> Table {
        Table {
            vars: Vec::new(),
            dims: Vec::new(),
            cells: vec![w],
        }
    }

    fn strides(&self) -> Vec<usize> {
        let mut s = vec![0; self.dims.len()];
        let mut acc = 1;
        for k in (0..self.dims.len()).rev() {
            s[k] = acc;
            acc *= self.dims[k];
        }
        s
    }

    /// Strides of this table's cells along each axis of `target`.
    fn strides_in(&self, target: &[VarId]) -> Vec<usize> {
        let own = self.strides();
        target
            .iter()
            .map(|v| match self.vars.binary_search(v) {
                Ok(k) => own[k],
                Err(_) => 0,
            })
            .collect()
    }
}

fn union_axes(tables: &[&Table]) -> (Vec<VarId>, Vec<usize>) {
    let mut pairs: Vec<(VarId, usize)> = Vec::new();
    for t in tables {
        for (v, d) in t.vars.iter().zip(&t.dims) {
            if !pairs.iter().any(|(w, _)| w == v) {
                pairs.push((*v, *d));
            }
        }
    }
    pairs.sort_unstable();
    pairs.into_iter().unzip()
}

fn checked_cells(dims: &[usize]) -> Option<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= MAX_TABLE_CELLS)
}

/// Calls `f(out_index, operand_offsets)` for each cell of the grid `dims`.
fn odometer(dims: &[usize], strides: &[Vec<usize>], mut f: impl FnMut(usize, &[usize])) {
    let total: usize = dims.iter().product();
    let mut digits = vec![0usize; dims.len()];
    let mut offs = vec![0usize; strides.len()];
    for out in 0..total {
        f(out, &offs);
        for k in (0..dims.len()).rev() {
            digits[k] += 1;
            for (o, s) in offs.iter_mut().zip(strides) {
                *o += s[k];
            }
            if digits[k] < dims[k] {
                break;
            }
            for (o, s) in offs.iter_mut().zip(strides) {
                *o -= s[k] * dims[k];
            }
            digits[k] = 0;
        }
    }
}

fn combine(
    tables: &[&Table],
    op: impl Fn(Weight, Weight) -> Weight,
    init: Weight,
) -> Option<Table> {
    let (vars, dims) = union_axes(tables);
    let n = checked_cells(&dims)?;
    let strides: Vec<Vec<usize>> = tables.iter().map(|t| t.strides_in(&vars)).collect();
    let mut cells = Vec::with_capacity(n);
    odometer(&dims, &strides, |_, offs| {
        let w = tables
            .iter()
            .zip(offs)
            .fold(init, |acc, (t, &o)| op(acc, t.cells[o]));
        cells.push(w);
    });
    Some(Table { vars, dims, cells })
}

fn marginalize(t: &Table, var: VarId, sr: &SemiringSpec) -> Table {
    let Ok(k) = t.vars.binary_search(&var) else {
        return t.clone();
    };
    let strides = t.strides();
    let mut vars = t.vars.clone();
    let mut dims = t.dims.clone();
    vars.remove(k);
    let n = dims.remove(k);
    let step = strides[k];
    let mut outer = strides.clone();
    outer.remove(k);
    let mut cells = Vec::with_capacity(dims.iter().product());
    odometer(&dims, &[outer], |_, offs| {
        let base = offs[0];
        let mut acc = sr.zero;
        for j in 0..n {
            acc = sr.add(acc, t.cells[base + j * step]);
        }
        cells.push(acc);
    });
    Table { vars, dims, cells }
}

// ---------------------------------------------------------------------------
// Compiled values and plans

/// Index arithmetic for a value whose variables are numbered.
#[derive(Clone, Debug)]
enum IndexExpr {
    Const(usize),
    Var(VarId),
    Offset(usize, Box<IndexExpr>),
    Pair(Box<IndexExpr>, usize, Box<IndexExpr>),
}

impl IndexExpr {
    fn eval(&self, lookup: &impl Fn(VarId) -> usize) -> usize {
        match self {
            IndexExpr::Const(c) => *c,
            IndexExpr::Var(v) => lookup(*v),
            IndexExpr::Offset(o, e) => o + e.eval(lookup),
            IndexExpr::Pair(a, n, b) => a.eval(lookup) * n + b.eval(lookup),
        }
    }
}

#[derive(Clone, Debug)]
enum Plan {
    Const(Table),
    /// Cell `i` of the result is cell `gather[i]` of relation `rel`.
    Call {
        rel: usize,
        vars: Vec<VarId>,
        dims: Vec<usize>,
        gather: Vec<usize>,
    },
    /// Product of `factors`, summed over `elim` in that order.
    Product {
        factors: Vec<Plan>,
        elim: Vec<(VarId, usize)>,
    },
    Sum(Vec<Plan>),
}

impl Plan {
    fn axes(&self) -> Vec<(VarId, usize)> {
        match self {
            Plan::Const(t) => t.vars.iter().copied().zip(t.dims.iter().copied()).collect(),
            Plan::Call { vars, dims, .. } => vars.iter().copied().zip(dims.iter().copied()).collect(),
            Plan::Product { factors, elim } => {
                let mut out: Vec<(VarId, usize)> = Vec::new();
                for f in factors {
                    for a in f.axes() {
                        if !out.contains(&a) && !elim.iter().any(|(v, _)| *v == a.0) {
                            out.push(a);
                        }
                    }
                }
                out.sort_unstable();
                out
            }
            Plan::Sum(branches) => {
                let mut out: Vec<(VarId, usize)> = Vec::new();
                for b in branches {
                    for a in b.axes() {
                        if !out.contains(&a) {
                            out.push(a);
                        }
                    }
                }
                out.sort_unstable();
                out
            }
        }
    }

    fn is_const(&self) -> bool {
        matches!(self, Plan::Const(_))
    }

    fn run(&self, tables: &[RelTable], sr: &SemiringSpec) -> Option<Table> {
        match self {
            Plan::Const(t) => Some(t.clone()),
            Plan::Call {
                rel,
                vars,
                dims,
                gather,
            } => {
                let src = &tables[*rel].cells;
                Some(Table {
                    vars: vars.clone(),
                    dims: dims.clone(),
                    cells: gather.iter().map(|&j| src[j]).collect(),
                })
            }
            Plan::Product { factors, elim } => {
                let mut live: Vec<Table> = factors
                    .iter()
                    .map(|f| f.run(tables, sr))
                    .collect::<Option<_>>()?;
                for &(v, n) in elim {
                    let (with, without): (Vec<Table>, Vec<Table>) =
                        live.into_iter().partition(|t| t.vars.binary_search(&v).is_ok());
                    live = without;
                    if with.is_empty() {
                        if !sr.idempotent_add {
                            live.push(Table::scalar(sr.repeat_add(sr.one, n)));
                        }
                        continue;
                    }
                    let refs: Vec<&Table> = with.iter().collect();
                    let joined = combine(&refs, |a, b| sr.mul(a, b), sr.one)?;
                    live.push(marginalize(&joined, v, sr));
                }
                let refs: Vec<&Table> = live.iter().collect();
                combine(&refs, |a, b| sr.mul(a, b), sr.one)
            }
            Plan::Sum(branches) => {
                let parts: Vec<Table> = branches
                    .iter()
                    .map(|b| b.run(tables, sr))
                    .collect::<Option<_>>()?;
                let refs: Vec<&Table> = parts.iter().collect();
                combine(&refs, |a, b| sr.add(a, b), sr.zero)
            }
        }
    }
}

/// Greedy elimination order: repeatedly pick the variable whose joined
/// factor table is smallest.
fn elimination_order(mut factor_axes: Vec<Vec<(VarId, usize)>>, mut pending: Vec<(VarId, usize)>) -> Vec<(VarId, usize)> {
    let mut order = Vec::new();
    while !pending.is_empty() {
        let mut best: Option<(u128, usize)> = None;
        for (pi, &(v, _)) in pending.iter().enumerate() {
            let mut axes: Vec<(VarId, usize)> = Vec::new();
            for f in factor_axes.iter().filter(|f| f.iter().any(|(w, _)| *w == v)) {
                for a in f {
                    if !axes.contains(a) {
                        axes.push(*a);
                    }
                }
            }
            let cost: u128 = axes.iter().map(|(_, d)| *d as u128).product();
            if best.is_none_or(|(c, _)| cost < c) {
                best = Some((cost, pi));
            }
        }
        let (_, pi) = best.unwrap();
        let (v, n) = pending.remove(pi);
        let (with, mut without): (Vec<_>, Vec<_>) = factor_axes
            .into_iter()
            .partition(|f| f.iter().any(|(w, _)| *w == v));
        if !with.is_empty() {
            let mut merged: Vec<(VarId, usize)> = Vec::new();
            for f in with {
                for a in f {
                    if a.0 != v && !merged.contains(&a) {
                        merged.push(a);
                    }
                }
            }
            without.push(merged);
        }
        factor_axes = without;
        order.push((v, n));
    }
    order
}

struct RelCompiler<'a> {
    rel_name: &'a str,
    rel_index: &'a IndexMap<String, usize>,
    rel_params: &'a [Vec<Type>],
    sr: &'a SemiringSpec,
    scopes: Vec<(String, VarId, Type, usize)>,
    next_var: VarId,
}

impl RelCompiler<'_> {
    fn too_large(&self) -> EvalError {
        EvalError::TableTooLarge {
            rel: self.rel_name.to_string(),
        }
    }

    fn lookup(&self, x: &str) -> Result<&(String, VarId, Type, usize), EvalError> {
        self.scopes
            .iter()
            .rev()
            .find(|(y, ..)| y == x)
            .ok_or_else(|| EvalError::Unbound(x.to_string()))
    }

    fn bind(&mut self, x: &str, t: &Type) -> Result<(VarId, usize), EvalError> {
        if !t.is_concrete() {
            return Err(EvalError::Polymorphic(self.rel_name.to_string()));
        }
        let n = try_type_size(t).ok_or_else(|| EvalError::TypeTooLarge(t.clone()))?;
        let id = self.next_var;
        self.next_var += 1;
        self.scopes.push((x.to_string(), id, t.clone(), n));
        Ok((id, n))
    }

    fn value_type(&self, v: &Value) -> Result<Type, EvalError> {
        Ok(match v {
            Value::Sole => Type::Unit,
            Value::Left(Some(t), _) | Value::Right(Some(t), _) => t.clone(),
            Value::Left(None, _) | Value::Right(None, _) => return Err(EvalError::Unannotated(v.clone())),
            Value::Pair(a, b) => Type::prod(self.value_type(a)?, self.value_type(b)?),
            Value::Var(x) => self.lookup(x)?.2.clone(),
        })
    }

    fn index_expr(&self, v: &Value) -> Result<IndexExpr, EvalError> {
        if v.is_concrete() {
            let t = self.value_type(v)?;
            return Ok(IndexExpr::Const(value_index(v, &t)?));
        }
        Ok(match v {
            Value::Var(x) => IndexExpr::Var(self.lookup(x)?.1),
            Value::Left(_, inner) => self.index_expr(inner)?,
            Value::Right(Some(Type::Sum(a, _)), inner) => {
                let off = try_type_size(a).ok_or_else(|| EvalError::TypeTooLarge((**a).clone()))?;
                IndexExpr::Offset(off, Box::new(self.index_expr(inner)?))
            }
            Value::Right(..) => return Err(EvalError::Unannotated(v.clone())),
            Value::Pair(a, b) => {
                let tb = self.value_type(b)?;
                let n = try_type_size(&tb).ok_or(EvalError::TypeTooLarge(tb))?;
                IndexExpr::Pair(Box::new(self.index_expr(a)?), n, Box::new(self.index_expr(b)?))
            }
            Value::Sole => unreachable!("concrete"),
        })
    }

    fn axes_of(&self, vals: &[&Value]) -> Result<(Vec<VarId>, Vec<usize>), EvalError> {
        let mut names = Vec::new();
        for v in vals {
            v.collect_vars(&mut names);
        }
        let mut axes: Vec<(VarId, usize)> = names
            .iter()
            .map(|x| self.lookup(x).map(|e| (e.1, e.3)))
            .collect::<Result<_, _>>()?;
        axes.sort_unstable();
        Ok(axes.into_iter().unzip())
    }

    /// Runs `f` on every assignment of `vars`, in row-major order.
    fn for_each_assignment(
        &self,
        vars: &[VarId],
        dims: &[usize],
        mut f: impl FnMut(&dyn Fn(VarId) -> usize),
    ) -> Result<(), EvalError> {
        let total = checked_cells(dims).ok_or_else(|| self.too_large())?;
        let mut digits = vec![0usize; dims.len()];
        for _ in 0..total {
            let lookup = |v: VarId| digits[vars.binary_search(&v).expect("axis")];
            f(&lookup);
            for k in (0..dims.len()).rev() {
                digits[k] += 1;
                if digits[k] < dims[k] {
                    break;
                }
                digits[k] = 0;
            }
        }
        Ok(())
    }

    fn compile_goal(&mut self, g: &Goal) -> Result<Plan, EvalError> {
        let mut elim = Vec::new();
        let mut factors = Vec::new();
        let depth = self.scopes.len();
        self.collect(g, &mut elim, &mut factors)?;
        self.scopes.truncate(depth);
        if elim.is_empty() && factors.len() == 1 {
            return Ok(factors.pop().unwrap());
        }
        let axes = factors.iter().map(|f| f.axes()).collect();
        let elim = elimination_order(axes, elim);
        let plan = Plan::Product { factors, elim };
        self.fold_constant(plan)
    }

    fn fold_constant(&self, plan: Plan) -> Result<Plan, EvalError> {
        let constant = match &plan {
            Plan::Product { factors, .. } | Plan::Sum(factors) => factors.iter().all(Plan::is_const),
            _ => false,
        };
        if constant {
            let t = plan.run(&[], self.sr).ok_or_else(|| self.too_large())?;
            Ok(Plan::Const(t))
        } else {
            Ok(plan)
        }
    }

    fn collect(
        &mut self,
        g: &Goal,
        elim: &mut Vec<(VarId, usize)>,
        factors: &mut Vec<Plan>,
    ) -> Result<(), EvalError> {
        match g {
            Goal::Conj(a, b) => {
                self.collect(a, elim, factors)?;
                self.collect(b, elim, factors)
            }
            Goal::Fresh { var, ty, body } => {
                let (id, n) = self.bind(var, ty)?;
                elim.push((id, n));
                self.collect(body, elim, factors)
            }
            _ => {
                let p = self.compile_atom(g)?;
                factors.push(p);
                Ok(())
            }
        }
    }

    fn compile_atom(&mut self, g: &Goal) -> Result<Plan, EvalError> {
        match g {
            Goal::Disj(..) => {
                let mut branches = Vec::new();
                let mut cur = g;
                while let Goal::Disj(a, b) = cur {
                    branches.push(self.compile_goal(a)?);
                    cur = b;
                }
                branches.push(self.compile_goal(cur)?);
                self.fold_constant(Plan::Sum(branches))
            }
            Goal::Unify(a, b) | Goal::Disunify(a, b) => {
                let want_equal = matches!(g, Goal::Unify(..));
                let (vars, dims) = self.axes_of(&[a, b])?;
                let ea = self.index_expr(a)?;
                let eb = self.index_expr(b)?;
                let mut cells = Vec::new();
                self.for_each_assignment(&vars, &dims, |lk| {
                    let eq = ea.eval(&lk) == eb.eval(&lk);
                    cells.push(if eq == want_equal { self.sr.one } else { self.sr.zero });
                })?;
                Ok(Plan::Const(Table { vars, dims, cells }))
            }
            Goal::Factor(lit) => Ok(Plan::Const(Table::scalar(self.sr.parse_weight(lit)?))),
            Goal::Call(c) => {
                let &rel = self
                    .rel_index
                    .get(&c.rel)
                    .ok_or_else(|| EvalError::UnknownRelation(c.rel.clone()))?;
                let ptypes = &self.rel_params[rel];
                let mut strides = vec![1usize; ptypes.len()];
                for k in (0..ptypes.len().saturating_sub(1)).rev() {
                    strides[k] = strides[k + 1] * type_size(&ptypes[k + 1]);
                }
                let refs: Vec<&Value> = c.args.iter().collect();
                let (vars, dims) = self.axes_of(&refs)?;
                let exprs = c
                    .args
                    .iter()
                    .map(|a| self.index_expr(a))
                    .collect::<Result<Vec<_>, _>>()?;
                let mut gather = Vec::new();
                self.for_each_assignment(&vars, &dims, |lk| {
                    gather.push(exprs.iter().zip(&strides).map(|(e, s)| e.eval(&lk) * s).sum());
                })?;
                Ok(Plan::Call {
                    rel,
                    vars,
                    dims,
                    gather,
                })
            }
            Goal::Conj(..) | Goal::Fresh { .. } => self.compile_goal(g),
        }
    }
}

struct CompiledRel {
    plan: Plan,
    nparams: usize,
}

/// Result of a fixpoint run.
#[derive(Clone, Debug)]
pub struct FixpointResult {
    pub tables: Vec<RelTable>,
    /// Number of evaluation rounds performed.
    pub iterations: usize,
    pub converged: bool,
    /// A real weight overflowed to infinity or NaN; iteration stopped.
    pub overflowed: bool,
}

impl FixpointResult {
    pub fn table(&self, rel: &str) -> Option<&RelTable> {
        self.tables.iter().find(|t| t.rel == rel)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixpointOptions {
    pub max_iters: usize,
}

impl Default for FixpointOptions {
    fn default() -> Self {
        FixpointOptions { max_iters: 10_000 }
    }
}

/// Compiled monomorphic program, ready for fixpoint iteration.
pub struct Evaluator {
    semiring: SemiringSpec,
    empty: Vec<RelTable>,
    rels: Vec<CompiledRel>,
}

impl Evaluator {
    /// Compiles a type-checked monomorphic program. Weight literals are
    /// parsed here, so a literal foreign to `semiring` fails at load time.
    pub fn new(program: &Program, semiring: &SemiringSpec) -> Result<Evaluator, EvalError> {
        let rel_index: IndexMap<String, usize> = program
            .relations
            .iter()
            .enumerate()
            .map(|(i, r)| (r.name.clone(), i))
            .collect();
        let mut empty = Vec::new();
        for r in &program.relations {
            if r.is_polymorphic() {
                return Err(EvalError::Polymorphic(r.name.clone()));
            }
            empty.push(RelTable::filled(r, semiring.zero)?);
        }
        let rel_params: Vec<Vec<Type>> = program.relations.iter().map(|r| r.param_types()).collect();
        let mut rels = Vec::new();
        for r in &program.relations {
            let mut c = RelCompiler {
                rel_name: &r.name,
                rel_index: &rel_index,
                rel_params: &rel_params,
                sr: semiring,
                scopes: Vec::new(),
                next_var: 0,
            };
            for (x, t) in &r.params {
                c.bind(x, t)?;
            }
            let plan = c.compile_goal(&r.body)?;
            rels.push(CompiledRel {
                plan,
                nparams: r.params.len(),
            });
        }
        Ok(Evaluator {
            semiring: semiring.clone(),
            empty,
            rels,
        })
    }

    pub fn semiring(&self) -> &SemiringSpec {
        &self.semiring
    }

    /// All tables at the semiring zero (every relation fails).
    pub fn initial_tables(&self) -> Vec<RelTable> {
        self.empty.clone()
    }

    /// One relation's table under the given relation tables.
    pub fn eval_relation(&self, index: usize, tables: &[RelTable]) -> Result<RelTable, EvalError> {
        let sr = &self.semiring;
        let target = &self.empty[index];
        let too_large = || EvalError::TableTooLarge {
            rel: target.rel.clone(),
        };
        let body = self.rels[index].plan.run(tables, sr).ok_or_else(too_large)?;
        let vars: Vec<VarId> = (0..self.rels[index].nparams as VarId).collect();
        let strides = body.strides_in(&vars);
        let mut cells = Vec::with_capacity(target.cells.len());
        odometer(&target.sizes, &[strides], |_, offs| cells.push(body.cells[offs[0]]));
        Ok(RelTable {
            cells,
            ..target.clone()
        })
    }

    /// One Jacobi round: every relation evaluated against `tables`.
    pub fn step(&self, tables: &[RelTable]) -> Result<Vec<RelTable>, EvalError> {
        (0..self.rels.len()).map(|i| self.eval_relation(i, tables)).collect()
    }

    pub fn tables_equal(&self, a: &[RelTable], b: &[RelTable]) -> bool {
        a.iter().zip(b).all(|(x, y)| {
            x.cells
                .iter()
                .zip(&y.cells)
                .all(|(&p, &q)| self.semiring.approx_eq(p, q))
        })
    }

    pub fn run(&self, opts: &FixpointOptions) -> Result<FixpointResult, EvalError> {
        self.run_observed(opts, |_, _| {})
    }

    /// Like [`Evaluator::run`], calling `observe(round, tables)` after each round.
    pub fn run_observed(
        &self,
        opts: &FixpointOptions,
        mut observe: impl FnMut(usize, &[RelTable]),
    ) -> Result<FixpointResult, EvalError> {
        let mut cur = self.initial_tables();
        for round in 1..=opts.max_iters.max(1) {
            let next = self.step(&cur)?;
            observe(round, &next);
            let overflowed = next
                .iter()
                .flat_map(|t| &t.cells)
                .any(|w| matches!(w, Weight::Real(x) if !x.is_finite()));
            let done = !overflowed && self.tables_equal(&cur, &next);
            cur = next;
            if done || overflowed {
                return Ok(FixpointResult {
                    tables: cur,
                    iterations: round,
                    converged: done,
                    overflowed,
                });
            }
        }
        Ok(FixpointResult {
            tables: cur,
            iterations: opts.max_iters.max(1),
            converged: false,
            overflowed: false,
        })
    }
}

/// Least fixpoint of a type-checked monomorphic program.
pub fn fixpoint(
    program: &Program,
    semiring: &SemiringSpec,
    opts: &FixpointOptions,
) -> Result<FixpointResult, EvalError> {
    Evaluator::new(program, semiring)?.run(opts)
}
