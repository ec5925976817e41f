//! AST, reader and pretty-printer for `.skn` programs.
//!
//! Surface forms accepted beyond the core grammar: n-ary `conj`/`disj`
//! (right-nested), multi-binder `fresh` (nested), optional `{T}` annotations
//! on `left`/`right`, optional `forall a b .` (or `∀`) type-variable lists,
//! `Pair` as an alias of `Prod`, grouped parameter lists and `;` comments.

use std::collections::HashSet;
use std::fmt;

use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Type {
    Unit,
    Sum(Box<Type>, Box<Type>),
    Prod(Box<Type>, Box<Type>),
    Var(String),
}

impl Type {
    pub fn sum(a: Type, b: Type) -> Type {
        Type::Sum(Box::new(a), Box::new(b))
    }

    pub fn prod(a: Type, b: Type) -> Type {
        Type::Prod(Box::new(a), Box::new(b))
    }

    pub fn var(name: impl Into<String>) -> Type {
        Type::Var(name.into())
    }

    pub fn is_concrete(&self) -> bool {
        match self {
            Type::Unit => true,
            Type::Sum(a, b) | Type::Prod(a, b) => a.is_concrete() && b.is_concrete(),
            Type::Var(_) => false,
        }
    }

    pub fn mentions(&self, alpha: &str) -> bool {
        match self {
            Type::Unit => false,
            Type::Sum(a, b) | Type::Prod(a, b) => a.mentions(alpha) || b.mentions(alpha),
            Type::Var(v) => v == alpha,
        }
    }
}

/// Type variables of `t` in first-occurrence order, without duplicates.
pub fn free_type_vars(t: &Type) -> Vec<String> {
    let mut out = Vec::new();
    collect_type_vars(t, &mut out);
    out
}

pub(crate) fn collect_type_vars(t: &Type, out: &mut Vec<String>) {
    match t {
        Type::Unit => {}
        Type::Sum(a, b) | Type::Prod(a, b) => {
            collect_type_vars(a, out);
            collect_type_vars(b, out);
        }
        Type::Var(v) => {
            if !out.iter().any(|x| x == v) {
                out.push(v.clone());
            }
        }
    }
}

impl fmt::Display for Type {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Type::Unit => f.write_str("Unit"),
            Type::Sum(a, b) => write!(f, "(Sum {a} {b})"),
            Type::Prod(a, b) => write!(f, "(Prod {a} {b})"),
            Type::Var(v) => f.write_str(v),
        }
    }
}

/// A value expression. `Left`/`Right` carry the full sum type once known.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Value {
    Sole,
    Left(Option<Type>, Box<Value>),
    Right(Option<Type>, Box<Value>),
    Pair(Box<Value>, Box<Value>),
    Var(String),
}

impl Value {
    pub fn left(v: Value) -> Value {
        Value::Left(None, Box::new(v))
    }

    pub fn right(v: Value) -> Value {
        Value::Right(None, Box::new(v))
    }

    pub fn pair(a: Value, b: Value) -> Value {
        Value::Pair(Box::new(a), Box::new(b))
    }

    pub fn var(name: impl Into<String>) -> Value {
        Value::Var(name.into())
    }

    /// No variables anywhere.
    pub fn is_concrete(&self) -> bool {
        match self {
            Value::Sole => true,
            Value::Left(_, v) | Value::Right(_, v) => v.is_concrete(),
            Value::Pair(a, b) => a.is_concrete() && b.is_concrete(),
            Value::Var(_) => false,
        }
    }

    /// Variables in first-occurrence order, without duplicates.
    pub fn free_vars(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_vars(&mut out);
        out
    }

    pub(crate) fn collect_vars(&self, out: &mut Vec<String>) {
        match self {
            Value::Sole => {}
            Value::Left(_, v) | Value::Right(_, v) => v.collect_vars(out),
            Value::Pair(a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
            Value::Var(x) => {
                if !out.iter().any(|y| y == x) {
                    out.push(x.clone());
                }
            }
        }
    }

    /// Copy with every sum annotation removed.
    pub fn strip_annotations(&self) -> Value {
        match self {
            Value::Sole => Value::Sole,
            Value::Left(_, v) => Value::Left(None, Box::new(v.strip_annotations())),
            Value::Right(_, v) => Value::Right(None, Box::new(v.strip_annotations())),
            Value::Pair(a, b) => Value::pair(a.strip_annotations(), b.strip_annotations()),
            Value::Var(x) => Value::Var(x.clone()),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Sole => f.write_str("sole"),
            Value::Left(None, v) => write!(f, "(left {v})"),
            Value::Left(Some(t), v) => write!(f, "(left {{{t}}} {v})"),
            Value::Right(None, v) => write!(f, "(right {v})"),
            Value::Right(Some(t), v) => write!(f, "(right {{{t}}} {v})"),
            Value::Pair(a, b) => write!(f, "(pair {a} {b})"),
            Value::Var(x) => f.write_str(x),
        }
    }
}

/// Renders a concrete value without annotations, e.g. `(pair (right sole) sole)`.
///
/// # Panics
/// If `v` contains a variable.
pub fn render_value(v: &Value) -> String {
    assert!(v.is_concrete(), "render_value on non-concrete value {v}");
    v.strip_annotations().to_string()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Call {
    pub rel: String,
    pub args: Vec<Value>,
    /// Filled in by the type checker.
    pub info: Option<Box<crate::typecheck::CallInfo>>,
}

impl Call {
    pub fn new(rel: impl Into<String>, args: Vec<Value>) -> Call {
        Call {
            rel: rel.into(),
            args,
            info: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Goal {
    Conj(Box<Goal>, Box<Goal>),
    Disj(Box<Goal>, Box<Goal>),
    Fresh {
        var: String,
        ty: Type,
        body: Box<Goal>,
    },
    Unify(Value, Value),
    Disunify(Value, Value),
    Call(Call),
    /// Weight literal, interpreted by the active semiring.
    Factor(String),
}

impl Goal {
    pub fn conj(a: Goal, b: Goal) -> Goal {
        Goal::Conj(Box::new(a), Box::new(b))
    }

    pub fn disj(a: Goal, b: Goal) -> Goal {
        Goal::Disj(Box::new(a), Box::new(b))
    }

    pub fn fresh(var: impl Into<String>, ty: Type, body: Goal) -> Goal {
        Goal::Fresh {
            var: var.into(),
            ty,
            body: Box::new(body),
        }
    }

    pub fn call(rel: impl Into<String>, args: Vec<Value>) -> Goal {
        Goal::Call(Call::new(rel, args))
    }

    /// Right-nested conjunction; `(== sole sole)` when `goals` is empty.
    pub fn conj_all(goals: Vec<Goal>) -> Goal {
        Self::fold_right(goals, Goal::conj).unwrap_or(Goal::Unify(Value::Sole, Value::Sole))
    }

    /// Right-nested disjunction; `(=/= sole sole)` when `goals` is empty.
    pub fn disj_all(goals: Vec<Goal>) -> Goal {
        Self::fold_right(goals, Goal::disj).unwrap_or(Goal::Disunify(Value::Sole, Value::Sole))
    }

    fn fold_right(goals: Vec<Goal>, join: fn(Goal, Goal) -> Goal) -> Option<Goal> {
        let mut it = goals.into_iter().rev();
        let last = it.next()?;
        Some(it.fold(last, |acc, g| join(g, acc)))
    }

    /// Wraps `body` in one `fresh` per binder, outermost first.
    pub fn fresh_all(binders: Vec<(String, Type)>, body: Goal) -> Goal {
        binders
            .into_iter()
            .rev()
            .fold(body, |acc, (x, t)| Goal::fresh(x, t, acc))
    }

    pub fn contains_call(&self) -> bool {
        match self {
            Goal::Conj(a, b) | Goal::Disj(a, b) => a.contains_call() || b.contains_call(),
            Goal::Fresh { body, .. } => body.contains_call(),
            Goal::Call(_) => true,
            Goal::Unify(..) | Goal::Disunify(..) | Goal::Factor(_) => false,
        }
    }

    pub fn contains_factor(&self) -> bool {
        match self {
            Goal::Conj(a, b) | Goal::Disj(a, b) => a.contains_factor() || b.contains_factor(),
            Goal::Fresh { body, .. } => body.contains_factor(),
            Goal::Factor(_) => true,
            Goal::Unify(..) | Goal::Disunify(..) | Goal::Call(_) => false,
        }
    }

    /// Visits every call in left-to-right order.
    pub fn for_each_call<'a>(&'a self, f: &mut impl FnMut(&'a Call)) {
        match self {
            Goal::Conj(a, b) | Goal::Disj(a, b) => {
                a.for_each_call(f);
                b.for_each_call(f);
            }
            Goal::Fresh { body, .. } => body.for_each_call(f),
            Goal::Call(c) => f(c),
            Goal::Unify(..) | Goal::Disunify(..) | Goal::Factor(_) => {}
        }
    }

    /// Free value variables (not bound by an enclosing `fresh` inside `self`).
    pub fn free_vars(&self) -> Vec<String> {
        fn go(g: &Goal, bound: &mut Vec<String>, out: &mut Vec<String>) {
            let add = |v: &Value, bound: &Vec<String>, out: &mut Vec<String>| {
                for x in v.free_vars() {
                    if !bound.contains(&x) && !out.contains(&x) {
                        out.push(x);
                    }
                }
            };
            match g {
                Goal::Conj(a, b) | Goal::Disj(a, b) => {
                    go(a, bound, out);
                    go(b, bound, out);
                }
                Goal::Fresh { var, body, .. } => {
                    bound.push(var.clone());
                    go(body, bound, out);
                    bound.pop();
                }
                Goal::Unify(a, b) | Goal::Disunify(a, b) => {
                    add(a, bound, out);
                    add(b, bound, out);
                }
                Goal::Call(c) => {
                    for a in &c.args {
                        add(a, bound, out);
                    }
                }
                Goal::Factor(_) => {}
            }
        }
        let mut out = Vec::new();
        go(self, &mut Vec::new(), &mut out);
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelationDef {
    pub name: String,
    pub tyvars: Vec<String>,
    pub params: Vec<(String, Type)>,
    pub body: Goal,
}

impl RelationDef {
    pub fn is_polymorphic(&self) -> bool {
        !self.tyvars.is_empty()
    }

    pub fn param_types(&self) -> Vec<Type> {
        self.params.iter().map(|(_, t)| t.clone()).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Program {
    pub relations: Vec<RelationDef>,
}

impl Program {
    pub fn relation(&self, name: &str) -> Option<&RelationDef> {
        self.relations.iter().find(|r| r.name == name)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{line}:{col}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub message: String,
}

const RESERVED: &[&str] = &[
    "defrel", "conj", "disj", "fresh", "==", "=/=", "factor", "sole", "left", "right", "pair",
    "Unit", "Sum", "Prod", "Pair", "forall", "∀", ".", ":",
];

pub fn is_reserved(word: &str) -> bool {
    RESERVED.contains(&word)
}

// ---------------------------------------------------------------------------
// Reader

#[derive(Clone, Debug)]
enum SexpKind {
    Atom(String),
    List(Vec<Sexp>),
    Braced(Vec<Sexp>),
}

#[derive(Clone, Debug)]
struct Sexp {
    kind: SexpKind,
    line: usize,
    col: usize,
}

impl Sexp {
    fn err<T>(&self, message: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError {
            line: self.line,
            col: self.col,
            message: message.into(),
        })
    }

    fn atom(&self) -> Option<&str> {
        match &self.kind {
            SexpKind::Atom(a) => Some(a),
            _ => None,
        }
    }

    fn list(&self) -> Option<&[Sexp]> {
        match &self.kind {
            SexpKind::List(items) => Some(items),
            _ => None,
        }
    }

    fn describe(&self) -> String {
        match &self.kind {
            SexpKind::Atom(a) => format!("`{a}`"),
            SexpKind::List(_) => "a list".into(),
            SexpKind::Braced(_) => "a braced annotation".into(),
        }
    }
}

fn read_all(text: &str) -> Result<Vec<Sexp>, ParseError> {
    let chars: Vec<char> = text.chars().collect();
    let mut pos = 0;
    let mut line = 1;
    let mut col = 1;
    // (closing char, items, line, col)
    let mut stack: Vec<(char, Vec<Sexp>, usize, usize)> = Vec::new();
    let mut top: Vec<Sexp> = Vec::new();

    while pos < chars.len() {
        let c = chars[pos];
        if c == '\n' {
            pos += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            pos += 1;
            col += 1;
            continue;
        }
        if c == ';' {
            while pos < chars.len() && chars[pos] != '\n' {
                pos += 1;
            }
            continue;
        }
        match c {
            '(' | '{' => {
                let close = if c == '(' { ')' } else { '}' };
                stack.push((close, Vec::new(), line, col));
                pos += 1;
                col += 1;
            }
            ')' | '}' => {
                let Some((close, items, l, cl)) = stack.pop() else {
                    return Err(ParseError {
                        line,
                        col,
                        message: format!("unexpected `{c}`"),
                    });
                };
                if close != c {
                    return Err(ParseError {
                        line,
                        col,
                        message: format!("expected `{close}` but found `{c}`"),
                    });
                }
                let kind = if c == ')' {
                    SexpKind::List(items)
                } else {
                    SexpKind::Braced(items)
                };
                let node = Sexp {
                    kind,
                    line: l,
                    col: cl,
                };
                match stack.last_mut() {
                    Some((_, parent, _, _)) => parent.push(node),
                    None => top.push(node),
                }
                pos += 1;
                col += 1;
            }
            _ => {
                let (l, cl) = (line, col);
                let start = pos;
                while pos < chars.len() {
                    let d = chars[pos];
                    if d.is_whitespace() || matches!(d, '(' | ')' | '{' | '}' | ';') {
                        break;
                    }
                    pos += 1;
                    col += 1;
                }
                let node = Sexp {
                    kind: SexpKind::Atom(chars[start..pos].iter().collect()),
                    line: l,
                    col: cl,
                };
                match stack.last_mut() {
                    Some((_, parent, _, _)) => parent.push(node),
                    None => top.push(node),
                }
            }
        }
    }
    if let Some((close, _, l, c)) = stack.pop() {
        return Err(ParseError {
            line: l,
            col: c,
            message: format!("unclosed form (missing `{close}`)"),
        });
    }
    Ok(top)
}

// ---------------------------------------------------------------------------
// Parser

pub fn parse_program(text: &str) -> Result<Program, ParseError> {
    let forms = read_all(text)?;
    let mut relations: Vec<RelationDef> = Vec::new();
    for form in &forms {
        let rel = parse_defrel(form)?;
        if relations.iter().any(|r| r.name == rel.name) {
            return form.err(format!("duplicate relation `{}`", rel.name));
        }
        relations.push(rel);
    }
    Ok(Program { relations })
}

pub fn parse_type(text: &str) -> Result<Type, ParseError> {
    let form = single_form(text)?;
    parse_type_sexp(&form)
}

pub fn parse_value(text: &str) -> Result<Value, ParseError> {
    let form = single_form(text)?;
    parse_value_sexp(&form)
}

pub fn parse_goal(text: &str) -> Result<Goal, ParseError> {
    let form = single_form(text)?;
    let mut scope = Scope::new(&form);
    parse_goal_sexp(&form, &mut scope)
}

fn single_form(text: &str) -> Result<Sexp, ParseError> {
    let mut forms = read_all(text)?;
    match forms.len() {
        1 => Ok(forms.pop().unwrap()),
        0 => Err(ParseError {
            line: 1,
            col: 1,
            message: "empty input".into(),
        }),
        _ => forms[1].err("unexpected trailing form"),
    }
}

fn identifier(s: &Sexp, what: &str) -> Result<String, ParseError> {
    match s.atom() {
        Some(a) if is_reserved(a) => s.err(format!("reserved word `{a}` cannot be used as {what}")),
        Some(a) if a.starts_with(|c: char| c.is_ascii_digit()) => {
            s.err(format!("`{a}` is not a valid {what}"))
        }
        Some(a) => Ok(a.to_string()),
        None => s.err(format!("expected {what}, found {}", s.describe())),
    }
}

fn parse_type_sexp(s: &Sexp) -> Result<Type, ParseError> {
    match &s.kind {
        SexpKind::Atom(a) if a == "Unit" => Ok(Type::Unit),
        SexpKind::Atom(a) if a.chars().all(|c| c.is_ascii_digit()) => s.err(format!(
            "numeric type `{a}` is not supported; spell it as nested Sum/Unit types"
        )),
        SexpKind::Atom(_) => Ok(Type::Var(identifier(s, "a type variable")?)),
        SexpKind::List(items) => {
            let head = items.first().and_then(|h| h.atom());
            match head {
                Some(k @ ("Sum" | "Prod" | "Pair")) => {
                    if items.len() != 3 {
                        return s.err(format!("`{k}` takes exactly two types"));
                    }
                    let a = parse_type_sexp(&items[1])?;
                    let b = parse_type_sexp(&items[2])?;
                    Ok(if k == "Sum" {
                        Type::sum(a, b)
                    } else {
                        Type::prod(a, b)
                    })
                }
                _ => s.err("expected a type"),
            }
        }
        SexpKind::Braced(_) => s.err("unexpected annotation where a type was expected"),
    }
}

fn parse_value_sexp(s: &Sexp) -> Result<Value, ParseError> {
    match &s.kind {
        SexpKind::Atom(a) if a == "sole" => Ok(Value::Sole),
        SexpKind::Atom(_) => Ok(Value::Var(identifier(s, "a variable")?)),
        SexpKind::List(items) => {
            let Some(head) = items.first().and_then(|h| h.atom()) else {
                return s.err("expected a value");
            };
            match head {
                "left" | "right" => {
                    let (annot, inner) = match items.len() {
                        2 => (None, &items[1]),
                        3 => match &items[1].kind {
                            SexpKind::Braced(t) if t.len() == 1 => {
                                (Some(parse_type_sexp(&t[0])?), &items[2])
                            }
                            _ => return items[1].err("expected `{TYPE}` annotation"),
                        },
                        _ => return s.err(format!("`{head}` takes one value")),
                    };
                    let v = Box::new(parse_value_sexp(inner)?);
                    Ok(if head == "left" {
                        Value::Left(annot, v)
                    } else {
                        Value::Right(annot, v)
                    })
                }
                "pair" => {
                    if items.len() != 3 {
                        return s.err("`pair` takes exactly two values");
                    }
                    Ok(Value::pair(
                        parse_value_sexp(&items[1])?,
                        parse_value_sexp(&items[2])?,
                    ))
                }
                other => s.err(format!("`{other}` is not a value constructor")),
            }
        }
        SexpKind::Braced(_) => s.err("unexpected annotation where a value was expected"),
    }
}

/// Variable scope used to rename shadowing `fresh` binders apart.
struct Scope {
    in_scope: Vec<(String, String)>,
    taken: HashSet<String>,
}

impl Scope {
    fn new(form: &Sexp) -> Scope {
        let mut taken = HashSet::new();
        collect_atoms(form, &mut taken);
        Scope {
            in_scope: Vec::new(),
            taken,
        }
    }

    fn resolve(&self, name: &str) -> String {
        self.in_scope
            .iter()
            .rev()
            .find(|(src, _)| src == name)
            .map(|(_, dst)| dst.clone())
            .unwrap_or_else(|| name.to_string())
    }

    fn bind(&mut self, name: &str) -> String {
        let shadows = self.in_scope.iter().any(|(_, dst)| dst == name)
            || self.in_scope.iter().any(|(src, _)| src == name);
        let target = if shadows {
            let mut k = 1;
            loop {
                let candidate = format!("{name}~{k}");
                if !self.taken.contains(&candidate) {
                    break candidate;
                }
                k += 1;
            }
        } else {
            name.to_string()
        };
        self.taken.insert(target.clone());
        self.in_scope.push((name.to_string(), target.clone()));
        target
    }

    fn unbind(&mut self, n: usize) {
        let keep = self.in_scope.len() - n;
        self.in_scope.truncate(keep);
    }
}

fn collect_atoms(s: &Sexp, out: &mut HashSet<String>) {
    match &s.kind {
        SexpKind::Atom(a) => {
            out.insert(a.clone());
        }
        SexpKind::List(items) | SexpKind::Braced(items) => {
            for i in items {
                collect_atoms(i, out);
            }
        }
    }
}

fn rename_value(v: Value, scope: &Scope) -> Value {
    match v {
        Value::Var(x) => Value::Var(scope.resolve(&x)),
        Value::Left(t, inner) => Value::Left(t, Box::new(rename_value(*inner, scope))),
        Value::Right(t, inner) => Value::Right(t, Box::new(rename_value(*inner, scope))),
        Value::Pair(a, b) => Value::pair(rename_value(*a, scope), rename_value(*b, scope)),
        Value::Sole => Value::Sole,
    }
}

fn parse_binder(s: &Sexp) -> Result<Option<(String, Type, &Sexp)>, ParseError> {
    let Some(items) = s.list() else {
        return Ok(None);
    };
    if items.len() == 3 && items[1].atom() == Some(":") {
        let name = identifier(&items[0], "a variable name")?;
        let ty = parse_type_sexp(&items[2])?;
        return Ok(Some((name, ty, s)));
    }
    Ok(None)
}

/// Accepts `(x : T)`, `((x : T) (y : T))` and mixtures of both.
fn parse_binders<'a>(items: &'a [Sexp], out: &mut Vec<(String, Type, &'a Sexp)>) -> Result<(), ParseError> {
    for item in items {
        if let Some(b) = parse_binder(item)? {
            out.push(b);
        } else if let Some(group) = item.list() {
            if group.is_empty() {
                return item.err("empty binder group");
            }
            parse_binders(group, out)?;
        } else {
            return item.err(format!("expected a binder `(name : TYPE)`, found {}", item.describe()));
        }
    }
    Ok(())
}

fn parse_defrel(form: &Sexp) -> Result<RelationDef, ParseError> {
    let Some(items) = form.list() else {
        return form.err(format!("expected `(defrel ...)`, found {}", form.describe()));
    };
    if items.first().and_then(|h| h.atom()) != Some("defrel") {
        return form.err("expected `(defrel ...)`");
    }
    if items.len() != 3 {
        return form.err("`defrel` takes a header and exactly one goal");
    }
    let header = &items[1];
    let Some(head_items) = header.list() else {
        return header.err("expected relation header `(NAME (x : T) ...)`");
    };
    let Some(name_sexp) = head_items.first() else {
        return header.err("empty relation header");
    };
    let name = identifier(name_sexp, "a relation name")?;
    let mut rest = &head_items[1..];

    let mut tyvars: Option<Vec<String>> = None;
    if let Some(q) = rest.first().and_then(|s| s.atom()) {
        if q == "forall" || q == "∀" {
            let mut vars = Vec::new();
            let mut i = 1;
            loop {
                let Some(tok) = rest.get(i) else {
                    return rest[0].err("type-variable list must end with `.`");
                };
                if tok.atom() == Some(".") {
                    break;
                }
                let v = identifier(tok, "a type variable")?;
                if vars.contains(&v) {
                    return tok.err(format!("duplicate type variable `{v}`"));
                }
                vars.push(v);
                i += 1;
            }
            tyvars = Some(vars);
            rest = &rest[i + 1..];
        }
    }

    let mut binders = Vec::new();
    parse_binders(rest, &mut binders)?;
    let mut params: Vec<(String, Type)> = Vec::new();
    for (x, t, at) in binders {
        if params.iter().any(|(y, _)| *y == x) {
            return at.err(format!("duplicate parameter `{x}` in relation `{name}`"));
        }
        params.push((x, t));
    }
    let tyvars = tyvars.unwrap_or_else(|| {
        let mut out = Vec::new();
        for (_, t) in &params {
            collect_type_vars(t, &mut out);
        }
        out
    });

    let mut scope = Scope::new(form);
    for (x, _) in &params {
        scope.in_scope.push((x.clone(), x.clone()));
    }
    let body = parse_goal_sexp(&items[2], &mut scope)?;
    Ok(RelationDef {
        name,
        tyvars,
        params,
        body,
    })
}

fn parse_goal_sexp(s: &Sexp, scope: &mut Scope) -> Result<Goal, ParseError> {
    let Some(items) = s.list() else {
        return s.err(format!("expected a goal, found {}", s.describe()));
    };
    let Some(head_sexp) = items.first() else {
        return s.err("empty goal");
    };
    let Some(head) = head_sexp.atom() else {
        return s.err("expected a goal keyword or relation name");
    };
    let args = &items[1..];
    match head {
        "conj" | "disj" => {
            if args.len() < 2 {
                return s.err(format!("`{head}` requires at least two subgoals"));
            }
            let goals = args
                .iter()
                .map(|g| parse_goal_sexp(g, scope))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(if head == "conj" {
                Goal::conj_all(goals)
            } else {
                Goal::disj_all(goals)
            })
        }
        "fresh" => {
            if args.len() != 2 {
                return s.err("`fresh` takes a binder list and exactly one goal");
            }
            let mut binders = Vec::new();
            match parse_binder(&args[0])? {
                Some(b) => binders.push(b),
                None => match args[0].list() {
                    Some(group) if !group.is_empty() => parse_binders(group, &mut binders)?,
                    _ => return args[0].err("`fresh` needs at least one binder `(name : TYPE)`"),
                },
            }
            let mut renamed = Vec::new();
            for (x, t, _) in &binders {
                renamed.push((scope.bind(x), t.clone()));
            }
            let body = parse_goal_sexp(&args[1], scope);
            scope.unbind(renamed.len());
            Ok(Goal::fresh_all(renamed, body?))
        }
        "==" | "=/=" => {
            if args.len() != 2 {
                return s.err(format!("`{head}` takes exactly two values"));
            }
            let a = rename_value(parse_value_sexp(&args[0])?, scope);
            let b = rename_value(parse_value_sexp(&args[1])?, scope);
            Ok(if head == "==" {
                Goal::Unify(a, b)
            } else {
                Goal::Disunify(a, b)
            })
        }
        "factor" => {
            if args.len() != 1 {
                return s.err("`factor` takes exactly one weight literal");
            }
            match args[0].atom() {
                Some(lit) => Ok(Goal::Factor(lit.to_string())),
                None => args[0].err("expected a weight literal"),
            }
        }
        _ => {
            let rel = identifier(head_sexp, "a relation name")?;
            let vals = args
                .iter()
                .map(|a| parse_value_sexp(a).map(|v| rename_value(v, scope)))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Goal::call(rel, vals))
        }
    }
}

// ---------------------------------------------------------------------------
// Pretty-printer

pub fn render_program(p: &Program) -> String {
    let mut out = String::new();
    for (i, r) in p.relations.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&render_relation(r));
        out.push('\n');
    }
    out
}

pub fn render_relation(r: &RelationDef) -> String {
    let mut out = format!("(defrel ({}", r.name);
    if !r.tyvars.is_empty() {
        out.push_str(" forall");
        for v in &r.tyvars {
            out.push(' ');
            out.push_str(v);
        }
        out.push_str(" .");
    }
    for (x, t) in &r.params {
        out.push_str(&format!(" ({x} : {t})"));
    }
    out.push(')');
    out.push('\n');
    render_goal_into(&r.body, 1, &mut out);
    out.push(')');
    out
}

pub fn render_goal(g: &Goal) -> String {
    let mut out = String::new();
    render_goal_into(g, 0, &mut out);
    out
}

fn render_goal_into(g: &Goal, depth: usize, out: &mut String) {
    let pad = "  ".repeat(depth);
    match g {
        Goal::Conj(..) | Goal::Disj(..) => {
            let is_conj = matches!(g, Goal::Conj(..));
            let mut parts = Vec::new();
            let mut cur = g;
            loop {
                match (cur, is_conj) {
                    (Goal::Conj(a, b), true) | (Goal::Disj(a, b), false) => {
                        parts.push(a.as_ref());
                        cur = b;
                    }
                    _ => {
                        parts.push(cur);
                        break;
                    }
                }
            }
            out.push_str(&pad);
            out.push_str(if is_conj { "(conj" } else { "(disj" });
            for p in parts {
                out.push('\n');
                render_goal_into(p, depth + 1, out);
            }
            out.push(')');
        }
        Goal::Fresh { .. } => {
            let mut binders = Vec::new();
            let mut cur = g;
            while let Goal::Fresh { var, ty, body } = cur {
                binders.push(format!("({var} : {ty})"));
                cur = body;
            }
            out.push_str(&format!("{pad}(fresh ({})\n", binders.join(" ")));
            render_goal_into(cur, depth + 1, out);
            out.push(')');
        }
        Goal::Unify(a, b) => out.push_str(&format!("{pad}(== {a} {b})")),
        Goal::Disunify(a, b) => out.push_str(&format!("{pad}(=/= {a} {b})")),
        Goal::Call(c) => {
            out.push_str(&pad);
            out.push('(');
            out.push_str(&c.rel);
            for a in &c.args {
                out.push(' ');
                out.push_str(&a.to_string());
            }
            out.push(')');
        }
        Goal::Factor(lit) => out.push_str(&format!("{pad}(factor {lit})")),
    }
}
