//! Commutative semirings used to weight relation tables.
//!
//! A program is semiring-generic text; the semiring is picked once per
//! evaluation run. Three instances are built in: boolean `(B, or, and, false,
//! true)`, real `(R, +, *, 0, 1)` and min-tropical `(R u {inf}, min, +, inf, 0)`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Default tolerance used when comparing real weights between fixpoint rounds.
pub const DEFAULT_REAL_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SemiringKind {
    Boolean,
    Real,
    MinTropical,
}

impl SemiringKind {
    pub const ALL: [SemiringKind; 3] = [
        SemiringKind::Boolean,
        SemiringKind::Real,
        SemiringKind::MinTropical,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SemiringKind::Boolean => "boolean",
            SemiringKind::Real => "real",
            SemiringKind::MinTropical => "min-tropical",
        }
    }
}

impl fmt::Display for SemiringKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown semiring `{0}` (expected boolean, real or min-tropical)")]
pub struct UnknownSemiring(pub String);

impl FromStr for SemiringKind {
    type Err = UnknownSemiring;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "boolean" | "bool" => Ok(SemiringKind::Boolean),
            "real" => Ok(SemiringKind::Real),
            "min-tropical" | "tropical" => Ok(SemiringKind::MinTropical),
            other => Err(UnknownSemiring(other.to_string())),
        }
    }
}

/// An element of one of the built-in carriers.
///
/// The tag records which carrier the element belongs to; combining elements
/// of different carriers is a contract violation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Weight {
    Bool(bool),
    Real(f64),
    /// Finite real or `+inf`.
    Tropical(f64),
}

impl Weight {
    pub fn kind(&self) -> SemiringKind {
        match self {
            Weight::Bool(_) => SemiringKind::Boolean,
            Weight::Real(_) => SemiringKind::Real,
            Weight::Tropical(_) => SemiringKind::MinTropical,
        }
    }
}

fn fmt_decimal(x: f64, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    if x == 0.0 {
        // avoid printing "-0"
        f.write_str("0")
    } else {
        write!(f, "{x}")
    }
}

impl fmt::Display for Weight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Weight::Bool(b) => f.write_str(if b { "true" } else { "false" }),
            Weight::Real(x) => fmt_decimal(x, f),
            Weight::Tropical(x) if x == f64::INFINITY => f.write_str("inf"),
            Weight::Tropical(x) => fmt_decimal(x, f),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid weight literal `{token}` for the {semiring} semiring")]
pub struct WeightParseError {
    pub token: String,
    pub semiring: SemiringKind,
}

/// A commutative semiring instance together with its evaluation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SemiringSpec {
    pub kind: SemiringKind,
    pub zero: Weight,
    pub one: Weight,
    pub idempotent_add: bool,
    /// Only consulted when comparing fixpoint rounds; 0 for discrete carriers.
    pub equality_tolerance: f64,
}

impl SemiringSpec {
    pub fn new(kind: SemiringKind) -> Self {
        match kind {
            SemiringKind::Boolean => SemiringSpec {
                kind,
                zero: Weight::Bool(false),
                one: Weight::Bool(true),
                idempotent_add: true,
                equality_tolerance: 0.0,
            },
            SemiringKind::Real => SemiringSpec {
                kind,
                zero: Weight::Real(0.0),
                one: Weight::Real(1.0),
                idempotent_add: false,
                equality_tolerance: DEFAULT_REAL_TOLERANCE,
            },
            SemiringKind::MinTropical => SemiringSpec {
                kind,
                zero: Weight::Tropical(f64::INFINITY),
                one: Weight::Tropical(0.0),
                idempotent_add: true,
                equality_tolerance: 0.0,
            },
        }
    }

    pub fn boolean() -> Self {
        Self::new(SemiringKind::Boolean)
    }

    pub fn real() -> Self {
        Self::new(SemiringKind::Real)
    }

    pub fn min_tropical() -> Self {
        Self::new(SemiringKind::MinTropical)
    }

    /// Overrides the comparison tolerance. Ignored by the discrete carriers.
    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        if self.kind == SemiringKind::Real {
            self.equality_tolerance = tolerance.max(0.0);
        }
        self
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    #[inline]
    pub fn add(&self, a: Weight, b: Weight) -> Weight {
        match (a, b) {
            (Weight::Bool(x), Weight::Bool(y)) => Weight::Bool(x || y),
            (Weight::Real(x), Weight::Real(y)) => Weight::Real(x + y),
            (Weight::Tropical(x), Weight::Tropical(y)) => Weight::Tropical(x.min(y)),
            (a, b) => mixed(a, b),
        }
    }

    #[inline]
    pub fn mul(&self, a: Weight, b: Weight) -> Weight {
        match (a, b) {
            (Weight::Bool(x), Weight::Bool(y)) => Weight::Bool(x && y),
            (Weight::Real(x), Weight::Real(y)) => Weight::Real(x * y),
            (Weight::Tropical(x), Weight::Tropical(y)) => {
                if x == f64::INFINITY || y == f64::INFINITY {
                    Weight::Tropical(f64::INFINITY)
                } else {
                    Weight::Tropical(x + y)
                }
            }
            (a, b) => mixed(a, b),
        }
    }

    /// `w + w + ... + w` with `n` summands (`0` when `n == 0`).
    pub fn repeat_add(&self, w: Weight, n: usize) -> Weight {
        if n == 0 {
            return self.zero;
        }
        if self.idempotent_add {
            return w;
        }
        match w {
            Weight::Real(x) => Weight::Real(x * n as f64),
            _ => (1..n).fold(w, |acc, _| self.add(acc, w)),
        }
    }

    pub fn is_zero(&self, w: Weight) -> bool {
        w == self.zero
    }

    /// Whether `w` is a member of this semiring's carrier.
    pub fn contains(&self, w: Weight) -> bool {
        match (self.kind, w) {
            (SemiringKind::Boolean, Weight::Bool(_)) => true,
            (SemiringKind::Real, Weight::Real(x)) => x.is_finite(),
            (SemiringKind::MinTropical, Weight::Tropical(x)) => !x.is_nan() && x != f64::NEG_INFINITY,
            _ => false,
        }
    }

    /// Equality used by the fixpoint driver: exact for discrete carriers,
    /// within `equality_tolerance` (absolute below 1, relative above) for reals.
    pub fn approx_eq(&self, a: Weight, b: Weight) -> bool {
        match (a, b) {
            (Weight::Real(x), Weight::Real(y)) => {
                let scale = 1f64.max(x.abs()).max(y.abs());
                (x - y).abs() <= self.equality_tolerance * scale
            }
            _ => a == b,
        }
    }

    /// Parses the literal of a `factor` goal.
    pub fn parse_weight(&self, text: &str) -> Result<Weight, WeightParseError> {
        let err = || WeightParseError {
            token: text.to_string(),
            semiring: self.kind,
        };
        match self.kind {
            SemiringKind::Boolean => match text {
                "true" | "#t" | "1" => Ok(Weight::Bool(true)),
                "false" | "#f" | "0" => Ok(Weight::Bool(false)),
                _ => Err(err()),
            },
            SemiringKind::Real => {
                let x = parse_decimal(text).ok_or_else(err)?;
                Ok(Weight::Real(x))
            }
            SemiringKind::MinTropical => match text {
                "inf" | "+inf" | "∞" => Ok(Weight::Tropical(f64::INFINITY)),
                _ => parse_decimal(text).map(Weight::Tropical).ok_or_else(err),
            },
        }
    }
}

/// Finite decimal literal. Rejects the textual `inf`/`nan` forms `f64::from_str` accepts.
fn parse_decimal(text: &str) -> Option<f64> {
    let body = text.strip_prefix(['+', '-']).unwrap_or(text);
    if !body.starts_with(|c: char| c.is_ascii_digit() || c == '.') {
        return None;
    }
    text.parse::<f64>().ok().filter(|x| x.is_finite())
}

#[cold]
fn mixed(a: Weight, b: Weight) -> ! {
    panic!(
        "mixed-semiring operands: {} ({}) and {} ({})",
        a,
        a.kind(),
        b,
        b.kind()
    )
}

/// Convenience wrapper matching the operation names used elsewhere in the crate.
pub fn parse_weight_literal(text: &str, semiring: &SemiringSpec) -> Result<Weight, WeightParseError> {
    semiring.parse_weight(text)
}
