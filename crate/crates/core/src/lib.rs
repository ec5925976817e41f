//! Bottom-up weighted relational programming over commutative semirings.
//!
//! A program is a set of typed relations over finite algebraic types
//! (`Unit`, `Sum`, `Prod`). Each relation denotes a dense table of semiring
//! weights, computed as the least fixpoint of its body. Relations may be
//! polymorphic; [`poly`] lowers them to monomorphic code either by
//! instantiating every needed size or by reusing one "large enough"
//! instance per relation behind equality-pattern guards.
//!
//! ```
//! use skn_core::{load_program, lower_program, PolyMode, SemiringSpec, FixpointOptions};
//!
//! let src = "(defrel (unfair (coin : (Sum Unit Unit)))
//!              (disj (conj (factor 0.7) (== coin (left sole)))
//!                    (conj (factor 0.3) (== coin (right sole)))))";
//! let checked = load_program(src).unwrap();
//! let real = SemiringSpec::real();
//! let lowered = lower_program(&checked, PolyMode::Monomorphize, &real).unwrap();
//! let result = skn_core::fixpoint(&lowered.program, &real, &FixpointOptions::default()).unwrap();
//! assert_eq!(result.tables[0].cells[0].to_string(), "0.7");
//! ```

pub mod eval;
pub mod poly;
pub mod semiring;
pub mod syntax;
pub mod typecheck;

pub use eval::{
    enumerate_type, eval_goal, eval_value, fixpoint, index_value, type_size, value_index, EvalError,
    Evaluator, FixpointOptions, FixpointResult, RelTable, ValueEnv,
};
pub use poly::{lower_program, lower_program_with, LowerError, LowerOptions, Lowered, PolyMode};
pub use semiring::{SemiringKind, SemiringSpec, Weight};
pub use syntax::{parse_program, render_program, render_value, Goal, Program, RelationDef, Type, Value};
pub use typecheck::{check_program, TypeErrors};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("parse error at {0}")]
    Parse(#[from] syntax::ParseError),
    #[error("{0}")]
    Type(#[from] TypeErrors),
}

/// Parses and type-checks program text.
pub fn load_program(text: &str) -> Result<Program, LoadError> {
    let p = parse_program(text)?;
    Ok(check_program(&p)?)
}
