//! Symbolic regression over lagged building signals.
//!
//! A model predicts indoor temperature at step `t` from an expression tree
//! whose leaves are constants or lagged values such as `Tin[t-3]`,
//! `Tout[t-36]` or `P[t-72]`.

mod expr;
mod gp;
mod optim;
mod text;
mod training;

pub use expr::{BinaryOp, Expr, LagRef, LagSource, SeriesCursor, UnaryOp, PROTECTED_DIV_EPS};
pub use gp::{crossover, mutate, random_expression, run_evolution, EvolutionResult, GpConfig};
pub use optim::{
    levenberg_marquardt, nelder_mead, refit_constants, NelderMeadOptions, NelderMeadResult, REFIT_EVALS_PER_CONSTANT,
};
pub use text::{format_expression, parse_expression};
pub use training::{build_training_set, TrainingSet, DEFAULT_LAG_BUDGET};

/// Reference cooling-season model, in canonical form:
/// `Tin = 0.000073 (Tin[t-3] - 23.49)(Tin[t-3] - P[t-3] + 0.2614 P[t-72]) + Tin[t-3]`.
pub const REFERENCE_COOLING_MODEL: &str =
    "(+ (* (* 0.000073 (- Tin[t-3] 23.49)) (+ (- Tin[t-3] P[t-3]) (* 0.2614 P[t-72]))) Tin[t-3])";

/// Reference heating-season model, in canonical form:
/// `Tin = Tin[t-3] - 0.00014 (Tin[t-3] - Tin[t-103] - 2.316)(0.3573 (P[t-3] - Tout[t-36]) + Tin[t-72])`.
pub const REFERENCE_HEATING_MODEL: &str =
    "(- Tin[t-3] (* (* 0.00014 (- (- Tin[t-3] Tin[t-103]) 2.316)) (+ (* 0.3573 (- P[t-3] Tout[t-36])) Tin[t-72])))";
