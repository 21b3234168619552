//! Branch-and-prune solver and optimizer for systems of bounded multivariate
//! polynomial inequality constraints.
//!
//! The pipeline: sparse power-basis polynomials ([`poly`]) are bounded over
//! axis-aligned boxes with Bernstein-form range enclosures ([`bernstein`]);
//! ambiguous regions are refined with quadratic over/under approximations
//! ([`abstraction`]) whose choice is scored by a small trained network
//! ([`guide`]); the solver ([`solver`]) drives the refinement and finishes
//! with a resolution-complete branch-and-prune endgame or an external SMT
//! hand-off. A constrained optimizer ([`optimize`]) reduces min/max queries
//! to gradient feasibility with an explicit error bound, and a reachability
//! driver ([`reach`]) computes template-polyhedron flowpipes for discrete
//! polynomial maps on top of the optimizer.
//!
//! Brute-force adjudicators used by the test suites live in [`oracle`]; they
//! deliberately share no shortcut code paths with the solver.

// Numeric kernels index by dimension/row on purpose, and interval
// validations use `!(a <= b)` so NaN fails closed.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod abstraction;
pub mod bernstein;
pub mod guide;
pub mod optimize;
pub mod oracle;
pub(crate) mod par;
pub mod parse;
pub mod poly;
pub mod reach;
pub mod solver;
pub mod suites;

pub use parse::{ParseError, ProblemFile};
pub use poly::{IntervalBox, MultiIndex, Polynomial};

/// Soundness slack for floating-point sign decisions. A quantity is treated
/// as strictly positive only above `TAU`, strictly negative only below
/// `-TAU`, and a residual with absolute value at most `TAU` counts as
/// satisfying a non-strict inequality.
pub const TAU: f64 = 1e-9;

/// Hard cap on dense Bernstein coefficient tensors (number of entries).
pub const TENSOR_CAP: usize = 20_000_000;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("interval box has lower > upper in dimension {dim}")]
    EmptyInterval { dim: usize },
    #[error("coefficient tensor would need {size} entries (cap {cap})")]
    TensorTooLarge { size: u128, cap: usize },
    #[error("box straddles zero in dimension {dim}; single-orthant input required")]
    NotOrthantPure { dim: usize },
    #[error("problem has no objective")]
    MissingObjective,
    #[error("too many constraints: {got} (limit {limit})")]
    TooManyConstraints { got: usize, limit: usize },
    #[error("infeasible axis bounds in polytope (dimension {dim})")]
    InvertedFace { dim: usize },
    #[error("template lacks the mandatory axis rows")]
    MissingAxisTemplate,
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("model file: {0}")]
    ModelFormat(String),
    #[error("{0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
