//! Reverse-mode automatic differentiation over [`Tensor`](crate::Tensor).
//!
//! Operations are methods on [`Tape`]; each call computes its output eagerly
//! and records enough context to run the chain rule backwards later.

mod gradcheck;
pub(crate) mod kernels;
mod tape;

pub use gradcheck::{
    grad_check, grad_check_coords, relative_error, GradCheckReport, GradFailure, MAX_REFINEMENTS, REFINE_FACTOR,
    REL_ERROR_FLOOR,
};
pub use kernels::CE_EPS;
pub use tape::{Gradients, Tape, Var};
