//! Neural dynamic equivalents of external grid regions.
//!
//! The internal region keeps its swing-equation physics; the external region
//! is replaced by a neural ODE over the tie-line currents, trained through
//! the closed loop with a discrete adjoint or with estimated Jacobians.

// negated comparisons make NaN fail range checks
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod grid;
pub mod harness;
pub mod integrators;
pub mod mlp;
pub mod neudye;
pub mod par;
#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
