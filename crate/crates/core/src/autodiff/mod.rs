//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records a fixed set of primitives (affine, relu, concat,
//! mean-pool, l2-normalize, dot, exp, log, the `[t]_{1+}` clip gate and a
//! handful of scalar arithmetic nodes). Every node's inputs precede it, so a
//! single reverse sweep over the node list yields exact gradients.
//!
//! [`finite_diff_grad`] is the central-difference oracle every analytic
//! gradient in this crate is checked against.

mod gradcheck;
mod tape;

pub use gradcheck::{finite_diff_grad, max_relative_error, relative_error, REL_ERR_FLOOR};
pub use tape::{Adjoints, GradientSet, ParamId, Tape, Var};
