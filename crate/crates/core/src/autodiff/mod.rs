//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Values live in a [`Tape`]; every operation appends a node holding its
//! forward result and the references needed by its backward rule, so the tape
//! order is the forward execution order. [`Tape::backward`] walks the tape in
//! reverse and accumulates cotangents into the leaves that require gradients.
//!
//! Shapes must match exactly. The only broadcast is [`Tape::add_bias`], which
//! adds a row vector to every row of a matrix.

pub mod kernels;
mod tape;
mod tensor;

pub use tape::{Tape, Var, NORM_EPS};
pub use tensor::Tensor;
