//! Knowledge-distillation laboratory.
//!
//! * [`autodiff`]: tape-based reverse-mode differentiation over `f64` arrays.
//! * [`nets`]: MLP trunks with one linear softmax head per task.
//! * [`criteria`]: KL divergence, Fisher/gradient weightings and the
//!   generalized squared-error divergences used for distillation.
//! * [`theory`]: numerical checks of the KL second-order expansion.
//! * [`compression`] and [`incremental`]: the two experiment protocols.
//! * [`data`], [`config`], [`results`], [`cli`]: plumbing.

// `!(x > 0.0)` style checks are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod compression;
pub mod config;
pub mod criteria;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod incremental;
pub mod nets;
pub mod optim;
pub mod results;
pub mod theory;

pub use error::{Error, Result};
