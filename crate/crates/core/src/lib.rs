//! Uncertainty-aware self-training for neural sequence labeling.
//!
//! Numeric code is generic over [`Scalar`]; the `*64` aliases fix it to f64.

// `!(x > 0.0)` is deliberate throughout: NaN must fail validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod selftrain;
pub mod uncertainty;
mod scalar;

pub use scalar::Scalar;

pub type Tensor64 = numerics::Tensor<f64>;
pub type SequenceLabeler64 = model::SequenceLabeler<f64>;
