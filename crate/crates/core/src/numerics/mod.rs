//! Tensors, reverse-mode differentiation and scalar math primitives.

mod gradcheck;
pub(crate) mod math;
mod rng;
pub(crate) mod tape;
mod tensor;

pub use gradcheck::{central_difference, finite_diff_grad_check};
pub use math::{
    clamp_prob, entropy, kl_divergence, log_softmax, log_sum_exp, softmax, validate_simplex,
};
pub use rng::{derive_seed, RunSeeds, Stream};
pub use tape::{CustomOp, Grads, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape {shape:?} requires {expected} values, got {actual}")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("not a probability vector: {0}")]
    NotSimplex(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("KL support violation at index {index}: p = {p}, q = 0")]
    SupportViolation { index: usize, p: f64 },
    #[error("non-finite loss at probe {probe}")]
    NonFinite { probe: usize },
}
