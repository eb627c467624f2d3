//! MC-dropout posterior estimates, token scores and reliable-token selection.

mod select;

pub use select::{
    sampling_weights, select_tokens, selection_count, write_reports_jsonl, SelectionMode, SelectionReport,
    Strategy, TokenRecord,
};

use thiserror::Error;

use crate::data::Sentence;
use crate::model::{argmax, SequenceLabeler};
use crate::numerics::math::entropy_unchecked;
use crate::numerics::{derive_seed, validate_simplex, Tensor};
use crate::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum UncertaintyError {
    #[error("at least one pass is required")]
    NoPasses,
    #[error("pass {0} has shape {1:?}, expected {2:?}")]
    Shape(usize, Vec<usize>, Vec<usize>),
    #[error("pass {pass}, token {token}: {reason}")]
    NotDistribution { pass: usize, token: usize, reason: String },
}

/// Per-pass token distributions: `T` slices of `[L, |Y|]`.
#[derive(Clone, Debug, PartialEq)]
pub struct McPredictions<T: Scalar> {
    slices: Vec<Tensor<T>>,
    seeds: Vec<u64>,
}

impl<T: Scalar> McPredictions<T> {
    pub fn new(slices: Vec<Tensor<T>>, seeds: Vec<u64>) -> Result<Self, UncertaintyError> {
        let first = slices.first().ok_or(UncertaintyError::NoPasses)?;
        let shape = first.shape().to_vec();
        for (t, s) in slices.iter().enumerate() {
            if s.shape() != shape.as_slice() || shape.len() != 2 {
                return Err(UncertaintyError::Shape(t, s.shape().to_vec(), shape.clone()));
            }
            for j in 0..s.rows() {
                validate_simplex(s.row(j)).map_err(|e| UncertaintyError::NotDistribution {
                    pass: t,
                    token: j,
                    reason: e.to_string(),
                })?;
            }
        }
        Ok(Self { slices, seeds })
    }

    pub fn passes(&self) -> usize {
        self.slices.len()
    }

    pub fn len(&self) -> usize {
        self.slices[0].rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.slices[0].cols()
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    pub fn slice(&self, t: usize) -> &Tensor<T> {
        &self.slices[t]
    }

    /// Pass-averaged distribution of token `j`. The running-mean update keeps
    /// the average of identical passes exactly equal to each pass.
    pub fn mean_row(&self, j: usize) -> Vec<T> {
        let mut mean = vec![T::zero(); self.num_classes()];
        for (t, s) in self.slices.iter().enumerate() {
            let k = T::of((t + 1) as f64);
            for (m, &p) in mean.iter_mut().zip(s.row(j)) {
                *m += (p - *m) / k;
            }
        }
        mean
    }
}

/// `t_passes` dropout-active passes with seeds derived from `seed`.
pub fn mc_predict<T: Scalar>(
    model: &SequenceLabeler<T>,
    sentence: &Sentence,
    t_passes: usize,
    seed: u64,
) -> McPredictions<T> {
    assert!(t_passes >= 1, "t_passes must be positive");
    let seeds: Vec<u64> = (0..t_passes as u64).map(|t| derive_seed(seed, 0, t)).collect();
    let slices = seeds.iter().map(|&s| model.encode(sentence, true, s).probs).collect();
    McPredictions { slices, seeds }
}

/// Argmax of the pass-averaged distribution per token, lowest index on ties.
pub fn pseudo_annotate<T: Scalar>(mc: &McPredictions<T>) -> Vec<usize> {
    (0..mc.len()).map(|j| argmax(&mc.mean_row(j))).collect()
}

/// Entropy of the mean minus the mean entropy, floored at 0.
pub fn bald_score<T: Scalar>(mc: &McPredictions<T>, token: usize) -> T {
    let mean = mc.mean_row(token);
    let mut mean_h = T::zero();
    for (t, s) in mc.slices.iter().enumerate() {
        mean_h += (entropy_unchecked(s.row(token)) - mean_h) / T::of((t + 1) as f64);
    }
    (entropy_unchecked(&mean) - mean_h).max(T::zero())
}

/// Mean probability the passes assign to `pseudo`.
pub fn confidence_score<T: Scalar>(mc: &McPredictions<T>, token: usize, pseudo: usize) -> T {
    mc.mean_row(token)[pseudo]
}

/// `1 - bald / ln(num_classes)`, clamped to `[0, 1]`.
pub fn certainty_score<T: Scalar>(bald: T, num_classes: usize) -> T {
    assert!(num_classes >= 2, "certainty needs at least two classes");
    let c = T::one() - bald / T::of((num_classes as f64).ln());
    c.max(T::zero()).min(T::one())
}
