//! Student objective: masked noise-robust token loss plus Gaussian
//! consistency regularization, and the supervised negative log-likelihood.

mod ops;

pub use ops::{kl_rows_on_tape, robust_nll_on_tape};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Sentence;
use crate::model::{
    crf_log_partition_on_tape, EncodedSentence, HeadKind, ParamId, SequenceLabeler, TapeForward,
};
use crate::numerics::{clamp_prob, log_softmax, RunSeeds, Stream, Tape, Tensor, Var};
use crate::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("{field} = {value}: {constraint}")]
    InvalidConfig {
        field: &'static str,
        value: String,
        constraint: &'static str,
    },
    #[error("non-finite loss on sentence {sentence}")]
    NonFinite { sentence: u64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Phce,
    CrossEntropy,
}

impl std::str::FromStr for LossKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "phce" => Ok(Self::Phce),
            "cross_entropy" => Ok(Self::CrossEntropy),
            other => Err(format!("unknown loss {other:?} (expected phce or cross_entropy)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustLossConfig {
    pub tau: f64,
    pub lambda: f64,
    pub k_perturb: usize,
    pub loss_kind: LossKind,
    /// Treat the clean branch of the consistency term as a constant target.
    pub stop_gradient: bool,
}

impl Default for RobustLossConfig {
    fn default() -> Self {
        Self {
            tau: 10.0,
            lambda: 0.5,
            k_perturb: 3,
            loss_kind: LossKind::Phce,
            stop_gradient: true,
        }
    }
}

impl RobustLossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.tau > 1.0) || !self.tau.is_finite() {
            return Err(LossError::InvalidConfig {
                field: "tau",
                value: self.tau.to_string(),
                constraint: "must satisfy tau > 1",
            });
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(LossError::InvalidConfig {
                field: "lambda",
                value: self.lambda.to_string(),
                constraint: "must satisfy lambda >= 0",
            });
        }
        if self.k_perturb < 1 {
            return Err(LossError::InvalidConfig {
                field: "k_perturb",
                value: self.k_perturb.to_string(),
                constraint: "must satisfy k_perturb >= 1",
            });
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<(), LossError> {
    RobustLossConfig {
        tau,
        ..Default::default()
    }
    .validate()
}

/// Partially huberised cross-entropy: linear below `p = 1/tau`, `-ln p` above.
pub fn phce<T: Scalar>(p: T, tau: T) -> Result<T, LossError> {
    check_tau(tau.as_f64())?;
    let p = clamp_prob(p);
    Ok(if p <= T::one() / tau {
        -tau * p + tau.ln() + T::one()
    } else {
        -p.ln()
    })
}

/// Derivative of [`phce`] with respect to `p`.
pub fn phce_derivative<T: Scalar>(p: T, tau: T) -> Result<T, LossError> {
    check_tau(tau.as_f64())?;
    let p = clamp_prob(p);
    Ok(if p <= T::one() / tau { -tau } else { -T::one() / p })
}

fn token_loss<T: Scalar>(p: T, config: &RobustLossConfig) -> T {
    match config.loss_kind {
        LossKind::Phce => phce(p, T::of(config.tau)).expect("validated tau"),
        LossKind::CrossEntropy => -clamp_prob(p).ln(),
    }
}

/// Mean token loss over selected tokens; `(0, true)` when none is selected.
pub fn msl_loss<T: Scalar>(
    distributions: &Tensor<T>,
    pseudo: &[usize],
    mask: &[bool],
    config: &RobustLossConfig,
) -> Result<(T, bool), LossError> {
    config.validate()?;
    let len = distributions.rows();
    if pseudo.len() != len || mask.len() != len {
        return Err(LossError::Shape(format!(
            "{} rows, {} pseudo labels, {} mask entries",
            len,
            pseudo.len(),
            mask.len()
        )));
    }
    let selected: Vec<usize> = (0..len).filter(|&j| mask[j]).collect();
    if selected.is_empty() {
        return Ok((T::zero(), true));
    }
    let total: T = selected.iter().map(|&j| token_loss(distributions.get(j, pseudo[j]), config)).sum();
    Ok((total / T::of(selected.len() as f64), false))
}

/// `hidden ⊙ (mu + sigma ⊙ epsilon)`.
pub fn gaussian_perturb<T: Scalar>(hidden: &[T], mu: &[T], sigma: &[T], epsilon: &[T]) -> Vec<T> {
    assert!(hidden.len() == mu.len() && mu.len() == sigma.len() && sigma.len() == epsilon.len());
    hidden
        .iter()
        .zip(mu)
        .zip(sigma.iter().zip(epsilon))
        .map(|((&h, &m), (&s, &e))| h * (m + s * e))
        .collect()
}

/// Standard-normal draws for `k` perturbations of an `[L, width]` block.
pub fn noise_draws<T: Scalar>(seed: u64, k: usize, len: usize, width: usize) -> Vec<Vec<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k)
        .map(|_| {
            (0..len * width)
                .map(|_| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    T::of(e)
                })
                .collect()
        })
        .collect()
}

/// Consistency term of one encoded sentence: mean over tokens and draws of
/// `KL(p(y | h) || p(y | perturbed h))` under the emission softmax.
pub fn gcr_loss<T: Scalar>(
    model: &SequenceLabeler<T>,
    encoded: &EncodedSentence<T>,
    config: &RobustLossConfig,
    seed: u64,
) -> T {
    let (len, width) = (encoded.hidden.rows(), encoded.hidden.cols());
    let draws = noise_draws::<T>(seed, config.k_perturb, len, width);
    let mut total = T::zero();
    for eps in &draws {
        for j in 0..len {
            let h = encoded.hidden.row(j);
            let (mu, sigma) = model.gaussian_project(h);
            let hat = gaussian_perturb(h, &mu, &sigma, &eps[j * width..(j + 1) * width]);
            let lp = log_softmax(&model_logits(model, h));
            let lq = log_softmax(&model_logits(model, &hat));
            total += lp.iter().zip(&lq).map(|(&a, &b)| a.exp() * (a - b)).sum::<T>();
        }
    }
    (total / T::of((len * config.k_perturb) as f64)).max(T::zero())
}

fn model_logits<T: Scalar>(model: &SequenceLabeler<T>, hidden: &[T]) -> Vec<T> {
    let w = model.param(ParamId::OutWeight);
    let b = model.param(ParamId::OutBias).values();
    let y = b.len();
    (0..y)
        .map(|c| b[c] + hidden.iter().enumerate().map(|(k, &h)| h * w.get(k, c)).sum::<T>())
        .collect()
}

/// Records the supervised negative log-likelihood of `gold` on `tape`.
pub fn supervised_nll_on_tape<T: Scalar>(
    model: &SequenceLabeler<T>,
    tape: &mut Tape<T>,
    fwd: &TapeForward,
    gold: &[usize],
) -> Var {
    match model.config().head {
        HeadKind::Softmax => {
            let ls = tape.log_softmax(fwd.emissions);
            let picked = tape.pick(ls, gold.iter().copied().enumerate().collect());
            let s = tape.sum(picked);
            tape.scale(s, -T::one())
        }
        HeadKind::Crf => {
            let tr = fwd.param(model.param_ids(), ParamId::Transitions);
            let z = crf_log_partition_on_tape(tape, fwd.emissions, tr, None);
            let pinned = crf_log_partition_on_tape(tape, fwd.emissions, tr, Some(gold.iter().map(|&t| Some(t)).collect()));
            tape.sub(z, pinned)
        }
    }
}

/// `log p_j(target_j)` for the listed positions, as a vector on `tape`.
pub fn token_log_probs_on_tape<T: Scalar>(
    model: &SequenceLabeler<T>,
    tape: &mut Tape<T>,
    fwd: &TapeForward,
    positions: &[usize],
    targets: &[usize],
) -> Var {
    match model.config().head {
        HeadKind::Softmax => {
            let ls = tape.log_softmax(fwd.emissions);
            tape.pick(ls, positions.iter().map(|&j| (j, targets[j])).collect())
        }
        HeadKind::Crf => {
            let tr = fwd.param(model.param_ids(), ParamId::Transitions);
            let len = targets.len();
            let z = crf_log_partition_on_tape(tape, fwd.emissions, tr, None);
            let mut parts = Vec::with_capacity(positions.len());
            for &j in positions {
                let mut fixed = vec![None; len];
                fixed[j] = Some(targets[j]);
                let zj = crf_log_partition_on_tape(tape, fwd.emissions, tr, Some(fixed));
                parts.push(tape.sub(zj, z));
            }
            let mut acc = parts[0];
            for &p in &parts[1..] {
                acc = tape.concat_cols(acc, p);
            }
            acc
        }
    }
}

/// Masked robust loss of one sentence on `tape`; `None` if nothing is selected.
pub fn msl_on_tape<T: Scalar>(
    model: &SequenceLabeler<T>,
    tape: &mut Tape<T>,
    fwd: &TapeForward,
    pseudo: &[usize],
    mask: &[bool],
    config: &RobustLossConfig,
) -> Option<Var> {
    let positions: Vec<usize> = (0..pseudo.len()).filter(|&j| mask[j]).collect();
    if positions.is_empty() {
        return None;
    }
    let lp = token_log_probs_on_tape(model, tape, fwd, &positions, pseudo);
    let total = robust_nll_on_tape(tape, lp, config.loss_kind, T::of(config.tau));
    Some(tape.scale(total, T::one() / T::of(positions.len() as f64)))
}

/// Consistency term on `tape` given the (possibly dropped-out) hidden rows.
pub fn gcr_on_tape<T: Scalar>(
    model: &SequenceLabeler<T>,
    tape: &mut Tape<T>,
    fwd: &TapeForward,
    config: &RobustLossConfig,
    seed: u64,
) -> Var {
    let (len, width) = {
        let h = tape.value(fwd.hidden);
        (h.rows(), h.cols())
    };
    let (mu, sigma) = model.gaussian_on_tape(tape, fwd, fwd.hidden);
    let clean = model.emissions_on_tape(tape, fwd, fwd.hidden);
    let mut terms = Vec::with_capacity(config.k_perturb);
    for eps in noise_draws::<T>(seed, config.k_perturb, len, width) {
        let e = tape.constant(Tensor::matrix(len, width, eps));
        let se = tape.mul(sigma, e);
        let scale = tape.add(mu, se);
        let hat = tape.mul(fwd.hidden, scale);
        let perturbed = model.emissions_on_tape(tape, fwd, hat);
        terms.push(kl_rows_on_tape(tape, clean, perturbed, config.stop_gradient));
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t);
    }
    tape.scale(acc, T::one() / T::of((len * config.k_perturb) as f64))
}

/// A pseudo-labeled sentence with its selection mask. `id` keys the
/// per-sentence random streams, so results do not depend on batch order.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedSentence {
    pub id: u64,
    pub sentence: Sentence,
    pub pseudo: Vec<usize>,
    pub mask: Vec<bool>,
}

/// Summed gradients, one buffer per model parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads<T> {
    pub grads: Vec<Vec<T>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn zeros(model: &SequenceLabeler<T>) -> Self {
        Self {
            grads: model.params().iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }

    pub fn accumulate(&mut self, tape_grads: &crate::numerics::Grads<T>, fwd: &TapeForward) {
        for (acc, &v) in self.grads.iter_mut().zip(&fwd.params) {
            if let Some(g) = tape_grads.get(v) {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }

    pub fn flat(&self) -> Vec<T> {
        self.grads.iter().flatten().copied().collect()
    }
}

/// Result of one objective evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveValue<T> {
    pub loss: T,
    pub grads: ParamGrads<T>,
    /// Sentences whose mask selected nothing.
    pub skipped: usize,
}

/// Per-sentence seeds for dropout and consistency noise.
pub fn sentence_seeds(seed: u64, id: u64) -> (u64, u64) {
    let seeds = RunSeeds::new(seed);
    (seeds.seed(Stream::Dropout, id), seeds.seed(Stream::Noise, id))
}

/// `Σ [msl + λ·gcr]` over `batch`, with gradients for every parameter.
/// Dropout is active iff `train_dropout`.
pub fn combined_objective<T: Scalar>(
    batch: &[MaskedSentence],
    model: &SequenceLabeler<T>,
    config: &RobustLossConfig,
    seed: u64,
    train_dropout: bool,
) -> Result<ObjectiveValue<T>, LossError> {
    config.validate()?;
    let mut out = ObjectiveValue {
        loss: T::zero(),
        grads: ParamGrads::zeros(model),
        skipped: 0,
    };
    for item in batch {
        let (drop_seed, noise_seed) = sentence_seeds(seed, item.id);
        let mut rng = ChaCha8Rng::seed_from_u64(drop_seed);
        let mut tape = Tape::new();
        let fwd = model.forward_tape(&mut tape, &model.token_ids(&item.sentence), train_dropout.then_some(&mut rng), true);
        let msl = msl_on_tape(model, &mut tape, &fwd, &item.pseudo, &item.mask, config);
        if msl.is_none() {
            out.skipped += 1;
        }
        let gcr = (config.lambda > 0.0).then(|| {
            let g = gcr_on_tape(model, &mut tape, &fwd, config, noise_seed);
            tape.scale(g, T::of(config.lambda))
        });
        let loss = match (msl, gcr) {
            (Some(a), Some(b)) => tape.add(a, b),
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => continue,
        };
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(LossError::NonFinite { sentence: item.id });
        }
        out.loss += value;
        let grads = tape.backward(loss);
        out.grads.accumulate(&grads, &fwd);
    }
    Ok(out)
}

/// Summed supervised NLL over `(id, sentence)` pairs carrying gold tags.
pub fn supervised_objective<T: Scalar>(
    batch: &[(u64, &Sentence)],
    model: &SequenceLabeler<T>,
    seed: u64,
    train_dropout: bool,
) -> Result<ObjectiveValue<T>, LossError> {
    let mut out = ObjectiveValue {
        loss: T::zero(),
        grads: ParamGrads::zeros(model),
        skipped: 0,
    };
    for &(id, sentence) in batch {
        let gold = sentence
            .gold_tags
            .as_ref()
            .ok_or_else(|| LossError::Shape(format!("sentence {id} has no gold tags")))?;
        let (drop_seed, _) = sentence_seeds(seed, id);
        let mut rng = ChaCha8Rng::seed_from_u64(drop_seed);
        let mut tape = Tape::new();
        let fwd = model.forward_tape(&mut tape, &model.token_ids(sentence), train_dropout.then_some(&mut rng), true);
        let loss = supervised_nll_on_tape(model, &mut tape, &fwd, gold);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(LossError::NonFinite { sentence: id });
        }
        out.loss += value;
        let grads = tape.backward(loss);
        out.grads.accumulate(&grads, &fwd);
    }
    Ok(out)
}
