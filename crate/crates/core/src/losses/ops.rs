//! Fused tape operations for the token loss and the consistency KL.

use super::LossKind;
use crate::numerics::{log_softmax, CustomOp, Tape, Tensor, Var};
use crate::Scalar;

struct RobustNllOp<T> {
    kind: LossKind,
    tau: T,
}

impl<T: Scalar> RobustNllOp<T> {
    /// Loss and its derivative with respect to `log p`.
    fn eval(&self, lp: T) -> (T, T) {
        let floor = T::prob_floor().ln();
        match self.kind {
            LossKind::CrossEntropy => {
                if lp > floor {
                    (-lp, -T::one())
                } else {
                    (-floor, T::zero())
                }
            }
            LossKind::Phce => {
                let p = lp.exp().max(T::prob_floor()).min(T::one());
                if p <= T::one() / self.tau {
                    let g = if lp > floor { -self.tau * p } else { T::zero() };
                    (-self.tau * p + self.tau.ln() + T::one(), g)
                } else {
                    (-lp.min(T::zero()), if lp < T::zero() { -T::one() } else { T::zero() })
                }
            }
        }
    }
}

impl<T: Scalar> CustomOp<T> for RobustNllOp<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad_out: &[T]) -> Vec<Vec<T>> {
        vec![inputs[0].values().iter().map(|&lp| self.eval(lp).1 * grad_out[0]).collect()]
    }
}

/// Summed token loss of a tensor of log-probabilities.
pub fn robust_nll_on_tape<T: Scalar>(tape: &mut Tape<T>, log_probs: Var, kind: LossKind, tau: T) -> Var {
    let op = RobustNllOp { kind, tau };
    let total = tape.value(log_probs).values().iter().map(|&lp| op.eval(lp).0).sum();
    tape.custom(vec![log_probs], Tensor::scalar(total), Box::new(op))
}

struct KlRowsOp {
    stop_clean: bool,
}

struct RowTerms<T> {
    lp: Vec<T>,
    lq: Vec<T>,
    kl: T,
}

fn row_terms<T: Scalar>(clean: &[T], perturbed: &[T]) -> RowTerms<T> {
    let lp = log_softmax(clean);
    let lq = log_softmax(perturbed);
    let kl = lp.iter().zip(&lq).map(|(&a, &b)| a.exp() * (a - b)).sum();
    RowTerms { lp, lq, kl }
}

impl<T: Scalar> CustomOp<T> for KlRowsOp {
    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad_out: &[T]) -> Vec<Vec<T>> {
        let (clean, pert) = (inputs[0], inputs[1]);
        let g = grad_out[0];
        let mut dc = vec![T::zero(); clean.len()];
        let mut dp = vec![T::zero(); pert.len()];
        let y = clean.cols();
        for r in 0..clean.rows() {
            let t = row_terms(clean.row(r), pert.row(r));
            for c in 0..y {
                let p = t.lp[c].exp();
                dp[r * y + c] = g * (t.lq[c].exp() - p);
                if !self.stop_clean {
                    dc[r * y + c] = g * p * (t.lp[c] - t.lq[c] - t.kl);
                }
            }
        }
        vec![dc, dp]
    }
}

/// `Σ_rows KL(softmax(clean) || softmax(perturbed))`. With `stop_clean`,
/// no gradient reaches `clean`.
pub fn kl_rows_on_tape<T: Scalar>(tape: &mut Tape<T>, clean: Var, perturbed: Var, stop_clean: bool) -> Var {
    let (c, p) = (tape.value(clean), tape.value(perturbed));
    assert_eq!(c.shape(), p.shape(), "KL operands differ in shape");
    let total = (0..c.rows()).map(|r| row_terms(c.row(r), p.row(r)).kl).sum();
    tape.custom(vec![clean, perturbed], Tensor::scalar(total), Box::new(KlRowsOp { stop_clean }))
}
