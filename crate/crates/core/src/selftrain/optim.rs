//! AdamW with linear warmup followed by linear decay.

use crate::losses::ParamGrads;
use crate::model::SequenceLabeler;
use crate::Scalar;

/// Learning-rate multiplier at 1-based `step` of `total`.
pub fn schedule(step: usize, total: usize, warmup_rate: f64) -> f64 {
    let warmup = (warmup_rate * total as f64).ceil() as usize;
    if step <= warmup && warmup > 0 {
        step as f64 / warmup as f64
    } else if total > warmup {
        (total.saturating_sub(step)) as f64 / (total - warmup) as f64
    } else {
        0.0
    }
}

pub struct AdamW<T> {
    lr: f64,
    weight_decay: f64,
    warmup_rate: f64,
    total_steps: usize,
    step: usize,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(model: &SequenceLabeler<T>, lr: f64, weight_decay: f64, warmup_rate: f64, total_steps: usize) -> Self {
        let zeros: Vec<Vec<T>> = model.params().iter().map(|p| vec![T::zero(); p.len()]).collect();
        Self {
            lr,
            weight_decay,
            warmup_rate,
            total_steps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn step(&mut self, model: &mut SequenceLabeler<T>, grads: &ParamGrads<T>) {
        self.step += 1;
        let lr = self.lr * schedule(self.step, self.total_steps, self.warmup_rate);
        if lr == 0.0 {
            return;
        }
        let (b1, b2) = (T::of(Self::BETA1), T::of(Self::BETA2));
        let c1 = T::one() - T::of(Self::BETA1.powi(self.step as i32));
        let c2 = T::one() - T::of(Self::BETA2.powi(self.step as i32));
        let (lr, wd, eps) = (T::of(lr), T::of(self.weight_decay), T::of(Self::EPS));
        for (((p, g), m), v) in model.params_mut().iter_mut().zip(&grads.grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &gi), mi), vi) in p.values_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + eps) + wd * *w;
                *w -= lr * update;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        assert_eq!(schedule(1, 100, 0.1), 0.1);
        assert_eq!(schedule(10, 100, 0.1), 1.0);
        assert!((schedule(55, 100, 0.1) - 0.5).abs() < 1e-12);
        assert_eq!(schedule(100, 100, 0.1), 0.0);
        assert_eq!(schedule(3, 10, 0.0), 0.7);
    }
}
