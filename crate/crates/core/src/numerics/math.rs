use super::NumericsError;
use crate::Scalar;

const SIMPLEX_TOL: f64 = 1e-6;

#[inline]
pub fn clamp_prob<T: Scalar>(p: T) -> T {
    p.max(T::prob_floor()).min(T::one())
}

pub fn validate_simplex<T: Scalar>(p: &[T]) -> Result<(), NumericsError> {
    if p.is_empty() {
        return Err(NumericsError::NotSimplex("empty vector".into()));
    }
    if let Some((i, v)) = p.iter().enumerate().find(|(_, v)| !(**v >= T::zero())) {
        return Err(NumericsError::NotSimplex(format!("entry {i} is {v}")));
    }
    let total: T = p.iter().copied().sum();
    // f32 accumulates more rounding than the nominal tolerance allows.
    let tol = SIMPLEX_TOL.max(T::epsilon().as_f64() * 4.0 * p.len() as f64);
    if (total.as_f64() - 1.0).abs() > tol {
        return Err(NumericsError::NotSimplex(format!("sums to {total}")));
    }
    Ok(())
}

/// Shannon entropy in nats; zero-probability terms contribute nothing.
pub fn entropy<T: Scalar>(p: &[T]) -> Result<T, NumericsError> {
    validate_simplex(p)?;
    Ok(entropy_unchecked(p))
}

pub(crate) fn entropy_unchecked<T: Scalar>(p: &[T]) -> T {
    let mut h = T::zero();
    for &pc in p {
        if pc > T::zero() {
            h -= pc * clamp_prob(pc).ln();
        }
    }
    h
}

/// `max(x) + ln Σ exp(x - max(x))`.
///
/// Panics on an empty slice.
pub fn log_sum_exp<T: Scalar>(x: &[T]) -> T {
    assert!(!x.is_empty(), "log_sum_exp of empty slice");
    if x.len() == 1 {
        return x[0];
    }
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    let s: T = x.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

pub fn log_softmax<T: Scalar>(x: &[T]) -> Vec<T> {
    let z = log_sum_exp(x);
    x.iter().map(|&v| v - z).collect()
}

pub fn softmax<T: Scalar>(x: &[T]) -> Vec<T> {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = x.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `Σ p_c ln(p_c / q_c)`; rejects `q_c = 0` where `p_c > 0`.
pub fn kl_divergence<T: Scalar>(p: &[T], q: &[T]) -> Result<T, NumericsError> {
    if p.len() != q.len() {
        return Err(NumericsError::LengthMismatch(p.len(), q.len()));
    }
    validate_simplex(p)?;
    validate_simplex(q)?;
    let mut kl = T::zero();
    for (i, (&pc, &qc)) in p.iter().zip(q).enumerate() {
        if pc > T::zero() {
            if qc <= T::zero() {
                return Err(NumericsError::SupportViolation {
                    index: i,
                    p: pc.as_f64(),
                });
            }
            kl += pc * (clamp_prob(pc).ln() - clamp_prob(qc).ln());
        }
    }
    Ok(kl)
}
