use super::{NumericsError, Tensor};
use crate::Scalar;

/// Central-difference estimate of the gradient of `f` at `params`.
pub fn central_difference<T, F>(mut f: F, params: &Tensor<T>, epsilon: T) -> Result<Vec<T>, NumericsError>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> T,
{
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = params.values()[i];
        probe.values_mut()[i] = orig + epsilon;
        let up = f(&probe);
        probe.values_mut()[i] = orig - epsilon;
        let down = f(&probe);
        probe.values_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(NumericsError::NonFinite { probe: i });
        }
        out.push((up - down) / (epsilon + epsilon));
    }
    Ok(out)
}

/// Maximum over parameters of `|analytic - numeric| / max(1, |numeric|)`.
///
/// `f` returns the loss and its analytic gradient with respect to `params`.
pub fn finite_diff_grad_check<T, F>(mut f: F, params: &Tensor<T>, epsilon: T) -> Result<T, NumericsError>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> (T, Vec<T>),
{
    let (value, analytic) = f(params);
    if !value.is_finite() {
        return Err(NumericsError::NonFinite { probe: usize::MAX });
    }
    if analytic.len() != params.len() {
        return Err(NumericsError::LengthMismatch(analytic.len(), params.len()));
    }
    let numeric = central_difference(|p| f(p).0, params, epsilon)?;
    let mut worst = T::zero();
    for (&a, &n) in analytic.iter().zip(&numeric) {
        let rel = (a - n).abs() / T::one().max(n.abs());
        worst = worst.max(rel);
    }
    Ok(worst)
}
