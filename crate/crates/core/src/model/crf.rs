//! Linear-chain CRF: log partition, Viterbi decoding and token marginals.
//!
//! A path score is `Σ_j e[j, y_j] + Σ_{j>0} t[y_{j-1}, y_j]`. Positions can
//! be pinned to a single tag, which turns the log partition into the log of
//! the summed mass of the matching paths.

use crate::numerics::{CustomOp, Tape, Tensor, Var};
use crate::Scalar;

#[inline]
fn allowed(fixed: Option<&[Option<usize>]>, j: usize, c: usize) -> bool {
    match fixed.and_then(|f| f[j]) {
        Some(tag) => tag == c,
        None => true,
    }
}

#[inline]
fn lse_iter<T: Scalar>(vals: impl Iterator<Item = T> + Clone) -> T {
    let m = vals.clone().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    m + vals.map(|v| (v - m).exp()).sum::<T>().ln()
}

/// Forward log-scores `alpha[j, c]`.
fn alphas<T: Scalar>(em: &[T], tr: &[T], len: usize, y: usize, fixed: Option<&[Option<usize>]>) -> Vec<T> {
    let mut a = vec![T::neg_infinity(); len * y];
    for c in 0..y {
        if allowed(fixed, 0, c) {
            a[c] = em[c];
        }
    }
    for j in 1..len {
        for c in 0..y {
            if !allowed(fixed, j, c) {
                continue;
            }
            let prev = &a[(j - 1) * y..j * y];
            let s = lse_iter((0..y).map(|p| prev[p] + tr[p * y + c]));
            a[j * y + c] = s + em[j * y + c];
        }
    }
    a
}

/// Backward log-scores `beta[j, c]` (mass of the suffix after position `j`).
fn betas<T: Scalar>(em: &[T], tr: &[T], len: usize, y: usize, fixed: Option<&[Option<usize>]>) -> Vec<T> {
    let mut b = vec![T::neg_infinity(); len * y];
    for c in 0..y {
        b[(len - 1) * y + c] = T::zero();
    }
    for j in (0..len - 1).rev() {
        for c in 0..y {
            let next = &b[(j + 1) * y..(j + 2) * y];
            b[j * y + c] = lse_iter((0..y).filter(|&n| allowed(fixed, j + 1, n)).map(|n| {
                tr[c * y + n] + em[(j + 1) * y + n] + next[n]
            }));
        }
    }
    b
}

fn dims<T: Scalar>(em: &Tensor<T>, tr: &Tensor<T>) -> (usize, usize) {
    let (len, y) = (em.rows(), em.cols());
    assert!(len >= 1, "CRF needs at least one position");
    assert_eq!(tr.shape(), &[y, y], "transition matrix shape");
    (len, y)
}

fn log_partition_pinned<T: Scalar>(em: &Tensor<T>, tr: &Tensor<T>, fixed: Option<&[Option<usize>]>) -> T {
    let (len, y) = dims(em, tr);
    let a = alphas(em.values(), tr.values(), len, y, fixed);
    lse_iter(a[(len - 1) * y..].iter().copied())
}

/// Log of the summed exponentiated score of every tag path.
pub fn crf_log_partition<T: Scalar>(emissions: &Tensor<T>, transitions: &Tensor<T>) -> T {
    log_partition_pinned(emissions, transitions, None)
}

pub fn crf_path_score<T: Scalar>(emissions: &Tensor<T>, transitions: &Tensor<T>, tags: &[usize]) -> T {
    let (len, y) = dims(emissions, transitions);
    assert_eq!(tags.len(), len);
    let mut s = T::zero();
    for (j, &t) in tags.iter().enumerate() {
        s += emissions.get(j, t);
        if j > 0 {
            s += transitions.values()[tags[j - 1] * y + t];
        }
    }
    s
}

/// Highest-scoring path and its score. Ties go to the lowest tag index.
pub fn crf_viterbi<T: Scalar>(emissions: &Tensor<T>, transitions: &Tensor<T>) -> (Vec<usize>, T) {
    let (len, y) = dims(emissions, transitions);
    let em = emissions.values();
    let tr = transitions.values();
    let mut score = em[..y].to_vec();
    let mut back = vec![0usize; len * y];
    for j in 1..len {
        let mut next = vec![T::zero(); y];
        for c in 0..y {
            let mut best = 0;
            let mut best_v = score[0] + tr[c];
            for p in 1..y {
                let v = score[p] + tr[p * y + c];
                if v > best_v {
                    best_v = v;
                    best = p;
                }
            }
            back[j * y + c] = best;
            next[c] = best_v + em[j * y + c];
        }
        score = next;
    }
    let mut last = 0;
    for c in 1..y {
        if score[c] > score[last] {
            last = c;
        }
    }
    let best = score[last];
    let mut path = vec![0; len];
    path[len - 1] = last;
    for j in (1..len).rev() {
        path[j - 1] = back[j * y + path[j]];
    }
    (path, best)
}

struct Posteriors<T> {
    /// `[L, Y]`
    unary: Vec<T>,
    /// `[Y, Y]`, summed over positions.
    pairwise: Vec<T>,
}

fn posteriors<T: Scalar>(em: &[T], tr: &[T], len: usize, y: usize, fixed: Option<&[Option<usize>]>) -> Posteriors<T> {
    let a = alphas(em, tr, len, y, fixed);
    let b = betas(em, tr, len, y, fixed);
    let log_z = lse_iter(a[(len - 1) * y..].iter().copied());
    let unary: Vec<T> = a.iter().zip(&b).map(|(&x, &z)| (x + z - log_z).exp()).collect();
    let mut pairwise = vec![T::zero(); y * y];
    for j in 1..len {
        for p in 0..y {
            let ap = a[(j - 1) * y + p];
            if ap == T::neg_infinity() {
                continue;
            }
            for c in 0..y {
                if !allowed(fixed, j, c) {
                    continue;
                }
                pairwise[p * y + c] += (ap + tr[p * y + c] + em[j * y + c] + b[j * y + c] - log_z).exp();
            }
        }
    }
    Posteriors {
        unary,
        pairwise,
    }
}

/// `p(y_j = c | X)` for every position, via forward-backward.
pub fn crf_token_marginals<T: Scalar>(emissions: &Tensor<T>, transitions: &Tensor<T>) -> Tensor<T> {
    let (len, y) = dims(emissions, transitions);
    let p = posteriors(emissions.values(), transitions.values(), len, y, None);
    Tensor::matrix(len, y, p.unary)
}

struct CrfLogZOp {
    fixed: Option<Vec<Option<usize>>>,
}

impl<T: Scalar> CustomOp<T> for CrfLogZOp {
    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad_out: &[T]) -> Vec<Vec<T>> {
        let (em, tr) = (inputs[0], inputs[1]);
        let (len, y) = dims(em, tr);
        let p = posteriors(em.values(), tr.values(), len, y, self.fixed.as_deref());
        let g = grad_out[0];
        vec![
            p.unary.into_iter().map(|v| v * g).collect(),
            p.pairwise.into_iter().map(|v| v * g).collect(),
        ]
    }
}

/// Differentiable log partition. With `fixed`, positions holding `Some(tag)`
/// only admit that tag.
pub fn crf_log_partition_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    emissions: Var,
    transitions: Var,
    fixed: Option<Vec<Option<usize>>>,
) -> Var {
    let z = log_partition_pinned(tape.value(emissions), tape.value(transitions), fixed.as_deref());
    tape.custom(
        vec![emissions, transitions],
        Tensor::scalar(z),
        Box::new(CrfLogZOp { fixed }),
    )
}
