//! Single-direction LSTM layer as one fused tape operation.

use crate::numerics::tape::{matmul, matmul_at_acc, matmul_bt_acc, sigmoid};
use crate::numerics::{CustomOp, Tensor};
use crate::Scalar;

/// Activations retained for the backward pass.
pub(crate) struct LstmTrace<T> {
    /// `[L, h]` hidden states, stored at their sequence position.
    pub out: Vec<T>,
    /// `[L, 4h]` activated gates `i, f, g, o` per position.
    pub gates: Vec<T>,
    /// `[L, h]` cell states.
    pub cells: Vec<T>,
}

fn order(len: usize, reverse: bool) -> Vec<usize> {
    if reverse {
        (0..len).rev().collect()
    } else {
        (0..len).collect()
    }
}

/// Runs the layer over `x` (`[len, d]`); gate weights are packed `[i | f | g | o]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn lstm_forward<T: Scalar>(
    x: &[T],
    len: usize,
    d: usize,
    w_ih: &[T],
    w_hh: &[T],
    bias: &[T],
    h: usize,
    reverse: bool,
) -> LstmTrace<T> {
    let g4 = 4 * h;
    let mut pre = matmul(x, w_ih, len, d, g4);
    for row in pre.chunks_mut(g4) {
        for (p, &b) in row.iter_mut().zip(bias) {
            *p += b;
        }
    }
    let mut out = vec![T::zero(); len * h];
    let mut gates = vec![T::zero(); len * g4];
    let mut cells = vec![T::zero(); len * h];
    let mut prev: Option<usize> = None;
    for t in order(len, reverse) {
        let z = &mut pre[t * g4..(t + 1) * g4];
        if let Some(p) = prev {
            let hp = &out[p * h..(p + 1) * h];
            for (k, &hv) in hp.iter().enumerate() {
                if hv == T::zero() {
                    continue;
                }
                let wrow = &w_hh[k * g4..(k + 1) * g4];
                for (zv, &w) in z.iter_mut().zip(wrow) {
                    *zv += hv * w;
                }
            }
        }
        let gt = &mut gates[t * g4..(t + 1) * g4];
        for u in 0..h {
            let i = sigmoid(z[u]);
            let f = sigmoid(z[h + u]);
            let g = z[2 * h + u].tanh();
            let o = sigmoid(z[3 * h + u]);
            gt[u] = i;
            gt[h + u] = f;
            gt[2 * h + u] = g;
            gt[3 * h + u] = o;
            let c_prev = prev.map_or(T::zero(), |p| cells[p * h + u]);
            let c = f * c_prev + i * g;
            cells[t * h + u] = c;
            out[t * h + u] = o * c.tanh();
        }
        prev = Some(t);
    }
    LstmTrace { out, gates, cells }
}

pub(crate) struct LstmOp<T> {
    pub len: usize,
    pub d: usize,
    pub h: usize,
    pub reverse: bool,
    pub gates: Vec<T>,
    pub cells: Vec<T>,
}

impl<T: Scalar> CustomOp<T> for LstmOp<T> {
    /// Inputs: `x [L,d]`, `w_ih [d,4h]`, `w_hh [h,4h]`, `bias [4h]`.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad_out: &[T]) -> Vec<Vec<T>> {
        let (len, d, h) = (self.len, self.d, self.h);
        let g4 = 4 * h;
        let x = inputs[0].values();
        let w_ih = inputs[1].values();
        let w_hh = inputs[2].values();
        let out = output.values();

        let mut dpre = vec![T::zero(); len * g4];
        let mut dw_hh = vec![T::zero(); h * g4];
        let mut dh_next = vec![T::zero(); h];
        let mut dc_next = vec![T::zero(); h];
        let steps = order(len, self.reverse);
        for (k, &t) in steps.iter().enumerate().rev() {
            let prev = (k > 0).then(|| steps[k - 1]);
            let gt = &self.gates[t * g4..(t + 1) * g4];
            let dz = &mut dpre[t * g4..(t + 1) * g4];
            for u in 0..h {
                let (i, f, g, o) = (gt[u], gt[h + u], gt[2 * h + u], gt[3 * h + u]);
                let c = self.cells[t * h + u];
                let tc = c.tanh();
                let dh = grad_out[t * h + u] + dh_next[u];
                let dc = dh * o * (T::one() - tc * tc) + dc_next[u];
                let c_prev = prev.map_or(T::zero(), |p| self.cells[p * h + u]);
                dz[u] = dc * g * i * (T::one() - i);
                dz[h + u] = dc * c_prev * f * (T::one() - f);
                dz[2 * h + u] = dc * i * (T::one() - g * g);
                dz[3 * h + u] = dh * tc * o * (T::one() - o);
                dc_next[u] = dc * f;
            }
            dh_next.iter_mut().for_each(|v| *v = T::zero());
            if let Some(p) = prev {
                let hp = &out[p * h..(p + 1) * h];
                matmul_at_acc(hp, dz, &mut dw_hh, 1, h, g4);
                matmul_bt_acc(dz, w_hh, &mut dh_next, 1, h, g4);
            }
        }
        let mut dx = vec![T::zero(); len * d];
        matmul_bt_acc(&dpre, w_ih, &mut dx, len, d, g4);
        let mut dw_ih = vec![T::zero(); d * g4];
        matmul_at_acc(x, &dpre, &mut dw_ih, len, d, g4);
        let mut db = vec![T::zero(); g4];
        for row in dpre.chunks(g4) {
            for (b, &v) in db.iter_mut().zip(row) {
                *b += v;
            }
        }
        vec![dx, dw_ih, dw_hh, db]
    }
}
