//! Reverse-mode differentiation over a linear tape of coarse tensor ops.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological sort and `backward` is a single reverse sweep.

use super::math::log_sum_exp;
use super::tensor::Tensor;
use crate::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fused operation whose forward value is computed by the caller.
///
/// `backward` returns one gradient buffer per input, in input order.
pub trait CustomOp<T: Scalar>: Send + Sync {
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad_out: &[T]) -> Vec<Vec<T>>;
}

enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    Gather(Var, Vec<usize>),
    ConcatCols(Var, Var),
    LogSoftmax(Var),
    Pick(Var, Vec<(usize, usize)>),
    Sum(Var),
    Custom(Vec<Var>, Box<dyn CustomOp<T>>),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records one forward evaluation; owned by a single training step.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads[v.0].take()
    }
}

pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out[m,k] += g[m,n] · bᵀ` where `b` is `[k,n]`.
pub(crate) fn matmul_bt_acc<T: Scalar>(g: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = T::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            out[i * k + p] += s;
        }
    }
}

/// `out[k,n] += aᵀ · g` where `a` is `[m,k]` and `g` is `[m,n]`.
pub(crate) fn matmul_at_acc<T: Scalar>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    if x > T::of(30.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, contribution: &[T]) {
    match slot {
        Some(g) => {
            for (a, &b) in g.iter_mut().zip(contribution) {
                *a += b;
            }
        }
        None => *slot = Some(contribution.to_vec()),
    }
}

fn accumulate_owned<T: Scalar>(slot: &mut Option<Vec<T>>, contribution: Vec<T>) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contribution) {
                *a += b;
            }
        }
        None => *slot = Some(contribution),
    }
}

fn dims2<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = dims2(self.value(a));
        let (k2, n) = dims2(self.value(b));
        assert_eq!(k, k2, "matmul inner dimensions");
        let out = matmul(self.value(a).values(), self.value(b).values(), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), ng)
    }

    /// Adds a length-`n` bias to every row of an `[m,n]` matrix.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let n = av.cols();
        let bias = self.value(b).values();
        assert_eq!(bias.len(), n, "bias length");
        let mut out = av.values().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let shape = av.shape().to_vec();
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(shape, out).unwrap(), Op::AddBias(a, b), ng)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "elementwise operands");
        let out: Vec<T> = av.values().iter().zip(bv.values()).map(|(&x, &y)| f(x, y)).collect();
        let shape = av.shape().to_vec();
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(shape, out).unwrap(), op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(out, op, ng)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let d = t.cols();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(t.row(id));
        }
        let ng = self.ng(table);
        self.push(Tensor::matrix(ids.len(), d, out), Op::Gather(table, ids.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, n1) = dims2(av);
        let (m2, n2) = dims2(bv);
        assert_eq!(m, m2, "concat rows");
        let mut out = Vec::with_capacity(m * (n1 + n2));
        for r in 0..m {
            out.extend_from_slice(av.row(r));
            out.extend_from_slice(bv.row(r));
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::matrix(m, n1 + n2, out), Op::ConcatCols(a, b), ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.cols();
        let mut out = Vec::with_capacity(av.len());
        for row in av.values().chunks(n) {
            let z = log_sum_exp(row);
            out.extend(row.iter().map(|&x| x - z));
        }
        let shape = av.shape().to_vec();
        let ng = self.ng(a);
        self.push(Tensor::new(shape, out).unwrap(), Op::LogSoftmax(a), ng)
    }

    /// Selects `a[r, c]` for each `(r, c)`, producing a vector.
    pub fn pick(&mut self, a: Var, at: Vec<(usize, usize)>) -> Var {
        let av = self.value(a);
        let out: Vec<T> = at.iter().map(|&(r, c)| av.get(r, c)).collect();
        let ng = self.ng(a);
        self.push(Tensor::vector(out), Op::Pick(a, at), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).values().iter().copied().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn custom(&mut self, inputs: Vec<Var>, output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        let ng = inputs.iter().any(|&v| self.ng(v));
        self.push(output, Op::Custom(inputs, op), ng)
    }

    /// Reverse sweep from a scalar `loss`. Every leaf marked as requiring a
    /// gradient receives one, zero-filled when the loss does not reach it.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.needs_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(vec![T::zero(); node.value.len()]);
            }
        }
        Grads { grads }
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(val(*a));
                let n = val(*b).cols();
                if self.ng(*a) {
                    let mut da = vec![T::zero(); m * k];
                    matmul_bt_acc(g, val(*b).values(), &mut da, m, k, n);
                    accumulate_owned(&mut grads[a.0], da);
                }
                if self.ng(*b) {
                    let mut db = vec![T::zero(); k * n];
                    matmul_at_acc(val(*a).values(), g, &mut db, m, k, n);
                    accumulate_owned(&mut grads[b.0], db);
                }
            }
            Op::AddBias(a, b) => {
                if self.ng(*a) {
                    accumulate(&mut grads[a.0], g);
                }
                if self.ng(*b) {
                    let n = val(*b).len();
                    let mut db = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        for (d, &x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    accumulate_owned(&mut grads[b.0], db);
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    accumulate(&mut grads[a.0], g);
                }
                if self.ng(*b) {
                    accumulate(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    accumulate(&mut grads[a.0], g);
                }
                if self.ng(*b) {
                    let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                    accumulate_owned(&mut grads[b.0], neg);
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let d: Vec<T> = g.iter().zip(val(*b).values()).map(|(&x, &y)| x * y).collect();
                    accumulate_owned(&mut grads[a.0], d);
                }
                if self.ng(*b) {
                    let d: Vec<T> = g.iter().zip(val(*a).values()).map(|(&x, &y)| x * y).collect();
                    accumulate_owned(&mut grads[b.0], d);
                }
            }
            Op::Scale(a, c) => {
                let d: Vec<T> = g.iter().map(|&x| x * *c).collect();
                accumulate_owned(&mut grads[a.0], d);
            }
            Op::Sigmoid(a) => {
                let d: Vec<T> = g
                    .iter()
                    .zip(node.value.values())
                    .map(|(&x, &s)| x * s * (T::one() - s))
                    .collect();
                accumulate_owned(&mut grads[a.0], d);
            }
            Op::Tanh(a) => {
                let d: Vec<T> = g
                    .iter()
                    .zip(node.value.values())
                    .map(|(&x, &t)| x * (T::one() - t * t))
                    .collect();
                accumulate_owned(&mut grads[a.0], d);
            }
            Op::Relu(a) => {
                let d: Vec<T> = g
                    .iter()
                    .zip(val(*a).values())
                    .map(|(&x, &i)| if i > T::zero() { x } else { T::zero() })
                    .collect();
                accumulate_owned(&mut grads[a.0], d);
            }
            Op::Softplus(a) => {
                let d: Vec<T> = g
                    .iter()
                    .zip(val(*a).values())
                    .map(|(&x, &i)| x * sigmoid(i))
                    .collect();
                accumulate_owned(&mut grads[a.0], d);
            }
            Op::Gather(table, ids) => {
                let t = val(*table);
                let d = t.cols();
                let slot = grads[table.0].get_or_insert_with(|| vec![T::zero(); t.len()]);
                for (i, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        slot[id * d + c] += g[i * d + c];
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let n1 = val(*a).cols();
                let n2 = val(*b).cols();
                let n = n1 + n2;
                if self.ng(*a) {
                    let d: Vec<T> = g.chunks(n).flat_map(|r| r[..n1].iter().copied()).collect();
                    accumulate_owned(&mut grads[a.0], d);
                }
                if self.ng(*b) {
                    let d: Vec<T> = g.chunks(n).flat_map(|r| r[n1..].iter().copied()).collect();
                    accumulate_owned(&mut grads[b.0], d);
                }
            }
            Op::LogSoftmax(a) => {
                let n = node.value.cols();
                let mut d = Vec::with_capacity(g.len());
                for (grow, lrow) in g.chunks(n).zip(node.value.values().chunks(n)) {
                    let gs: T = grow.iter().copied().sum();
                    d.extend(grow.iter().zip(lrow).map(|(&x, &l)| x - l.exp() * gs));
                }
                accumulate_owned(&mut grads[a.0], d);
            }
            Op::Pick(a, at) => {
                let av = val(*a);
                let n = av.cols();
                let slot = grads[a.0].get_or_insert_with(|| vec![T::zero(); av.len()]);
                for (&(r, c), &x) in at.iter().zip(g) {
                    slot[r * n + c] += x;
                }
            }
            Op::Sum(a) => {
                let d = vec![g[0]; val(*a).len()];
                accumulate_owned(&mut grads[a.0], d);
            }
            Op::Custom(inputs, op) => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
                let ds = op.backward(&ins, &node.value, g);
                debug_assert_eq!(ds.len(), inputs.len());
                for (v, d) in inputs.iter().zip(ds) {
                    if self.ng(*v) {
                        accumulate_owned(&mut grads[v.0], d);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks d(loss)/d(x) for a graph built by `build` from a single parameter.
    fn check(x: Tensor<f64>, build: impl Fn(&mut Tape<f64>, Var) -> Var) -> f64 {
        let f = |p: &Tensor<f64>| {
            let mut tape = Tape::new();
            let v = tape.param(p.clone());
            let out = build(&mut tape, v);
            let loss = tape.sum(out);
            let g = tape.backward(loss);
            (tape.value(loss).item(), g.get(v).unwrap().to_vec())
        };
        finite_diff_grad_check(f, &x, 1e-6).unwrap()
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&mut rng, vec![3, 4]);
        let w = random(&mut rng, vec![3, 4]);
        type Unary = Box<dyn Fn(&mut Tape<f64>, Var) -> Var>;
        let cases: Vec<Unary> = vec![
            Box::new(|t, v| t.sigmoid(v)),
            Box::new(|t, v| t.tanh(v)),
            Box::new(|t, v| t.softplus(v)),
            Box::new(|t, v| t.scale(v, -2.5)),
            Box::new(|t, v| t.mul(v, v)),
            Box::new(|t, v| {
                let a = t.sigmoid(v);
                t.sub(a, v)
            }),
            Box::new(move |t, v| {
                let c = t.constant(w.clone());
                let p = t.mul(v, c);
                t.log_softmax(p)
            }),
            Box::new(|t, v| {
                let l = t.log_softmax(v);
                t.pick(l, vec![(0, 1), (2, 3), (2, 3)])
            }),
            Box::new(|t, v| {
                let a = t.tanh(v);
                t.concat_cols(a, v)
            }),
        ];
        for (i, case) in cases.iter().enumerate() {
            let err = check(x.clone(), case);
            assert!(err < 1e-6, "case {i}: {err}");
        }
    }

    #[test]
    fn relu_away_from_kink() {
        let x = Tensor::vector(vec![0.5, -0.7, 1.2, -0.1]);
        assert!(check(x, |t, v| t.relu(v)) < 1e-8);
    }

    #[test]
    fn matmul_bias_gather() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = random(&mut rng, vec![4, 3]);
        let b = random(&mut rng, vec![3]);
        let x = random(&mut rng, vec![2, 4]);
        let (w2, b2) = (w.clone(), b.clone());
        assert!(check(x.clone(), move |t, v| {
            let wv = t.constant(w2.clone());
            let bv = t.constant(b2.clone());
            let m = t.matmul(v, wv);
            let y = t.add_bias(m, bv);
            t.tanh(y)
        }) < 1e-6);
        let x2 = x.clone();
        assert!(check(w, move |t, v| {
            let xv = t.constant(x2.clone());
            let m = t.matmul(xv, v);
            t.sigmoid(m)
        }) < 1e-6);
        assert!(check(b, move |t, v| {
            let xv = t.constant(Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]));
            let y = t.add_bias(xv, v);
            t.mul(y, y)
        }) < 1e-6);
        let table = random(&mut rng, vec![5, 2]);
        assert!(check(table, |t, v| {
            let g = t.gather(v, &[3, 0, 3]);
            t.tanh(g)
        }) < 1e-6);
    }

    #[test]
    fn unreachable_params_get_zero_gradients() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.param(Tensor::vector(vec![3.0]));
        let c = tape.constant(Tensor::vector(vec![5.0, 5.0]));
        let m = tape.mul(a, c);
        let loss = tape.sum(m);
        let g = tape.backward(loss);
        assert_eq!(g.get(a).unwrap(), &[5.0, 5.0]);
        assert_eq!(g.get(b).unwrap(), &[0.0]);
        assert!(g.get(c).is_none());
    }
}
