//! Tape-based reverse-mode automatic differentiation over dense matrices.
//!
//! Nodes are appended to the tape in evaluation order, so the tape order is a
//! topological order and [`Graph::backward`] is a single reverse sweep that
//! visits each node once. Leaves are either constants or parameters; only
//! nodes that depend on a parameter carry gradients.
//!
//! Binary elementwise ops broadcast a single-row operand over the batch axis
//! and nothing else.
//!
//! `abs` uses subgradient 0 at exactly 0. `clamp` passes the gradient through
//! on the closed interval and blocks it outside.

use std::borrow::Cow;

use super::tensor::{broadcast_rows, gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum Unary {
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Relu,
    Abs,
    Softplus,
    Square,
    Scale(f64),
    Offset(f64),
    Clamp(f64, f64),
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Relu => x.max(0.0),
            Unary::Abs => x.abs(),
            Unary::Softplus => softplus(x),
            Unary::Square => x * x,
            Unary::Scale(c) => c * x,
            Unary::Offset(c) => x + c,
            Unary::Clamp(lo, hi) => x.clamp(lo, hi),
        }
    }

    /// d(output)/d(input) given the input `x` and the output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Softplus => sigmoid(x),
            Unary::Square => 2.0 * x,
            Unary::Scale(c) => c,
            Unary::Offset(_) => 1.0,
            Unary::Clamp(lo, hi) => {
                if (lo..=hi).contains(&x) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Unary(Unary, Var),
    Sum(Var),
    SumCols(Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Single-use computation tape. Build an expression, call
/// [`backward`](Graph::backward) on a scalar, read gradients from the result.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; `None` when `v` does not
    /// depend on any parameter.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    pub fn param_ref(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Cow::Owned(out), Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_broadcast(self.value(b), "add", |x, y| x + y)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Cow::Owned(out), Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_broadcast(self.value(b), "sub", |x, y| x - y)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Cow::Owned(out), Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_broadcast(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Cow::Owned(out), Op::Mul(a, b), rg))
    }

    fn unary(&mut self, u: Unary, a: Var) -> Var {
        let out = self.value(a).map(|x| u.apply(x));
        let rg = self.needs(a);
        self.push(Cow::Owned(out), Op::Unary(u, a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Unary::Abs, a)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(Unary::Scale(c), a)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(Unary::Offset(c), a)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(Unary::Clamp(lo, hi), a)
    }

    /// Sum of all entries, as a `1 x 1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.needs(a);
        self.push(Cow::Owned(Tensor::scalar(s)), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sum: `n x m` to `n x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = t.dims();
        let sums: Vec<f64> = (0..r).map(|i| t.data()[i * c..(i + 1) * c].iter().sum()).collect();
        let rg = self.needs(a);
        self.push(Cow::Owned(Tensor::column(&sums)), Op::SumCols(a), rg)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.needs(root) {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::full(root_value.shape(), 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = self.value(a).dims();
                    let n = self.value(b).cols();
                    if self.needs(a) {
                        // dA = G Bᵀ
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, g.data(), false, self.value(b).data(), true, &mut da, false);
                        accumulate(&mut grads, a, Tensor::matrix(m, k, da)?);
                    }
                    if self.needs(b) {
                        // dB = Aᵀ G
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, self.value(a).data(), true, g.data(), false, &mut db, false);
                        accumulate(&mut grads, b, Tensor::matrix(k, n, db)?);
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if self.needs(a) {
                        let ga = reduce_to(&g, self.value(a).shape());
                        accumulate(&mut grads, a, ga);
                    }
                    if self.needs(b) {
                        let mut gb = reduce_to(&g, self.value(b).shape());
                        if sign < 0.0 {
                            gb.data_mut().iter_mut().for_each(|v| *v = -*v);
                        }
                        accumulate(&mut grads, b, gb);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(a) {
                        let full = g.zip_broadcast(self.value(b), "mul", |x, y| x * y)?;
                        accumulate(&mut grads, a, reduce_to(&full, self.value(a).shape()));
                    }
                    if self.needs(b) {
                        let full = g.zip_broadcast(self.value(a), "mul", |x, y| x * y)?;
                        accumulate(&mut grads, b, reduce_to(&full, self.value(b).shape()));
                    }
                }
                Op::Unary(u, a) => {
                    if self.needs(a) {
                        let x = self.value(a).data();
                        let y = node.value.data();
                        let data = g
                            .data()
                            .iter()
                            .zip(x.iter().zip(y))
                            .map(|(&gv, (&xv, &yv))| gv * u.derivative(xv, yv))
                            .collect();
                        accumulate(&mut grads, a, Tensor::new(self.value(a).shape().to_vec(), data)?);
                    }
                }
                Op::Sum(a) => {
                    if self.needs(a) {
                        let t = Tensor::full(self.value(a).shape(), g.item());
                        accumulate(&mut grads, a, t);
                    }
                }
                Op::SumCols(a) => {
                    if self.needs(a) {
                        let shape = self.value(a).shape().to_vec();
                        let (r, c) = self.value(a).dims();
                        let mut data = Vec::with_capacity(r * c);
                        for &gv in g.data() {
                            data.extend(std::iter::repeat_n(gv, c));
                        }
                        accumulate(&mut grads, a, Tensor::new(shape, data)?);
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(e, x)| *e += x),
        slot @ None => *slot = Some(g),
    }
}

/// Sums a broadcast gradient back down to the operand's shape.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let (gr, c) = g.dims();
    let target_rows = Tensor::zeros(shape).rows();
    debug_assert_eq!(broadcast_rows(gr, target_rows, c, c), Some(gr));
    let mut out = vec![0.0; c];
    for i in 0..gr {
        for (o, v) in out.iter_mut().zip(g.row_slice(i)) {
            *o += v;
        }
    }
    Tensor::new(shape.to_vec(), out).expect("broadcast operand has a single row")
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_exp_roundtrip() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[0.0]));
        let e = g.exp(x);
        let l = g.log(e);
        assert_eq!(g.value(l).data(), &[0.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[0.0]));
        let s = g.sigmoid(x);
        assert_eq!(g.value(s).data(), &[0.5]);
    }

    #[test]
    fn abs_backward_is_sign() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(&[-2.0, 3.0]));
        let a = g.abs(x);
        let s = g.sum(a);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[-1.0, 1.0]);
    }

    #[test]
    fn abs_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(&[0.0, -0.0]));
        let a = g.abs(x);
        let s = g.sum(a);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(&[1.0, 2.0, 3.0]));
        let xx = g.mul(x, x).unwrap();
        let s = g.sum(xx);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn l1_norm_gradient() {
        let mut g = Graph::new();
        let d = g.param(Tensor::row(&[0.5, -0.25]));
        let a = g.abs(d);
        let s = g.sum(a);
        assert_eq!(g.value(s).item(), 0.75);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(d).unwrap().data(), &[1.0, -1.0]);
    }

    #[test]
    fn clamp_blocks_gradient_outside() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(&[-1.0, 0.5, 2.0]));
        let c = g.clamp(x, 0.0, 1.0);
        assert_eq!(g.value(c).data(), &[0.0, 0.5, 1.0]);
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(&[1.0, 2.0]));
        let y = g.exp(x);
        assert!(matches!(g.backward(y), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn broadcast_bias_gradient_sums_over_batch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap());
        let b = g.param(Tensor::row(&[0.1, 0.2]));
        let y = g.add(x, b).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn shape_mismatch_is_structured() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        match g.add(a, b) {
            Err(Error::ShapeMismatch { op, left, right }) => {
                assert_eq!(op, "add");
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![3, 2]);
            }
            _ => panic!("expected shape mismatch"),
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::row(&[1.0]));
        let p = g.param(Tensor::row(&[2.0]));
        let m = g.mul(c, p).unwrap();
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[1.0]);
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
