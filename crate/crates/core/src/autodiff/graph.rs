//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node to the [`Graph`]; nodes only ever refer to
//! earlier nodes, so insertion order is a topological order and the backward
//! pass is a single reverse sweep. A graph is meant to live for one forward
//! pass and be dropped afterwards.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Smallest L2 norm accepted by [`Graph::l2_normalize`].
pub const MIN_NORM: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Log { input: Var, floor: f64 },
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    NormalizeRows { input: Var, norms: Vec<f64> },
    PairwiseSqDist(Var, Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Recorded computation.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf; gradients are collected for it.
    pub fn param(&mut self, value: &Tensor) -> Var {
        self.leaf(value.clone(), true)
    }

    /// Constant leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a trainable leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Clears all accumulated leaf gradients.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("shape preserved");
        self.push_op(value, op, &[a])
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("shape preserved");
        self.push_op(value, op, &[a, b])
    }

    /// `[m×n] · [n×p] → [m×p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape().len() != 2 || y.shape().len() != 2 || x.shape()[1] != y.shape()[0] {
            return Err(Error::Shape {
                op: "matmul",
                left: x.shape().to_vec(),
                right: y.shape().to_vec(),
            });
        }
        let (m, n, p) = (x.shape()[0], x.shape()[1], y.shape()[1]);
        let value = Tensor::new(vec![m, p], matmul_raw(x.data(), y.data(), m, n, p))?;
        Ok(self.push_op(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, Op::Add(a, b), |p, q| p + q))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, Op::Sub(a, b), |p, q| p - q))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, Op::Mul(a, b), |p, q| p * q))
    }

    /// Adds a length-`n` bias to every row of an `[m×n]` matrix. The only
    /// broadcasting operation.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        if x.shape().len() != 2 || b.numel() != x.shape()[1] {
            return Err(Error::Shape {
                op: "add_row_bias",
                left: x.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let cols = x.cols();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b.data()[i % cols])
            .collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push_op(value, Op::AddRowBias(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::Scale(a, s), |v| v * s)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::AddScalar(a), |v| v + s)
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    /// Natural log. Inputs must be positive.
    pub fn log(&mut self, a: Var) -> Var {
        self.log_clamped(a, 0.0)
    }

    /// `ln(max(x, floor))`; no gradient flows where the clamp is active.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Var {
        self.map(a, Op::Log { input: a, floor }, |v| v.max(floor).ln())
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push_op(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data().iter().sum::<f64>() / x.numel() as f64;
        self.push_op(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Softmax along the last axis, max-shifted. A vector is one row.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        self.push_op(value, Op::SoftmaxRows(a), &[a])
    }

    /// Divides every row (a vector is one row) by its L2 norm.
    ///
    /// Fails on any row whose norm is below [`MIN_NORM`]; the error names the
    /// offending row.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let mut value = x.clone();
        let mut norms = Vec::with_capacity(x.rows());
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let norm = l2_norm(row);
            if !(norm >= MIN_NORM) {
                return Err(Error::Degenerate {
                    what: format!("row {r}"),
                    norm,
                });
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        Ok(self.push_op(value, Op::NormalizeRows { input: a, norms }, &[a]))
    }

    /// Squared Euclidean distances between the rows of `a: [m×n]` and
    /// `b: [p×n]`, giving `[m×p]`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape().len() != 2 || y.shape().len() != 2 || x.cols() != y.cols() {
            return Err(Error::Shape {
                op: "pairwise_sq_dist",
                left: x.shape().to_vec(),
                right: y.shape().to_vec(),
            });
        }
        let (m, p) = (x.rows(), y.rows());
        let mut data = Vec::with_capacity(m * p);
        for i in 0..m {
            for k in 0..p {
                data.push(sq_dist(x.row(i), y.row(k)));
            }
        }
        let value = Tensor::new(vec![m, p], data)?;
        Ok(self.push_op(value, Op::PairwiseSqDist(a, b), &[a, b]))
    }

    /// Back-propagates from a scalar `loss`.
    ///
    /// Gradients of trainable leaves are added to whatever they already hold,
    /// so calling this twice without [`Graph::zero_grad`] doubles them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                let slot = &mut self.nodes[idx].grad;
                match slot {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => *slot = Some(g),
                }
                continue;
            }
            let node = &self.nodes[idx];
            for (input, contrib) in self.local_grads(&node.op, &node.value, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut adj[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of one node with respect to each input.
    fn local_grads(&self, op: &Op, out: &Tensor, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let val = |v: &Var| self.value(*v);
        match op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (x, y) = (val(a), val(b));
                let (m, n, p) = (x.shape()[0], x.shape()[1], y.shape()[1]);
                let mut ga = vec![0.0; m * n];
                let mut gb = vec![0.0; n * p];
                for i in 0..m {
                    for k in 0..p {
                        let gik = g[i * p + k];
                        if gik == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            ga[i * n + j] += gik * y.data()[j * p + k];
                            gb[j * p + k] += gik * x.data()[i * n + j];
                        }
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (x, y) = (val(a).data(), val(b).data());
                let ga = g.iter().zip(y).map(|(g, y)| g * y).collect();
                let gb = g.iter().zip(x).map(|(g, x)| g * x).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::AddRowBias(a, bias) => {
                let cols = val(a).cols();
                let mut gb = vec![0.0; cols];
                for (i, v) in g.iter().enumerate() {
                    gb[i % cols] += v;
                }
                vec![(*a, g.to_vec()), (*bias, gb)]
            }
            Op::Scale(a, s) => vec![(*a, g.iter().map(|v| v * s).collect())],
            Op::AddScalar(a) => vec![(*a, g.to_vec())],
            Op::Relu(a) => {
                let x = val(a).data();
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![(*a, ga)]
            }
            Op::Exp(a) => {
                let ga = g.iter().zip(out.data()).map(|(g, y)| g * y).collect();
                vec![(*a, ga)]
            }
            Op::Log { input, floor } => {
                let x = val(input).data();
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > *floor { g / x } else { 0.0 })
                    .collect();
                vec![(*input, ga)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; val(a).numel()])],
            Op::Mean(a) => {
                let n = val(a).numel();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::SoftmaxRows(a) => {
                let cols = out.cols();
                let mut ga = vec![0.0; out.numel()];
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..cols {
                        ga[r * cols + j] = y[j] * (gr[j] - dot);
                    }
                }
                vec![(*a, ga)]
            }
            Op::NormalizeRows { input, norms } => {
                let cols = out.cols();
                let mut ga = vec![0.0; out.numel()];
                for (r, norm) in norms.iter().enumerate() {
                    let y = out.row(r);
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..cols {
                        ga[r * cols + j] = (gr[j] - y[j] * dot) / norm;
                    }
                }
                vec![(*input, ga)]
            }
            Op::PairwiseSqDist(a, b) => {
                let (x, y) = (val(a), val(b));
                let (m, p, n) = (x.rows(), y.rows(), x.cols());
                let mut ga = vec![0.0; m * n];
                let mut gb = vec![0.0; p * n];
                for i in 0..m {
                    for k in 0..p {
                        let gik = 2.0 * g[i * p + k];
                        if gik == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            let diff = x.data()[i * n + j] - y.data()[k * n + j];
                            ga[i * n + j] += gik * diff;
                            gb[k * n + j] -= gik * diff;
                        }
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
        }
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, n: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        for j in 0..n {
            let aij = a[i * n + j];
            if aij == 0.0 {
                continue;
            }
            let brow = &b[j * p..(j + 1) * p];
            let orow = &mut out[i * p..(i + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aij * bv;
            }
        }
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(m(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = g.constant(m(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn matmul_dot_product() {
        let mut g = Graph::new();
        let a = g.constant(m(&[&[1.0, 2.0]]));
        let b = g.constant(m(&[&[3.0], &[4.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 1]);
        assert_eq!(g.value(c).item(), 11.0);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let s = g.softmax(a);
        for v in g.value(s).data() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }

        let a = g.constant(Tensor::vector(vec![1000.0, 0.0]));
        let s = g.softmax(a);
        let d = g.value(s).data();
        assert!(d.iter().all(|v| v.is_finite()));
        assert_abs_diff_eq!(d[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d[1], 0.0, epsilon = 1e-15);

        let a = g.constant(Tensor::vector(vec![0.0, -2.0]));
        let s = g.softmax(a);
        let d = g.value(s).data();
        assert_abs_diff_eq!(d[0], 0.880797, epsilon = 5e-7);
        assert_abs_diff_eq!(d[1], 0.119203, epsilon = 5e-7);
    }

    #[test]
    fn normalize_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let n = g.l2_normalize(a).unwrap();
        assert_abs_diff_eq!(g.value(n).data()[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(g.value(n).data()[1], 0.8, epsilon = 1e-15);

        let u = g.constant(Tensor::vector(vec![0.6, 0.8]));
        let n = g.l2_normalize(u).unwrap();
        assert_abs_diff_eq!(g.value(n).data()[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(g.value(n).data()[1], 0.8, epsilon = 1e-15);
    }

    #[test]
    fn normalize_rejects_near_zero() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1e-13]]).unwrap());
        match g.l2_normalize(a) {
            Err(Error::Degenerate { what, .. }) => assert_eq!(what, "row 1"),
            other => panic!("expected degenerate error, got {other:?}"),
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let w = g.param(&Tensor::vector(vec![0.3, -1.0, 2.0]));
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut g = Graph::new();
        let w = g.param(&Tensor::vector(vec![1.0, 2.0]));
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let w = g.param(&Tensor::vector(vec![1.0, 2.0]));
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[4.0, 8.0]);
        g.zero_grad();
        assert!(g.grad(w).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.param(&Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(w), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let w = g.param(&Tensor::vector(vec![1.0, 2.0]));
        let c = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let p = g.mul(w, c).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[3.0, 4.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let w = g.param(&Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = g.relu(w);
        let s = g.sum(r);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn bias_broadcast_checks_width() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2]));
        assert!(g.add_row_bias(a, b).is_err());
    }
}
