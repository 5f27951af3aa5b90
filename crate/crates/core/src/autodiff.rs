//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in creation order. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and
//! accumulates gradients into every leaf created with `requires_grad`.
//! Leaves may borrow their values (model parameters are shared by many
//! graphs without copying), so a graph is tied to the lifetime of the
//! parameters it reads.
//!
//! There is no broadcasting: bias vectors are expanded with
//! [`Graph::tile_rows`] before being added.

use std::borrow::Cow;

use crate::geometry::{apply_deltas_jacobian, giou_with_grad};
use crate::tensor::{Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul { a: Var, b: Var, trans_b: bool },
    Transpose(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    SliceRows { input: Var, start: usize },
    GatherRows { input: Var, indices: Vec<usize> },
    TileRows(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax { input: Var, axis: usize },
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MeanAxis { input: Var, axis: usize },
    MaxAxis { input: Var, argmax: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    L1Sum(Var, Var),
    GiouLossSum(Var, Var),
    FocalLossSum {
        logits: Var,
        targets: Vec<f64>,
        alpha: f64,
        gamma: f64,
    },
    ApplyDeltas { boxes: Var, deltas: Var },
    RoiPool { grid: Var, members: Vec<Vec<usize>> },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording tape plus accumulated leaf gradients.
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    macs: u64,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `c = beta * c + a' * b'` with optional transposition of `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid focal loss of one logit against a binary target and its derivative.
fn focal_term(x: f64, target: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(x);
    if target > 0.5 {
        let log_p = -softplus(-x);
        let q = 1.0 - p;
        let loss = -alpha * q.powf(gamma) * log_p;
        let grad = alpha * (gamma * p * q.powf(gamma) * log_p - q.powf(gamma + 1.0));
        (loss, grad)
    } else {
        let log_q = -softplus(x);
        let loss = -(1.0 - alpha) * p.powf(gamma) * log_q;
        let grad = (1.0 - alpha) * (p.powf(gamma + 1.0) - gamma * p.powf(gamma) * (1.0 - p) * log_q);
        (loss, grad)
    }
}

/// Cells of a `side x side` grid (row-major, `y` major) whose centers fall in `box`,
/// or the cell nearest the box center when none does.
pub fn roi_cells(side: usize, b: &crate::geometry::BBox) -> Vec<usize> {
    let g = side as f64;
    let mut cells = Vec::new();
    for cy in 0..side {
        let yc = (cy as f64 + 0.5) / g;
        if yc < b.y1 || yc > b.y2 {
            continue;
        }
        for cx in 0..side {
            let xc = (cx as f64 + 0.5) / g;
            if xc >= b.x1 && xc <= b.x2 {
                cells.push(cy * side + cx);
            }
        }
    }
    if cells.is_empty() {
        let (mx, my) = b.center();
        let cx = ((mx * g).floor() as isize).clamp(0, side as isize - 1) as usize;
        let cy = ((my * g).floor() as isize).clamp(0, side as isize - 1) as usize;
        cells.push(cy * side + cx);
    }
    cells
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::with_capacity(256),
            leaf_grads: Vec::new(),
            macs: 0,
        }
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    /// Leaf owning its value.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, requires_grad)
    }

    /// Leaf borrowing its value; used for model parameters.
    pub fn leaf_ref(&mut self, value: &'p Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies `v` into a new constant, blocking gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scalar multiply-adds performed by forward ops so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Accumulated gradient of a leaf, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v)
            .map(|g| Tensor::from_parts(self.shape(v).to_vec(), g.to_vec()))
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(TensorError::invalid(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        self.macs += t.numel() as u64;
        Ok(t)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        self.macs += t.numel() as u64;
        t
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("add", a, b, |p, q| p + q)?;
        Ok(self.push_op(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("sub", a, b, |p, q| p - q)?;
        Ok(self.push_op(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("mul", a, b, |p, q| p * q)?;
        Ok(self.push_op(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.map(a, |v| v * s);
        self.push_op(t, Op::Scale(a, s), &[a])
    }

    /// `a [m x k] * b [k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a [m x k] * b^T` where `b` is `[n x k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let op = if trans_b { "matmul_t" } else { "matmul" };
        let (m, k) = self.rank2(op, a)?;
        let (br, bc) = self.rank2(op, b)?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(TensorError::mismatch(op, self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            &mut out,
            0.0,
        );
        self.macs += (m * k * n) as u64;
        let t = Tensor::from_parts(vec![m, n], out);
        Ok(self.push_op(t, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.rank2("transpose", a)?;
        let x = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        let t = Tensor::from_parts(vec![n, m], out);
        Ok(self.push_op(t, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).reshaped(shape)?;
        Ok(self.push_op(t, Op::Reshape(a), &[a]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::invalid(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (p, q))| i == axis || p == q);
            if !compatible {
                return Err(TensorError::mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let n = self.shape(v)[axis];
                let chunk = n * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let t = Tensor::from_parts(shape, out);
        Ok(self.push_op(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        let rows = x.rows();
        if start >= end || end > rows {
            return Err(TensorError::invalid(
                "slice_rows",
                format!("range {start}..{end} invalid for {rows} rows"),
            ));
        }
        let w = x.row_len();
        let mut shape = x.shape().to_vec();
        shape[0] = end - start;
        let t = Tensor::from_parts(shape, x.data()[start * w..end * w].to_vec());
        Ok(self.push_op(t, Op::SliceRows { input: a, start }, &[a]))
    }

    /// Selected rows, in the given order.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let rows = x.rows();
        if indices.is_empty() {
            return Err(TensorError::invalid("gather_rows", "no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::invalid(
                "gather_rows",
                format!("row {bad} out of range for {rows} rows"),
            ));
        }
        let w = x.row_len();
        let mut out = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            out.extend_from_slice(&x.data()[i * w..(i + 1) * w]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = indices.len();
        let t = Tensor::from_parts(shape, out);
        Ok(self.push_op(
            t,
            Op::GatherRows {
                input: a,
                indices: indices.to_vec(),
            },
            &[a],
        ))
    }

    /// Repeats a vector `[n]` into a `[rows x n]` matrix.
    pub fn tile_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let x = self.value(a);
        if x.shape().len() != 1 || rows == 0 {
            return Err(TensorError::invalid(
                "tile_rows",
                format!("expected a vector and rows > 0, got {:?}", x.shape()),
            ));
        }
        let n = x.numel();
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(x.data());
        }
        let t = Tensor::from_parts(vec![rows, n], out);
        Ok(self.push_op(t, Op::TileRows(a), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |v| v.max(0.0));
        self.push_op(t, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, sigmoid);
        self.push_op(t, Op::Sigmoid(a), &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.shape().len() {
            return Err(TensorError::invalid(
                "softmax",
                format!("axis {axis} out of range for {:?}", x.shape()),
            ));
        }
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let src = x.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * n * inner + k * inner + i;
                let max = (0..n).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for k in 0..n {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    sum += e;
                }
                for k in 0..n {
                    out[at(k)] /= sum;
                }
            }
        }
        let t = Tensor::from_parts(x.shape().to_vec(), out);
        self.macs += 3 * t.numel() as u64;
        Ok(self.push_op(t, Op::Softmax { input: a, axis }, &[a]))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias` (both `[d]`).
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let x = self.value(a);
        let d = *x.shape().last().unwrap();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(TensorError::mismatch("layer_norm", x.shape(), self.shape(gain)));
        }
        let rows = x.numel() / d;
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = vec![0.0; x.numel()];
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::from_parts(x.shape().to_vec(), out);
        self.macs += 5 * t.numel() as u64;
        Ok(self.push_op(
            t,
            Op::LayerNorm {
                input: a,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[a, gain, bias],
        ))
    }

    fn reduce_shape(&self, op: &'static str, a: Var, axis: usize) -> Result<Vec<usize>> {
        let s = self.shape(a);
        if axis >= s.len() {
            return Err(TensorError::invalid(op, format!("axis {axis} out of range for {s:?}")));
        }
        let mut out: Vec<usize> = s.to_vec();
        out.remove(axis);
        if out.is_empty() {
            out.push(1);
        }
        Ok(out)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.reduce_shape("mean_axis", a, axis)?;
        let x = self.value(a);
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += x.data()[o * n * inner + k * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        self.macs += x.numel() as u64;
        let t = Tensor::from_parts(shape, out);
        Ok(self.push_op(t, Op::MeanAxis { input: a, axis }, &[a]))
    }

    /// Maximum along `axis`; ties route the gradient to the first maximum.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.reduce_shape("max_axis", a, axis)?;
        let x = self.value(a);
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    let src = o * n * inner + k * inner + i;
                    let dst = o * inner + i;
                    if x.data()[src] > out[dst] {
                        out[dst] = x.data()[src];
                        argmax[dst] = src;
                    }
                }
            }
        }
        self.macs += x.numel() as u64;
        let t = Tensor::from_parts(shape, out);
        Ok(self.push_op(
            t,
            Op::MaxAxis {
                input: a,
                argmax,
            },
            &[a],
        ))
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

    /// Mean squared error, averaged over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let s = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            / x.numel() as f64;
        Ok(self.push_op(Tensor::scalar(s), Op::Mse(a, b), &[a, b]))
    }

    /// Sum of absolute differences.
    pub fn l1_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l1_sum", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let s = x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()).sum();
        Ok(self.push_op(Tensor::scalar(s), Op::L1Sum(a, b), &[a, b]))
    }

    /// `sum_i (1 - giou(a_i, b_i))` over paired `[P x 4]` box rows.
    pub fn giou_loss_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("giou_loss_sum", a, b)?;
        let (_, c) = self.rank2("giou_loss_sum", a)?;
        if c != 4 {
            return Err(TensorError::invalid("giou_loss_sum", "boxes must be [P x 4]"));
        }
        let (x, y) = (self.value(a), self.value(b));
        let mut s = 0.0;
        for r in 0..x.rows() {
            let (g, _, _) = giou_with_grad(row4(x.row(r)), row4(y.row(r)));
            s += 1.0 - g;
        }
        Ok(self.push_op(Tensor::scalar(s), Op::GiouLossSum(a, b), &[a, b]))
    }

    /// Summed sigmoid focal loss of `logits` against binary `targets` of equal shape.
    pub fn focal_loss_sum(
        &mut self,
        logits: Var,
        targets: Vec<f64>,
        alpha: f64,
        gamma: f64,
    ) -> Result<Var> {
        let x = self.value(logits);
        if x.numel() != targets.len() {
            return Err(TensorError::invalid(
                "focal_loss_sum",
                format!("{} targets for logits {:?}", targets.len(), x.shape()),
            ));
        }
        let s = x
            .data()
            .iter()
            .zip(&targets)
            .map(|(&v, &t)| focal_term(v, t, alpha, gamma).0)
            .sum();
        Ok(self.push_op(
            Tensor::scalar(s),
            Op::FocalLossSum {
                logits,
                targets,
                alpha,
                gamma,
            },
            &[logits],
        ))
    }

    /// Decodes `[M x 4]` center/size deltas against `[M x 4]` boxes, clamped to the image.
    pub fn apply_deltas(&mut self, boxes: Var, deltas: Var) -> Result<Var> {
        self.same_shape("apply_deltas", boxes, deltas)?;
        let (m, c) = self.rank2("apply_deltas", boxes)?;
        if c != 4 {
            return Err(TensorError::invalid("apply_deltas", "boxes must be [M x 4]"));
        }
        let (b, d) = (self.value(boxes), self.value(deltas));
        let mut out = Vec::with_capacity(m * 4);
        for r in 0..m {
            out.extend_from_slice(&apply_deltas_jacobian(row4(b.row(r)), row4(d.row(r))).out);
        }
        let t = Tensor::from_parts(vec![m, 4], out);
        Ok(self.push_op(t, Op::ApplyDeltas { boxes, deltas }, &[boxes, deltas]))
    }

    /// Average-pools `[G*G x d]` grid rows over the cells covered by each box.
    /// Gradients flow to the grid only.
    pub fn roi_pool(&mut self, grid: Var, side: usize, boxes: &[crate::geometry::BBox]) -> Result<Var> {
        let (cells, d) = self.rank2("roi_pool", grid)?;
        if cells != side * side {
            return Err(TensorError::invalid(
                "roi_pool",
                format!("grid has {cells} rows, expected {side}x{side}"),
            ));
        }
        if boxes.is_empty() {
            return Err(TensorError::invalid("roi_pool", "no boxes"));
        }
        let members: Vec<Vec<usize>> = boxes.iter().map(|b| roi_cells(side, b)).collect();
        let src = self.value(grid).data();
        let mut out = vec![0.0; boxes.len() * d];
        for (r, cells) in members.iter().enumerate() {
            let dst = &mut out[r * d..(r + 1) * d];
            for &c in cells {
                for (o, v) in dst.iter_mut().zip(&src[c * d..(c + 1) * d]) {
                    *o += v;
                }
            }
            let inv = 1.0 / cells.len() as f64;
            dst.iter_mut().for_each(|v| *v *= inv);
        }
        self.macs += (members.iter().map(Vec::len).sum::<usize>() * d) as u64;
        let t = Tensor::from_parts(vec![boxes.len(), d], out);
        Ok(self.push_op(t, Op::RoiPool { grid, members }, &[grid]))
    }

    /// Propagates `d loss / d leaf` into every leaf that requires a gradient.
    /// Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize(self.nodes.len(), None);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(i, g, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        // Accumulates into the gradient buffer of `v` when it participates.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &nodes[v.0];
            if !n.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.numel()]);
            f(buf);
        };
        match &nodes[i].op {
            Op::Leaf => {
                let slot = &mut self.leaf_grads[i];
                match slot {
                    Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, v)| *b += v),
                    None => *slot = Some(g),
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |buf| add_into(buf, &g));
                acc(*b, &mut |buf| add_into(buf, &g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |buf| add_into(buf, &g));
                acc(*b, &mut |buf| buf.iter_mut().zip(&g).for_each(|(o, v)| *o -= v));
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                acc(*a, &mut |buf| {
                    for k in 0..buf.len() {
                        buf[k] += g[k] * y[k];
                    }
                });
                acc(*b, &mut |buf| {
                    for k in 0..buf.len() {
                        buf[k] += g[k] * x[k];
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |buf| buf.iter_mut().zip(&g).for_each(|(o, v)| *o += s * v)),
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = g.len() / m;
                let (x, y) = (val(*a), val(*b));
                if *trans_b {
                    // C = A B^T: dA = dC B, dB = dC^T A
                    acc(*a, &mut |buf| gemm(m, n, k, &g, false, y, false, buf, 1.0));
                    acc(*b, &mut |buf| gemm(n, m, k, &g, true, x, false, buf, 1.0));
                } else {
                    // C = A B: dA = dC B^T, dB = A^T dC
                    acc(*a, &mut |buf| gemm(m, n, k, &g, false, y, true, buf, 1.0));
                    acc(*b, &mut |buf| gemm(k, m, n, x, true, &g, false, buf, 1.0));
                }
            }
            Op::Transpose(a) => {
                let s = nodes[a.0].value.shape();
                let (m, n) = (s[0], s[1]);
                acc(*a, &mut |buf| {
                    for r in 0..m {
                        for c in 0..n {
                            buf[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |buf| add_into(buf, &g)),
            Op::Concat { inputs, axis } => {
                let out_shape = nodes[i].value.shape();
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let n = nodes[v.0].value.shape()[*axis];
                    acc(v, &mut |buf| {
                        for o in 0..outer {
                            let src = &g[o * total * inner + offset * inner..][..n * inner];
                            add_into(&mut buf[o * n * inner..(o + 1) * n * inner], src);
                        }
                    });
                    offset += n;
                }
            }
            Op::SliceRows { input, start } => {
                let w = nodes[input.0].value.row_len();
                acc(*input, &mut |buf| add_into(&mut buf[start * w..start * w + g.len()], &g));
            }
            Op::GatherRows { input, indices } => {
                let w = nodes[input.0].value.row_len();
                acc(*input, &mut |buf| {
                    for (r, &src) in indices.iter().enumerate() {
                        add_into(&mut buf[src * w..(src + 1) * w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::TileRows(a) => {
                let n = nodes[a.0].value.numel();
                acc(*a, &mut |buf| {
                    for chunk in g.chunks(n) {
                        add_into(buf, chunk);
                    }
                });
            }
            Op::Relu(a) => {
                let x = val(*a);
                acc(*a, &mut |buf| {
                    for k in 0..buf.len() {
                        if x[k] > 0.0 {
                            buf[k] += g[k];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = nodes[i].value.data();
                acc(*a, &mut |buf| {
                    for k in 0..buf.len() {
                        buf[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                });
            }
            Op::Softmax { input, axis } => {
                let y = nodes[i].value.data();
                let (outer, n, inner) = split_axis(nodes[i].value.shape(), *axis);
                acc(*input, &mut |buf| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |k: usize| o * n * inner + k * inner + ii;
                            let dot: f64 = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..n {
                                buf[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = val(*gain);
                let d = gv.len();
                let rows = g.len() / d;
                acc(*gain, &mut |buf| {
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                acc(*bias, &mut |buf| {
                    for chunk in g.chunks(d) {
                        add_into(buf, chunk);
                    }
                });
                acc(*input, &mut |buf| {
                    let inv_d = 1.0 / d as f64;
                    for r in 0..rows {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            s1 += dh;
                            s2 += dh * xhat[r * d + j];
                        }
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            buf[r * d + j] +=
                                inv_std[r] * (dh - inv_d * s1 - xhat[r * d + j] * inv_d * s2);
                        }
                    }
                });
            }
            Op::MeanAxis { input, axis } => {
                let (outer, n, inner) = split_axis(nodes[input.0].value.shape(), *axis);
                let inv = 1.0 / n as f64;
                acc(*input, &mut |buf| {
                    for o in 0..outer {
                        for k in 0..n {
                            for ii in 0..inner {
                                buf[o * n * inner + k * inner + ii] += g[o * inner + ii] * inv;
                            }
                        }
                    }
                });
            }
            Op::MaxAxis { input, argmax, .. } => acc(*input, &mut |buf| {
                for (dst, &src) in argmax.iter().enumerate() {
                    buf[src] += g[dst];
                }
            }),
            Op::Sum(a) => acc(*a, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(a) => {
                let s = g[0] / nodes[a.0].value.numel() as f64;
                acc(*a, &mut |buf| buf.iter_mut().for_each(|o| *o += s));
            }
            Op::Mse(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let s = 2.0 * g[0] / x.len() as f64;
                acc(*a, &mut |buf| {
                    for k in 0..buf.len() {
                        buf[k] += s * (x[k] - y[k]);
                    }
                });
                acc(*b, &mut |buf| {
                    for k in 0..buf.len() {
                        buf[k] -= s * (x[k] - y[k]);
                    }
                });
            }
            Op::L1Sum(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let sign = |k: usize| {
                    let d = x[k] - y[k];
                    if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                acc(*a, &mut |buf| {
                    for k in 0..buf.len() {
                        buf[k] += g[0] * sign(k);
                    }
                });
                acc(*b, &mut |buf| {
                    for k in 0..buf.len() {
                        buf[k] -= g[0] * sign(k);
                    }
                });
            }
            Op::GiouLossSum(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let rows = x.len() / 4;
                let per_row: Vec<_> = (0..rows)
                    .map(|r| giou_with_grad(row4(&x[r * 4..]), row4(&y[r * 4..])))
                    .collect();
                acc(*a, &mut |buf| {
                    for (r, (_, ga, _)) in per_row.iter().enumerate() {
                        for c in 0..4 {
                            buf[r * 4 + c] -= g[0] * ga[c];
                        }
                    }
                });
                acc(*b, &mut |buf| {
                    for (r, (_, _, gb)) in per_row.iter().enumerate() {
                        for c in 0..4 {
                            buf[r * 4 + c] -= g[0] * gb[c];
                        }
                    }
                });
            }
            Op::FocalLossSum {
                logits,
                targets,
                alpha,
                gamma,
            } => {
                let x = val(*logits);
                acc(*logits, &mut |buf| {
                    for k in 0..buf.len() {
                        buf[k] += g[0] * focal_term(x[k], targets[k], *alpha, *gamma).1;
                    }
                });
            }
            Op::ApplyDeltas { boxes, deltas } => {
                let (b, d) = (val(*boxes), val(*deltas));
                let rows = b.len() / 4;
                let jacs: Vec<_> = (0..rows)
                    .map(|r| apply_deltas_jacobian(row4(&b[r * 4..]), row4(&d[r * 4..])))
                    .collect();
                acc(*boxes, &mut |buf| {
                    for (r, j) in jacs.iter().enumerate() {
                        for out in 0..4 {
                            for inp in 0..4 {
                                buf[r * 4 + inp] += g[r * 4 + out] * j.d_base[out][inp];
                            }
                        }
                    }
                });
                acc(*deltas, &mut |buf| {
                    for (r, j) in jacs.iter().enumerate() {
                        for out in 0..4 {
                            for inp in 0..4 {
                                buf[r * 4 + inp] += g[r * 4 + out] * j.d_delta[out][inp];
                            }
                        }
                    }
                });
            }
            Op::RoiPool { grid, members } => {
                let d = nodes[grid.0].value.shape()[1];
                acc(*grid, &mut |buf| {
                    for (r, cells) in members.iter().enumerate() {
                        let inv = 1.0 / cells.len() as f64;
                        for &c in cells {
                            for j in 0..d {
                                buf[c * d + j] += g[r * d + j] * inv;
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn row4(s: &[f64]) -> [f64; 4] {
    [s[0], s[1], s[2], s[3]]
}
