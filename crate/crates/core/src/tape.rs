//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive evaluates eagerly and appends one node to the tape. Nodes
//! only reference earlier nodes, so the tape is acyclic by construction and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! Subgradient conventions: `relu'(0) = 0`, `abs'(0) = 0` and the gradient of
//! the L2 norm at the origin is zero.

use crate::error::{Error, Result};
use crate::tensor::{col2im_add, gemm, im2col, log_softmax_row, ConvGeometry, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    Relu(Var),
    Abs(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    L2Norm(Var),
    LogSoftmax(Var),
    CrossEntropy { logits: Var, labels: Vec<usize> },
    SliceRows { src: Var, start: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::Abs(_) => "abs",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MeanRows(_) => "mean_rows",
            Op::L2Norm(_) => "l2_norm",
            Op::LogSoftmax(_) => "log_softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SliceRows { .. } => "slice_rows",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![a, b],
            Op::MatMul(a, b) | Op::AddBias(a, b) => vec![a, b],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => vec![input, weight, bias],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Abs(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanRows(a)
            | Op::L2Norm(a)
            | Op::LogSoftmax(a) => vec![a],
            Op::CrossEntropy { logits, .. } => vec![logits],
            Op::SliceRows { src, .. } => vec![src],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Single-writer record of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; nodes the root does not depend on get zeros.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    /// Moves the gradient out, leaving zeros behind.
    pub fn take(&mut self, var: Var) -> Tensor {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        None => *slot = Some(delta),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Operation identifier recorded for `var`.
    pub fn op_name(&self, var: Var) -> &'static str {
        self.nodes[var.0].op.name()
    }

    /// Nodes `var` was computed from.
    pub fn inputs(&self, var: Var) -> Vec<Var> {
        self.nodes[var.0].op.inputs()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op, value: Tensor) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(op, value, requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.record(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.record(Op::Sub(a, b), v))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.record(Op::Mul(a, b), v))
    }

    /// Elementwise quotient; the caller guarantees a nonzero denominator.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "div", |x, y| x / y)?;
        Ok(self.record(Op::Div(a, b), v))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).map(|x| x * factor);
        self.record(Op::Scale(a, factor), v)
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        Ok(self.record(Op::MatMul(a, b), Tensor::from_parts(vec![m, n], out)))
    }

    /// Adds a length-`n` bias vector to every row of an `[m, n]` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(Error::shape("add_bias", sa, sb));
        }
        let n = sa[1];
        let mut v = self.value(a).clone();
        let b = self.value(bias).data();
        for row in v.data_mut().chunks_mut(n) {
            for (x, &y) in row.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(self.record(Op::AddBias(a, bias), v))
    }

    /// Stride-1 convolution with zero "same" padding.
    ///
    /// `input` is `[B, C, H, W]`, `weight` is `[O, C, K, K]` with odd `K`,
    /// `bias` is `[O]`; the result is `[B, O, H, W]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (si, sw, sb) = (self.shape(input), self.shape(weight), self.shape(bias));
        if si.len() != 4 || sw.len() != 4 || si[1] != sw[1] || sw[2] != sw[3] || sw[2] % 2 == 0 {
            return Err(Error::shape("conv2d", si, sw));
        }
        if sb.len() != 1 || sb[0] != sw[0] {
            return Err(Error::shape("conv2d", sw, sb));
        }
        let geom = ConvGeometry {
            in_channels: si[1],
            out_channels: sw[0],
            height: si[2],
            width: si[3],
            kernel: sw[2],
        };
        let batch = si[0];
        let (plane, patch, o) = (geom.plane(), geom.patch_len(), geom.out_channels);
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let b = self.value(bias).data();
        let in_len = geom.in_channels * plane;
        let mut out = vec![0.0; batch * o * plane];
        let mut cols = vec![0.0; patch * plane];
        for n in 0..batch {
            im2col(&x[n * in_len..(n + 1) * in_len], &geom, &mut cols);
            let dst = &mut out[n * o * plane..(n + 1) * o * plane];
            for (c, &bc) in b.iter().enumerate() {
                dst[c * plane..(c + 1) * plane].fill(bc);
            }
            gemm(o, patch, plane, w, false, &cols, false, dst, true);
        }
        let shape = vec![batch, o, geom.height, geom.width];
        Ok(self.record(
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            Tensor::from_parts(shape, out),
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.record(Op::Relu(a), v)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.record(Op::Abs(a), v)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.record(Op::Reshape(a), v))
    }

    /// Collapses everything after the leading axis: `[B, ...] → [B, rest]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let shape = [t.rows(), t.row_len()];
        self.reshape(a, &shape)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.record(Op::Sum(a), v)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.record(Op::Mean(a), v)
    }

    /// Column means of a 2-D tensor: `[m, n] → [n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Error::shape("mean_rows", t.shape(), &[0, 0]));
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; n];
        for row in t.data().chunks(n) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        let inv = 1.0 / m as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(self.record(Op::MeanRows(a), Tensor::from_parts(vec![n], out)))
    }

    /// Euclidean norm of all elements, as a scalar.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).l2_norm());
        self.record(Op::L2Norm(a), v)
    }

    /// Row-wise log-softmax of a 2-D tensor.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Error::shape("log_softmax", t.shape(), &[0, 0]));
        }
        let n = t.shape()[1];
        let mut out = vec![0.0; t.len()];
        for (row, dst) in t.data().chunks(n).zip(out.chunks_mut(n)) {
            log_softmax_row(row, dst);
        }
        let shape = t.shape().to_vec();
        Ok(self.record(Op::LogSoftmax(a), Tensor::from_parts(shape, out)))
    }

    /// Mean cross-entropy between `[B, C]` logits and class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != labels.len() {
            return Err(Error::shape("cross_entropy", t.shape(), &[labels.len()]));
        }
        let c = t.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let mut scratch = vec![0.0; c];
        let mut total = 0.0;
        for (row, &label) in t.data().chunks(c).zip(labels) {
            log_softmax_row(row, &mut scratch);
            total -= scratch[label];
        }
        let v = Tensor::scalar(total / labels.len() as f64);
        Ok(self.record(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            v,
        ))
    }

    /// Rows `start..end` of the leading axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a).slice_rows(start, end)?;
        Ok(self.record(Op::SliceRows { src: a, start }, v))
    }

    /// Reverse sweep from a single-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(root_value.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }

        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(b) {
                    accumulate(&mut grads[b.0], g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                if self.wants(a) {
                    let d = g.zip_map(vb, "mul", |x, y| x * y).expect("shapes checked");
                    accumulate(&mut grads[a.0], d);
                }
                if self.wants(b) {
                    let d = g.zip_map(va, "mul", |x, y| x * y).expect("shapes checked");
                    accumulate(&mut grads[b.0], d);
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                if self.wants(a) {
                    let d = g.zip_map(vb, "div", |x, y| x / y).expect("shapes checked");
                    accumulate(&mut grads[a.0], d);
                }
                if self.wants(b) {
                    let data = g
                        .data()
                        .iter()
                        .zip(va.data())
                        .zip(vb.data())
                        .map(|((&gv, &x), &y)| -gv * x / (y * y))
                        .collect();
                    accumulate(
                        &mut grads[b.0],
                        Tensor::from_parts(vb.shape().to_vec(), data),
                    );
                }
            }
            Op::Scale(a, f) => {
                if self.wants(a) {
                    accumulate(&mut grads[a.0], g.map(|x| x * f));
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.wants(a) {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, vb.data(), true, &mut d, false);
                    accumulate(&mut grads[a.0], Tensor::from_parts(vec![m, k], d));
                }
                if self.wants(b) {
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, va.data(), true, g.data(), false, &mut d, false);
                    accumulate(&mut grads[b.0], Tensor::from_parts(vec![k, n], d));
                }
            }
            Op::AddBias(a, bias) => {
                if self.wants(a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(bias) {
                    let n = g.shape()[1];
                    let mut d = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (o, &x) in d.iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads[bias.0], Tensor::from_parts(vec![n], d));
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => self.conv2d_backward(input, weight, bias, &geom, g, grads),
            Op::Relu(a) => {
                if self.wants(a) {
                    let d = g
                        .zip_map(self.value(a), "relu", |gv, x| if x > 0.0 { gv } else { 0.0 })
                        .expect("shapes checked");
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::Abs(a) => {
                if self.wants(a) {
                    let d = g
                        .zip_map(self.value(a), "abs", |gv, x| {
                            if x > 0.0 {
                                gv
                            } else if x < 0.0 {
                                -gv
                            } else {
                                0.0
                            }
                        })
                        .expect("shapes checked");
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::Reshape(a) => {
                if self.wants(a) {
                    let d = g.clone().reshape(self.shape(a)).expect("same numel");
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::Sum(a) => {
                if self.wants(a) {
                    accumulate(&mut grads[a.0], Tensor::full(self.shape(a), g.data()[0]));
                }
            }
            Op::Mean(a) => {
                if self.wants(a) {
                    let s = self.value(a);
                    let v = g.data()[0] / s.len() as f64;
                    accumulate(&mut grads[a.0], Tensor::full(s.shape(), v));
                }
            }
            Op::MeanRows(a) => {
                if self.wants(a) {
                    let s = self.shape(a);
                    let (m, n) = (s[0], s[1]);
                    let inv = 1.0 / m as f64;
                    let row: Vec<f64> = g.data().iter().map(|x| x * inv).collect();
                    let mut d = Vec::with_capacity(m * n);
                    for _ in 0..m {
                        d.extend_from_slice(&row);
                    }
                    accumulate(&mut grads[a.0], Tensor::from_parts(vec![m, n], d));
                }
            }
            Op::L2Norm(a) => {
                if self.wants(a) {
                    let norm = out.data()[0];
                    let d = if norm > 0.0 {
                        let f = g.data()[0] / norm;
                        self.value(a).map(|x| x * f)
                    } else {
                        Tensor::zeros(self.shape(a))
                    };
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::LogSoftmax(a) => {
                if self.wants(a) {
                    let n = out.shape()[1];
                    let mut d = vec![0.0; out.len()];
                    for ((ls, gr), dst) in out
                        .data()
                        .chunks(n)
                        .zip(g.data().chunks(n))
                        .zip(d.chunks_mut(n))
                    {
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..n {
                            dst[j] = gr[j] - ls[j].exp() * gsum;
                        }
                    }
                    accumulate(&mut grads[a.0], Tensor::from_parts(out.shape().to_vec(), d));
                }
            }
            Op::CrossEntropy { logits, ref labels } => {
                if self.wants(logits) {
                    let t = self.value(logits);
                    let c = t.shape()[1];
                    let f = g.data()[0] / labels.len() as f64;
                    let mut d = vec![0.0; t.len()];
                    for ((row, dst), &label) in t.data().chunks(c).zip(d.chunks_mut(c)).zip(labels)
                    {
                        log_softmax_row(row, dst);
                        for v in dst.iter_mut() {
                            *v = v.exp() * f;
                        }
                        dst[label] -= f;
                    }
                    accumulate(&mut grads[logits.0], Tensor::from_parts(t.shape().to_vec(), d));
                }
            }
            Op::SliceRows { src, start } => {
                if self.wants(src) {
                    let s = self.value(src);
                    let w = s.row_len();
                    let mut d = vec![0.0; s.len()];
                    d[start * w..start * w + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads[src.0], Tensor::from_parts(s.shape().to_vec(), d));
                }
            }
        }
    }

    fn conv2d_backward(
        &self,
        input: Var,
        weight: Var,
        bias: Var,
        geom: &ConvGeometry,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let batch = self.shape(input)[0];
        let (plane, patch, o) = (geom.plane(), geom.patch_len(), geom.out_channels);
        let in_len = geom.in_channels * plane;
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let gd = g.data();

        if self.wants(bias) {
            let mut d = vec![0.0; o];
            for n in 0..batch {
                for (c, dc) in d.iter_mut().enumerate() {
                    let start = (n * o + c) * plane;
                    *dc += gd[start..start + plane].iter().sum::<f64>();
                }
            }
            accumulate(&mut grads[bias.0], Tensor::from_parts(vec![o], d));
        }
        let want_w = self.wants(weight);
        let want_x = self.wants(input);
        if !want_w && !want_x {
            return;
        }
        let mut dw = vec![0.0; o * patch];
        let mut dx = if want_x { vec![0.0; x.len()] } else { Vec::new() };
        let mut cols = vec![0.0; patch * plane];
        for n in 0..batch {
            let gy = &gd[n * o * plane..(n + 1) * o * plane];
            if want_w {
                im2col(&x[n * in_len..(n + 1) * in_len], geom, &mut cols);
                gemm(o, plane, patch, gy, false, &cols, true, &mut dw, true);
            }
            if want_x {
                gemm(patch, o, plane, w, true, gy, false, &mut cols, false);
                col2im_add(&cols, geom, &mut dx[n * in_len..(n + 1) * in_len]);
            }
        }
        if want_w {
            let shape = self.shape(weight).to_vec();
            accumulate(&mut grads[weight.0], Tensor::from_parts(shape, dw));
        }
        if want_x {
            let shape = self.shape(input).to_vec();
            accumulate(&mut grads[input.0], Tensor::from_parts(shape, dx));
        }
    }
}

/// Gradient of a scalar read off a model's output with respect to its input.
///
/// `apply` builds the model on the tape from the input node; `selector`
/// reduces the model output to the scalar being differentiated.
pub fn grad_wrt_input<F, S>(apply: F, x: &Tensor, selector: S) -> Result<Tensor>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
    S: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let input = tape.leaf(x.clone());
    let out = apply(&mut tape, input)?;
    let scalar = selector(&mut tape, out)?;
    let mut grads = tape.backward(scalar)?;
    Ok(grads.take(input))
}
