//! Reverse-mode differentiation over a per-forward-pass tape.
//!
//! Every primitive appends a node holding its value and the ids of its
//! parents, so nodes are stored in topological order by construction.
//! [`Tape::backward`] walks the nodes in reverse and applies the chain
//! rule, only visiting nodes that depend on a leaf marked as requiring
//! gradients.

use super::conv;
use super::dense::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias { x: Var, bias: Var },
    MatMul(Var, Var),
    Conv2d { input: Var, weight: Var, bias: Option<Var> },
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    LogSoftmax { x: Var, axis: usize },
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node on the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the loss
    /// or was recorded without gradient tracking.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    /// Records a leaf whose gradient will be computed by [`Tape::backward`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Records a leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name.to_string() });
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        if va.shape() != vb.shape() {
            return Err(Error::shape(name, format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let out = va.zip_map(vb, f)?;
        self.push(name, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).scaled(s);
        self.push("scale", out, Op::Scale(a, s), &[a])
    }

    /// Adds a `[F]` bias to every row of a `[.., F]` tensor.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let vx = self.value(x);
        let vb = self.value(bias);
        let f = *vx.shape().last().unwrap_or(&1);
        if vb.rank() != 1 || vb.len() != f || vx.rank() == 0 {
            return Err(Error::shape(
                "add_row_bias",
                format!("{:?} + {:?}", vx.shape(), vb.shape()),
            ));
        }
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(f) {
            for (o, b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        self.push("add_row_bias", out, Op::AddRowBias { x, bias }, &[x, bias])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", va.shape(), vb.shape()),
            ));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(va.data(), vb.data(), &mut out, m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// 3×3 convolution, stride 1, zero padding 1. `input` is
    /// `[batch, in, h, w]`, `weight` is `[out, in, 3, 3]`, `bias` is `[out]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let vi = self.value(input);
        let vw = self.value(weight);
        if vi.rank() != 4 {
            return Err(Error::shape("conv2d", format!("input must be rank 4, got {:?}", vi.shape())));
        }
        if vw.rank() != 4 || vw.shape()[1] != vi.shape()[1] || vw.shape()[2] != 3 || vw.shape()[3] != 3 {
            return Err(Error::shape(
                "conv2d",
                format!("weight {:?} incompatible with input {:?}", vw.shape(), vi.shape()),
            ));
        }
        let geom = conv::Geometry::new(vi.shape(), vw.shape()[0]);
        let bias_data = match bias {
            Some(b) => {
                let vb = self.value(b);
                if vb.shape() != [geom.c_out] {
                    return Err(Error::shape("conv2d", format!("bias {:?}", vb.shape())));
                }
                Some(vb.data())
            }
            None => None,
        };
        let out = conv::forward(&geom, vi.data(), vw.data(), bias_data);
        let out = Tensor::new(geom.output_shape(), out)?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        self.push("conv2d", out, Op::Conv2d { input, weight, bias }, &parents)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push("relu", out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push("sigmoid", out, Op::Sigmoid(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::abs);
        self.push("abs", out, Op::Abs(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * v);
        self.push("square", out, Op::Square(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.rank() {
            return Err(Error::shape("log_softmax", format!("axis {axis} for {:?}", vx.shape())));
        }
        let (outer, n, inner) = axis_split(vx.shape(), axis);
        let src = vx.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let max = (0..n)
                    .map(|c| src[base + c * inner])
                    .fold(f64::NEG_INFINITY, f64::max);
                let lse = (0..n)
                    .map(|c| (src[base + c * inner] - max).exp())
                    .sum::<f64>()
                    .ln()
                    + max;
                for c in 0..n {
                    out[base + c * inner] = src[base + c * inner] - lse;
                }
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        self.push("log_softmax", out, Op::LogSoftmax { x, axis }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let out = Tensor::scalar(vx.sum() / vx.len() as f64);
        self.push("mean", out, Op::Mean(x), &[x])
    }

    fn reduce_axis(&self, x: Var, axis: usize, name: &'static str) -> Result<(Tensor, usize)> {
        let vx = self.value(x);
        if axis >= vx.rank() {
            return Err(Error::shape(name, format!("axis {axis} for {:?}", vx.shape())));
        }
        let (outer, n, inner) = axis_split(vx.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for c in 0..n {
                let src = &vx.data()[(o * n + c) * inner..(o * n + c + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = vx.shape().to_vec();
        shape.remove(axis);
        Ok((Tensor::new(shape, out)?, n))
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (out, _) = self.reduce_axis(x, axis, "sum_axis")?;
        self.push("sum_axis", out, Op::SumAxis { x, axis }, &[x])
    }

    /// Averages over `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (out, n) = self.reduce_axis(x, axis, "mean_axis")?;
        let out = out.scaled(1.0 / n as f64);
        self.push("mean_axis", out, Op::MeanAxis { x, axis }, &[x])
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.rank() || len == 0 || start + len > vx.shape()[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {:?}", start + len, vx.shape()),
            ));
        }
        let (outer, n, inner) = axis_split(vx.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&vx.data()[from..from + len * inner]);
        }
        let mut shape = vx.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(shape, out)?;
        self.push("slice", out, Op::Slice { x, axis, start }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self
            .value(x)
            .reshaped(shape)
            .map_err(|_| Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(x))))?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::invalid(format!("clamp bounds {lo} > {hi}")));
        }
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.push("clamp", out, Op::Clamp { x, lo, hi }, &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }

        for (id, g) in grads.iter_mut().enumerate() {
            if !self.nodes[id].needs_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contrib: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(contrib.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros_like(&self.nodes[v.0].value));
        }
        f(slot.as_mut().expect("initialized").data_mut());
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.scaled(-1.0));
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let ga = g.zip_map(self.value(b), |g, y| g * y)?;
                    self.accumulate(grads, a, ga);
                }
                if self.needs(b) {
                    let gb = g.zip_map(self.value(a), |g, x| g * x)?;
                    self.accumulate(grads, b, gb);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, a, g.scaled(s)),
            Op::AddRowBias { x, bias } => {
                self.accumulate(grads, x, g.clone());
                let f = self.value(bias).len();
                self.accumulate_with(grads, bias, |gb| {
                    for row in g.data().chunks(f) {
                        for (d, s) in gb.iter_mut().zip(row) {
                            *d += s;
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let va = self.value(a);
                let vb = self.value(b);
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.needs(a) {
                    // dA = G · Bᵀ
                    let bt = transpose(vb.data(), k, n);
                    let mut ga = vec![0.0; m * k];
                    matmul_into(g.data(), &bt, &mut ga, m, n, k);
                    self.accumulate(grads, a, Tensor::new(vec![m, k], ga)?);
                }
                if self.needs(b) {
                    // dB = Aᵀ · G
                    let at = transpose(va.data(), m, k);
                    let mut gb = vec![0.0; k * n];
                    matmul_into(&at, g.data(), &mut gb, k, m, n);
                    self.accumulate(grads, b, Tensor::new(vec![k, n], gb)?);
                }
            }
            Op::Conv2d { input, weight, bias } => {
                let vi = self.value(input);
                let vw = self.value(weight);
                let geom = conv::Geometry::new(vi.shape(), vw.shape()[0]);
                if self.needs(input) {
                    let gi = vi.shape().to_vec();
                    let data = conv::backward_input(&geom, g.data(), vw.data());
                    self.accumulate(grads, input, Tensor::new(gi, data)?);
                }
                if self.needs(weight) {
                    self.accumulate_with(grads, weight, |gw| {
                        conv::backward_weight(&geom, g.data(), vi.data(), gw)
                    });
                }
                if let Some(b) = bias {
                    self.accumulate_with(grads, b, |gb| conv::backward_bias(&geom, g.data(), gb));
                }
            }
            Op::Relu(x) => {
                let gx = g.zip_map(self.value(x), |g, v| if v > 0.0 { g } else { 0.0 })?;
                self.accumulate(grads, x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = g.zip_map(&node.value, |g, s| g * s * (1.0 - s))?;
                self.accumulate(grads, x, gx);
            }
            Op::Abs(x) => {
                let gx = g.zip_map(self.value(x), |g, v| g * super::dense::sign(v))?;
                self.accumulate(grads, x, gx);
            }
            Op::Square(x) => {
                let gx = g.zip_map(self.value(x), |g, v| 2.0 * g * v)?;
                self.accumulate(grads, x, gx);
            }
            Op::LogSoftmax { x, axis } => {
                // dx = g - softmax * sum_c g
                let y = &node.value;
                let (outer, n, inner) = axis_split(y.shape(), axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let gsum: f64 = (0..n).map(|c| g.data()[base + c * inner]).sum();
                        for c in 0..n {
                            let k = base + c * inner;
                            gx[k] = g.data()[k] - y.data()[k].exp() * gsum;
                        }
                    }
                }
                self.accumulate(grads, x, Tensor::new(y.shape().to_vec(), gx)?);
            }
            Op::Sum(x) => {
                let gs = g.data()[0];
                self.accumulate(grads, x, Tensor::full(self.shape(x), gs));
            }
            Op::Mean(x) => {
                let n = self.value(x).len() as f64;
                let gs = g.data()[0] / n;
                self.accumulate(grads, x, Tensor::full(self.shape(x), gs));
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let shape = self.shape(x).to_vec();
                let (outer, n, inner) = axis_split(&shape, axis);
                let factor = if matches!(node.op, Op::MeanAxis { .. }) {
                    1.0 / n as f64
                } else {
                    1.0
                };
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for c in 0..n {
                        let dst = &mut gx[(o * n + c) * inner..(o * n + c + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = s * factor;
                        }
                    }
                }
                self.accumulate(grads, x, Tensor::new(shape, gx)?);
            }
            Op::Slice { x, axis, start } => {
                let len = node.value.shape()[axis];
                let shape = self.shape(x).to_vec();
                let (outer, n, inner) = axis_split(&shape, axis);
                self.accumulate_with(grads, x, |gx| {
                    for o in 0..outer {
                        let to = (o * n + start) * inner;
                        let from = o * len * inner;
                        for (d, s) in gx[to..to + len * inner]
                            .iter_mut()
                            .zip(&g.data()[from..from + len * inner])
                        {
                            *d += s;
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                let gx = g.reshaped(self.shape(x))?;
                self.accumulate(grads, x, gx);
            }
            Op::Clamp { x, lo, hi } => {
                let gx = g.zip_map(self.value(x), |g, v| if v >= lo && v <= hi { g } else { 0.0 })?;
                self.accumulate(grads, x, gx);
            }
        }
        Ok(())
    }
}

fn transpose(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
}
