//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in insertion order. Inputs always
//! precede their consumers, so [`Graph::backward`] is a single reverse
//! sweep. Nodes whose inputs carry no gradient are stored as constants
//! and skipped during the sweep.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise operation kinds exposed through [`Graph::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Relu,
    Sigmoid,
    Tanh,
    Scale(f64),
    Add,
    Sub,
    Hadamard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(Elementwise, Var),
    Binary(Elementwise, Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    BiasLeading(Var, Var),
    BiasTrailing(Var, Var),
    SoftmaxRows(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: Var,
        window: usize,
        stride: usize,
    },
    Sum(Var),
    Mean(Var),
    ReduceAxis {
        input: Var,
        axis: usize,
        mean: bool,
    },
    ConcatCols(Var, Var),
    GatherRows {
        input: Var,
        rows: Vec<usize>,
    },
    Bce {
        input: Var,
        targets: Vec<f64>,
        eps: f64,
    },
    CrossEntropyRows {
        input: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Debug, Default)]
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

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.insert(t, Op::Leaf, false)
    }

    /// Trainable input; [`Graph::backward`] fills its gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.insert(t, Op::Leaf, true)
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

    /// Gradient from the last [`Graph::backward`], if `v` received one.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn insert(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Appends a computed node, enforcing finiteness. When no input
    /// needs a gradient the op record is dropped and the node is a constant.
    fn push(&mut self, name: &str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        Ok(self.insert(value, op, requires_grad))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn elementwise(&mut self, kind: Elementwise, operands: &[Var]) -> Result<Var> {
        match (kind, operands) {
            (Elementwise::Relu | Elementwise::Sigmoid | Elementwise::Tanh | Elementwise::Scale(_), &[x]) => {
                let f: fn(f64, f64) -> f64 = match kind {
                    Elementwise::Relu => |v, _| v.max(0.0),
                    Elementwise::Sigmoid => |v, _| kernels::sigmoid(v),
                    Elementwise::Tanh => |v, _| v.tanh(),
                    _ => |v, c| v * c,
                };
                let c = if let Elementwise::Scale(c) = kind { c } else { 0.0 };
                let out = self.value(x).map(|v| f(v, c));
                self.push("elementwise", out, Op::Unary(kind, x), &[x])
            }
            (Elementwise::Add | Elementwise::Sub | Elementwise::Hadamard, &[a, b]) => {
                self.same_shape(a, b, "elementwise")?;
                let f: fn(f64, f64) -> f64 = match kind {
                    Elementwise::Add => |x, y| x + y,
                    Elementwise::Sub => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let (va, vb) = (self.value(a), self.value(b));
                let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
                let out = Tensor::new(va.shape().to_vec(), data)?;
                self.push("elementwise", out, Op::Binary(kind, a, b), &[a, b])
            }
            _ => Err(Error::dim(format!(
                "{kind:?} takes {} operand(s), got {}",
                if matches!(kind, Elementwise::Add | Elementwise::Sub | Elementwise::Hadamard) { 2 } else { 1 },
                operands.len()
            ))),
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.elementwise(Elementwise::Relu, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sigmoid, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.elementwise(Elementwise::Tanh, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.elementwise(Elementwise::Scale(c), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sub, &[a, b])
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Hadamard, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::dim(format!("matmul: {m}×{k} by {k2}×{n}")));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let out = Tensor::new(vec![m, n], out)?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], data)?;
        self.push("transpose", out, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape.to_vec())?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// `out[i, ...] = x[i, ...] + b[i]`.
    pub fn add_bias_leading(&mut self, x: Var, b: Var) -> Result<Var> {
        let lead = self.shape(x)[0];
        if self.shape(b) != [lead] {
            return Err(Error::dim(format!(
                "leading bias {:?} for tensor {:?}",
                self.shape(b),
                self.shape(x)
            )));
        }
        let inner = self.value(x).len() / lead;
        let mut out = self.value(x).clone();
        let bias = self.value(b).data();
        for (chunk, &bv) in out.data_mut().chunks_exact_mut(inner).zip(bias) {
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        self.push("add_bias_leading", out, Op::BiasLeading(x, b), &[x, b])
    }

    /// `out[..., j] = x[..., j] + b[j]`.
    pub fn add_bias_trailing(&mut self, x: Var, b: Var) -> Result<Var> {
        let last = *self.shape(x).last().unwrap();
        if self.shape(b) != [last] {
            return Err(Error::dim(format!(
                "trailing bias {:?} for tensor {:?}",
                self.shape(b),
                self.shape(x)
            )));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).data();
        for chunk in out.data_mut().chunks_exact_mut(last) {
            chunk.iter_mut().zip(bias).for_each(|(v, bv)| *v += bv);
        }
        self.push("add_bias_trailing", out, Op::BiasTrailing(x, b), &[x, b])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let data = kernels::softmax_rows(self.value(x).data(), c);
        let out = Tensor::new(vec![r, c], data)?;
        self.push("softmax_rows", out, Op::SoftmaxRows(x), &[x])
    }

    /// Cross-correlation of a c_in×h×w input with c_out×c_in×k×k kernels.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (c_in, h, w) = self.value(input).dims3()?;
        let ks = self.shape(kernel).to_vec();
        let [c_out, kc, k, k2] = ks[..] else {
            return Err(Error::dim(format!("conv2d kernel must be rank 4, got {ks:?}")));
        };
        if kc != c_in || k != k2 {
            return Err(Error::dim(format!("conv2d kernel {ks:?} for input {c_in}×{h}×{w}")));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d stride must be positive"));
        }
        if k > h + 2 * pad || k > w + 2 * pad {
            return Err(Error::dim(format!(
                "conv2d kernel {k}×{k} larger than padded input {}×{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let geom = ConvGeometry {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        };
        let cols = kernels::im2col(self.value(input).data(), &geom);
        let l = geom.positions();
        let mut out = vec![0.0; c_out * l];
        kernels::gemm(c_out, geom.cols_rows(), l, self.value(kernel).data(), false, &cols, false, &mut out, false);
        let out = Tensor::new(vec![c_out, geom.h_out, geom.w_out], out)?;
        self.push(
            "conv2d",
            out,
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            },
            &[input, kernel],
        )
    }

    pub fn pool2d(&mut self, kind: PoolKind, input: Var, window: usize, stride: usize) -> Result<Var> {
        let (c, h, w) = self.value(input).dims3()?;
        if window == 0 || stride == 0 {
            return Err(Error::dim("pool2d window and stride must be positive"));
        }
        if window > h || window > w {
            return Err(Error::dim(format!("pool2d window {window} exceeds input {h}×{w}")));
        }
        if (h - window) % stride != 0 || (w - window) % stride != 0 {
            return Err(Error::dim(format!(
                "pool2d window {window}/stride {stride} leaves a partial window on {h}×{w}"
            )));
        }
        let (ho, wo) = ((h - window) / stride + 1, (w - window) / stride + 1);
        let src = self.value(input).data();
        let mut out = vec![0.0; c * ho * wo];
        let mut argmax = Vec::new();
        if kind == PoolKind::Max {
            argmax.reserve(out.len());
        }
        let norm = 1.0 / (window * window) as f64;
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    let mut total = 0.0;
                    for dy in 0..window {
                        for dx in 0..window {
                            let idx = (ch * h + oy * stride + dy) * w + ox * stride + dx;
                            let v = src[idx];
                            // strict comparison keeps the first maximum in row-major order
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                            total += v;
                        }
                    }
                    let o = (ch * ho + oy) * wo + ox;
                    match kind {
                        PoolKind::Max => {
                            out[o] = best;
                            argmax.push(best_idx);
                        }
                        PoolKind::Avg => out[o] = total * norm,
                    }
                }
            }
        }
        let out = Tensor::new(vec![c, ho, wo], out)?;
        let op = match kind {
            PoolKind::Max => Op::MaxPool { input, argmax },
            PoolKind::Avg => Op::AvgPool { input, window, stride },
        };
        self.push("pool2d", out, op, &[input])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.push("mean", out, Op::Mean(x), &[x])
    }

    /// Sums (or averages) a matrix over `axis`: 0 collapses rows, giving
    /// one value per column; 1 collapses columns, giving one per row.
    pub fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let out = match axis {
            0 => {
                let mut acc = vec![0.0; c];
                for row in src.chunks_exact(c) {
                    acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                if mean {
                    acc.iter_mut().for_each(|a| *a /= r as f64);
                }
                acc
            }
            1 => src
                .chunks_exact(c)
                .map(|row| {
                    let s: f64 = row.iter().sum();
                    if mean {
                        s / c as f64
                    } else {
                        s
                    }
                })
                .collect(),
            _ => return Err(Error::dim(format!("reduce_axis: axis {axis} on a matrix"))),
        };
        let out = Tensor::vector(out);
        self.push("reduce_axis", out, Op::ReduceAxis { input: x, axis, mean }, &[x])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.value(a).dims2()?;
        let (rb, cb) = self.value(b).dims2()?;
        if ra != rb {
            return Err(Error::dim(format!("concat_cols: {ra} rows vs {rb} rows")));
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(self.value(a).row(i));
            data.extend_from_slice(self.value(b).row(i));
        }
        let out = Tensor::new(vec![ra, ca + cb], data)?;
        self.push("concat_cols", out, Op::ConcatCols(a, b), &[a, b])
    }

    /// Selects (and possibly repeats) matrix rows.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if rows.is_empty() {
            return Err(Error::dim("gather_rows: empty row list"));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::dim(format!("gather_rows: row {bad} of {r}")));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(self.value(x).row(i));
        }
        let out = Tensor::new(vec![rows.len(), c], data)?;
        self.push(
            "gather_rows",
            out,
            Op::GatherRows {
                input: x,
                rows: rows.to_vec(),
            },
            &[x],
        )
    }

    /// Mean binary cross-entropy of probabilities against 0/1 targets.
    /// Probabilities are clamped to `[eps, 1 - eps]`; clamped entries pass
    /// no gradient.
    pub fn binary_cross_entropy(&mut self, probs: Var, targets: &[f64], eps: f64) -> Result<Var> {
        let p = self.value(probs);
        if p.len() != targets.len() {
            return Err(Error::dim(format!(
                "binary_cross_entropy: {} probabilities, {} targets",
                p.len(),
                targets.len()
            )));
        }
        let total: f64 = p
            .data()
            .iter()
            .zip(targets)
            .map(|(&s, &y)| {
                let s = s.clamp(eps, 1.0 - eps);
                -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
            })
            .sum();
        let out = Tensor::scalar(total / targets.len() as f64);
        self.push(
            "binary_cross_entropy",
            out,
            Op::Bce {
                input: probs,
                targets: targets.to_vec(),
                eps,
            },
            &[probs],
        )
    }

    /// Mean softmax cross-entropy over the rows of a logit matrix.
    pub fn cross_entropy_rows(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (r, c) = self.value(logits).dims2()?;
        if labels.len() != r {
            return Err(Error::dim(format!("cross_entropy_rows: {r} rows, {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::usage(format!("label {bad} out of range for {c} classes")));
        }
        let x = self.value(logits).data();
        let probs = kernels::softmax_rows(x, c);
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &x[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let out = Tensor::scalar(total / r as f64);
        self.push(
            "cross_entropy_rows",
            out,
            Op::CrossEntropyRows {
                input: logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Fills gradients of `loss` for every node that requires one.
    /// Consumers of the same node accumulate by addition.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            let node = &mut self.nodes[i];
            node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let nodes = &self.nodes;
        // accumulate into input `v` only when it takes a gradient
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].requires_grad {
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
                f(slot);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Unary(kind, x) => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |dx| {
                    for j in 0..dx.len() {
                        dx[j] += g[j]
                            * match kind {
                                Elementwise::Relu => {
                                    if xv[j] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Elementwise::Sigmoid => out[j] * (1.0 - out[j]),
                                Elementwise::Tanh => 1.0 - out[j] * out[j],
                                Elementwise::Scale(c) => *c,
                                _ => unreachable!(),
                            };
                    }
                });
            }
            Op::Binary(kind, a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                match kind {
                    Elementwise::Add => {
                        acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                        acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                    }
                    Elementwise::Sub => {
                        acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                        acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
                    }
                    _ => {
                        acc(*a, &mut |d| {
                            for j in 0..d.len() {
                                d[j] += g[j] * bv[j];
                            }
                        });
                        acc(*b, &mut |d| {
                            for j in 0..d.len() {
                                d[j] += g[j] * av[j];
                            }
                        });
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                // dA = G·Bᵀ, dB = Aᵀ·G
                acc(*a, &mut |d| kernels::gemm(m, n, k, g, false, bv, true, d, true));
                acc(*b, &mut |d| kernels::gemm(k, m, n, av, true, g, false, d, true));
            }
            Op::Transpose(x) => {
                let (r, c) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                acc(*x, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g)),
            Op::BiasLeading(x, b) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                let inner = g.len() / nodes[b.0].value.len();
                acc(*b, &mut |d| {
                    for (db, chunk) in d.iter_mut().zip(g.chunks_exact(inner)) {
                        *db += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::BiasTrailing(x, b) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                let last = nodes[b.0].value.len();
                acc(*b, &mut |d| {
                    for chunk in g.chunks_exact(last) {
                        d.iter_mut().zip(chunk).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let c = node.value.shape()[1];
                acc(*x, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(out.chunks_exact(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let c_out = node.value.shape()[0];
                let (rows, l) = (geom.cols_rows(), geom.positions());
                acc(*kernel, &mut |d| kernels::gemm(c_out, l, rows, g, false, cols, true, d, true));
                let kv = nodes[kernel.0].value.data();
                acc(*input, &mut |d| {
                    let mut dcols = vec![0.0; rows * l];
                    kernels::gemm(rows, c_out, l, kv, true, g, false, &mut dcols, false);
                    kernels::col2im(&dcols, geom, d);
                });
            }
            Op::MaxPool { input, argmax } => acc(*input, &mut |d| {
                for (&src, &gv) in argmax.iter().zip(g) {
                    d[src] += gv;
                }
            }),
            Op::AvgPool { input, window, stride } => {
                let [c, h, w] = nodes[input.0].value.shape()[..] else { unreachable!() };
                let [_, ho, wo] = node.value.shape()[..] else { unreachable!() };
                let norm = 1.0 / (window * window) as f64;
                acc(*input, &mut |d| {
                    for ch in 0..c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let gv = g[(ch * ho + oy) * wo + ox] * norm;
                                for dy in 0..*window {
                                    for dx in 0..*window {
                                        d[(ch * h + oy * stride + dy) * w + ox * stride + dx] += gv;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = nodes[x.0].value.len() as f64;
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0] / n))
            }
            Op::ReduceAxis { input, axis, mean } => {
                let (r, c) = (nodes[input.0].value.shape()[0], nodes[input.0].value.shape()[1]);
                acc(*input, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += match (axis, mean) {
                                (0, false) => g[j],
                                (0, true) => g[j] / r as f64,
                                (_, false) => g[i],
                                (_, true) => g[i] / c as f64,
                            };
                        }
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let ca = nodes[a.0].value.shape()[1];
                let cb = nodes[b.0].value.shape()[1];
                acc(*a, &mut |d| {
                    for (drow, grow) in d.chunks_exact_mut(ca).zip(g.chunks_exact(ca + cb)) {
                        drow.iter_mut().zip(&grow[..ca]).for_each(|(d, g)| *d += g);
                    }
                });
                acc(*b, &mut |d| {
                    for (drow, grow) in d.chunks_exact_mut(cb).zip(g.chunks_exact(ca + cb)) {
                        drow.iter_mut().zip(&grow[ca..]).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::GatherRows { input, rows } => {
                let c = node.value.shape()[1];
                acc(*input, &mut |d| {
                    for (k, &r) in rows.iter().enumerate() {
                        d[r * c..(r + 1) * c]
                            .iter_mut()
                            .zip(&g[k * c..(k + 1) * c])
                            .for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::Bce { input, targets, eps } => {
                let p = nodes[input.0].value.data();
                let n = targets.len() as f64;
                acc(*input, &mut |d| {
                    for j in 0..d.len() {
                        let s = p[j];
                        if s > *eps && s < 1.0 - eps {
                            let y = targets[j];
                            d[j] += g[0] * (-(y / s) + (1.0 - y) / (1.0 - s)) / n;
                        }
                    }
                });
            }
            Op::CrossEntropyRows { input, labels, probs } => {
                let c = node_cols(&nodes[input.0].value);
                let r = labels.len() as f64;
                acc(*input, &mut |d| {
                    for (i, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            d[i * c + j] += g[0] * (probs[i * c + j] - onehot) / r;
                        }
                    }
                });
            }
        }
    }
}

fn node_cols(t: &Tensor) -> usize {
    t.shape()[1]
}
