//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! Every operation appends a node whose inputs are strictly earlier nodes, so
//! walking the node list backwards is a reverse topological order. Nodes that
//! do not depend on any trainable leaf are never visited by `backward`.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::{gelu, gelu_grad, softmax_in_place, Element, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    pub fn from_index(i: usize) -> Self {
        Var(i)
    }
}

/// Query/key row ranges of one independent attention segment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub queries: Range<usize>,
    pub keys: Range<usize>,
}

#[derive(Debug)]
struct AttentionSaved {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    segments: Vec<Segment>,
    /// Softmax probabilities, per segment then per head, row-major.
    probs: Vec<f32>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f32),
    DivScalar(Var, Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    L2Norm { x: Var, norms: Vec<f32> },
    Gather { srcs: Vec<Var>, index: Vec<(usize, usize)> },
    SegmentMean { x: Var, segments: Vec<Range<usize>> },
    Attention(Box<AttentionSaved>),
    SoftmaxRows(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor },
    Mse { x: Var, target: Tensor },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradient of a scalar loss with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// A single-owner computation record.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    checked: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that rejects non-finite values at every operation boundary.
    pub fn checked() -> Self {
        Self { nodes: Vec::new(), checked: true }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A non-trainable leaf; no gradient ever flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Copies a value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], what: &str) -> Result<Var> {
        if self.checked {
            value.check_finite(what)?;
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        self.push(out, Op::MatMulNt(a, b), &[a, b], "matmul_nt")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push(out, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        self.push(out, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        self.push(out, Op::Mul(a, b), &[a, b], "mul")
    }

    /// Adds a bias vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.value(a).add_row(self.value(row))?;
        self.push(out, Op::AddRow(a, row), &[a, row], "add_row")
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c), &[a], "scale")
    }

    /// Divides every element of `a` by the one-element tensor `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let d = self.value(s).item()?;
        let out = self.value(a).map(|v| v / d);
        self.push(out, Op::DivScalar(a, s), &[a, s], "div_scalar")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a), &[a], "gelu")
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::Dimension("layer_norm affine width".into()));
        }
        let xhat_t = xv.layer_norm_rows(eps);
        let rstd: Vec<f32> = xv
            .data()
            .chunks(c)
            .map(|row| {
                let n = c as f32;
                let mean = row.iter().sum::<f32>() / n;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
                1.0 / (var + eps).sqrt()
            })
            .collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = xhat_t.clone();
        for row in out.data_mut().chunks_mut(c) {
            for ((o, &gi), &bi) in row.iter_mut().zip(g).zip(b) {
                *o = *o * gi + bi;
            }
        }
        let op = Op::LayerNorm { x, gamma, beta, xhat: xhat_t.into_data(), rstd };
        self.push(out, op, &[x, gamma, beta], "layer_norm")
    }

    /// Scales each row to unit L2 norm; zero rows stay zero.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let norms: Vec<f32> = xv.data().chunks(c).map(|r| r.iter().map(|v| v * v).sum::<f32>().sqrt()).collect();
        let out = xv.l2_normalize_rows();
        self.push(out, Op::L2Norm { x, norms }, &[x], "l2_normalize")
    }

    /// Builds a matrix whose row `r` is row `index[r].1` of `srcs[index[r].0]`.
    pub fn gather(&mut self, srcs: &[Var], index: Vec<(usize, usize)>) -> Result<Var> {
        let cols = match srcs.first() {
            Some(&s) => self.value(s).cols(),
            None => return Err(Error::Dimension("gather with no sources".into())),
        };
        let mut data = Vec::with_capacity(index.len() * cols);
        for &(s, r) in &index {
            let src = srcs.get(s).map(|&v| self.value(v)).ok_or_else(|| Error::Dimension(format!("gather source {s}")))?;
            if src.cols() != cols {
                return Err(Error::Dimension("gather column mismatch".into()));
            }
            if r >= src.rows() {
                return Err(Error::Dimension(format!("gather row {r} of {}", src.rows())));
            }
            data.extend_from_slice(src.row(r));
        }
        let out = Tensor::new(vec![index.len(), cols], data)?;
        self.push(out, Op::Gather { srcs: srcs.to_vec(), index }, srcs, "gather")
    }

    /// Mean of the rows in each range; one output row per range.
    pub fn segment_mean(&mut self, x: Var, segments: Vec<Range<usize>>) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = vec![0.0f32; segments.len() * c];
        for (s, seg) in segments.iter().enumerate() {
            if seg.is_empty() || seg.end > xv.rows() {
                return Err(Error::Contract(format!("bad pooling segment {seg:?}")));
            }
            let out = &mut data[s * c..(s + 1) * c];
            for r in seg.clone() {
                for (o, &v) in out.iter_mut().zip(xv.row(r)) {
                    *o += v;
                }
            }
            let inv = 1.0 / seg.len() as f32;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let out = Tensor::new(vec![segments.len(), c], data)?;
        self.push(out, Op::SegmentMean { x, segments }, &[x], "segment_mean")
    }

    /// Multi-head scaled dot-product attention evaluated independently per
    /// segment: queries in `seg.queries` attend to keys/values in `seg.keys`.
    /// `q`, `k` share a width divisible by `heads`; `v` width must be too.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segments: Vec<Segment>) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let dq = qv.cols();
        let dv = vv.cols();
        if heads == 0 || dq % heads != 0 || dv % heads != 0 || kv.cols() != dq {
            return Err(Error::Dimension(format!("attention widths q={dq} k={} v={dv} heads={heads}", kv.cols())));
        }
        if kv.rows() != vv.rows() {
            return Err(Error::Dimension("attention key/value rows differ".into()));
        }
        let (hq, hv) = (dq / heads, dv / heads);
        let scale = 1.0 / (hq as f32).sqrt();
        let mut out = Tensor::zeros(&[qv.rows(), dv]);
        let mut probs = Vec::new();
        for seg in &segments {
            let (lq, lk) = (seg.queries.len(), seg.keys.len());
            if lk == 0 || seg.queries.end > qv.rows() || seg.keys.end > kv.rows() {
                return Err(Error::Contract(format!("bad attention segment {seg:?}")));
            }
            for h in 0..heads {
                let start = probs.len();
                probs.resize(start + lq * lk, 0.0);
                let p = &mut probs[start..];
                f32::gemm(
                    lq,
                    hq,
                    lk,
                    scale,
                    &qv.data()[seg.queries.start * dq + h * hq..],
                    (dq as isize, 1),
                    &kv.data()[seg.keys.start * dq + h * hq..],
                    (1, dq as isize),
                    0.0,
                    p,
                    (lk as isize, 1),
                );
                for row in p.chunks_mut(lk) {
                    softmax_in_place(row);
                }
                f32::gemm(
                    lq,
                    lk,
                    hv,
                    1.0,
                    p,
                    (lk as isize, 1),
                    &vv.data()[seg.keys.start * dv + h * hv..],
                    (dv as isize, 1),
                    0.0,
                    &mut out.data_mut()[seg.queries.start * dv + h * hv..],
                    (dv as isize, 1),
                );
            }
        }
        let saved = AttentionSaved { q, k, v, heads, segments, probs };
        self.push(out, Op::Attention(Box::new(saved)), &[q, k, v], "attention")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax_rows()?;
        self.push(out, Op::SoftmaxRows(a), &[a], "softmax_rows")
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        let lv = self.value(logits);
        let (n, c) = (lv.rows(), lv.cols());
        if targets.len() != n || n == 0 {
            return Err(Error::Contract(format!("cross_entropy: {} targets for {n} rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Contract(format!("cross_entropy target {bad} >= {c}")));
        }
        let probs = lv.softmax_rows()?;
        let mut total = 0.0f64;
        for (i, &t) in targets.iter().enumerate() {
            let row = lv.row(i);
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
            let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
            total += lse - row[t] as f64;
        }
        let out = Tensor::scalar((total / n as f64) as f32);
        self.push(out, Op::CrossEntropy { logits, targets, probs }, &[logits], "cross_entropy")
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != target.shape() {
            return Err(Error::Dimension(format!("mse {:?} vs {:?}", xv.shape(), target.shape())));
        }
        let n = xv.len().max(1) as f64;
        let total: f64 = xv.data().iter().zip(target.data()).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum();
        let out = Tensor::scalar((total / n) as f32);
        self.push(out, Op::Mse { x, target }, &[x], "mse")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum(a), &[a], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s: f64 = t.data().iter().map(|&v| v as f64).sum::<f64>() / t.len().max(1) as f64;
        self.push(Tensor::scalar(s as f32), Op::Mean(a), &[a], "mean")
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!("backward from non-scalar of shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.matmul_nt(self.value(*b))?);
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, self.value(*a).matmul_tn(g)?);
                }
            }
            Op::MatMulNt(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.matmul(self.value(*b))?);
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.matmul_tn(self.value(*a))?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.mul(self.value(*b))?);
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.mul(self.value(*a))?);
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*row) {
                    let summed = column_sums(g);
                    let shape = self.value(*row).shape().to_vec();
                    self.accumulate(grads, *row, Tensor::new(shape, summed)?);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scale(*c)),
            Op::DivScalar(a, s) => {
                let d = self.value(*s).item()?;
                self.accumulate(grads, *a, g.scale(1.0 / d));
                if self.wants(*s) {
                    let dot: f64 = g.data().iter().zip(self.value(*a).data()).map(|(&gi, &ai)| gi as f64 * ai as f64).sum();
                    let ds = -dot / (d as f64 * d as f64);
                    let shape = self.value(*s).shape().to_vec();
                    self.accumulate(grads, *s, Tensor::new(shape, vec![ds as f32])?);
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let data = g.data().iter().zip(x.data()).map(|(&gi, &xi)| gi * gelu_grad(xi)).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = g.cols();
                let gam = self.value(*gamma).data();
                if self.wants(*x) {
                    let mut dx = vec![0.0f32; g.len()];
                    for (r, ((gr, xr), dxr)) in g.data().chunks(c).zip(xhat.chunks(c)).zip(dx.chunks_mut(c)).enumerate() {
                        let mut m1 = 0.0f32;
                        let mut m2 = 0.0f32;
                        for j in 0..c {
                            let d = gr[j] * gam[j];
                            m1 += d;
                            m2 += d * xr[j];
                        }
                        m1 /= c as f32;
                        m2 /= c as f32;
                        for j in 0..c {
                            dxr[j] = rstd[r] * (gr[j] * gam[j] - m1 - xr[j] * m2);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
                }
                if self.wants(*gamma) {
                    let mut dg = vec![0.0f32; c];
                    for (gr, xr) in g.data().chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * xr[j];
                        }
                    }
                    let shape = self.value(*gamma).shape().to_vec();
                    self.accumulate(grads, *gamma, Tensor::new(shape, dg)?);
                }
                if self.wants(*beta) {
                    let shape = self.value(*beta).shape().to_vec();
                    self.accumulate(grads, *beta, Tensor::new(shape, column_sums(g))?);
                }
            }
            Op::L2Norm { x, norms } => {
                let y = &node.value;
                let c = g.cols();
                let mut dx = vec![0.0f32; g.len()];
                for (r, ((gr, yr), dxr)) in g.data().chunks(c).zip(y.data().chunks(c)).zip(dx.chunks_mut(c)).enumerate() {
                    if norms[r] == 0.0 {
                        continue;
                    }
                    let dot: f32 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dxr[j] = (gr[j] - yr[j] * dot) / norms[r];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
            }
            Op::Gather { srcs, index } => {
                let c = g.cols();
                let mut parts: Vec<Option<Tensor>> = srcs.iter().map(|&s| self.wants(s).then(|| Tensor::zeros(self.value(s).shape()))).collect();
                for (r, &(s, row)) in index.iter().enumerate() {
                    if let Some(p) = &mut parts[s] {
                        let dst = &mut p.data_mut()[row * c..(row + 1) * c];
                        for (d, &v) in dst.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                }
                for (s, p) in srcs.iter().zip(parts) {
                    if let Some(p) = p {
                        self.accumulate(grads, *s, p);
                    }
                }
            }
            Op::SegmentMean { x, segments } => {
                let xs = self.value(*x);
                let c = xs.cols();
                let mut dx = Tensor::zeros(xs.shape());
                for (s, seg) in segments.iter().enumerate() {
                    let inv = 1.0 / seg.len() as f32;
                    for r in seg.clone() {
                        let dst = &mut dx.data_mut()[r * c..(r + 1) * c];
                        for (d, &v) in dst.iter_mut().zip(g.row(s)) {
                            *d += v * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Attention(saved) => self.attention_backward(saved, g, grads)?,
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let c = g.cols();
                let mut dx = vec![0.0f32; g.len()];
                for ((gr, yr), dxr) in g.data().chunks(c).zip(y.data().chunks(c)).zip(dx.chunks_mut(c)) {
                    let dot: f32 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), dx)?);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let scale = g.item()? / targets.len() as f32;
                let c = probs.cols();
                let mut d = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    d.data_mut()[i * c + t] -= 1.0;
                }
                self.accumulate(grads, *logits, d.scale(scale));
            }
            Op::Mse { x, target } => {
                let xv = self.value(*x);
                let scale = 2.0 * g.item()? / xv.len().max(1) as f32;
                self.accumulate(grads, *x, xv.sub(target)?.scale(scale));
            }
            Op::Sum(a) => {
                let gv = g.item()?;
                self.accumulate(grads, *a, Tensor::full(self.value(*a).shape(), gv));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let gv = g.item()? / av.len().max(1) as f32;
                self.accumulate(grads, *a, Tensor::full(av.shape(), gv));
            }
        }
        Ok(())
    }

    fn attention_backward(&self, s: &AttentionSaved, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let (qv, kv, vv) = (self.value(s.q), self.value(s.k), self.value(s.v));
        let (dq_w, dv_w) = (qv.cols(), vv.cols());
        let (hq, hv) = (dq_w / s.heads, dv_w / s.heads);
        let scale = 1.0 / (hq as f32).sqrt();
        let mut dq = Tensor::zeros(qv.shape());
        let mut dk = Tensor::zeros(kv.shape());
        let mut dv = Tensor::zeros(vv.shape());
        let mut offset = 0;
        let mut dz = Vec::new();
        for seg in &s.segments {
            let (lq, lk) = (seg.queries.len(), seg.keys.len());
            for h in 0..s.heads {
                let p = &s.probs[offset..offset + lq * lk];
                offset += lq * lk;
                let g_off = seg.queries.start * dv_w + h * hv;
                let v_off = seg.keys.start * dv_w + h * hv;
                let q_off = seg.queries.start * dq_w + h * hq;
                let k_off = seg.keys.start * dq_w + h * hq;
                // dP = G Vᵀ
                dz.clear();
                dz.resize(lq * lk, 0.0);
                f32::gemm(lq, hv, lk, 1.0, &g.data()[g_off..], (dv_w as isize, 1), &vv.data()[v_off..], (1, dv_w as isize), 0.0, &mut dz, (lk as isize, 1));
                // dV += Pᵀ G
                f32::gemm(lk, lq, hv, 1.0, p, (1, lk as isize), &g.data()[g_off..], (dv_w as isize, 1), 1.0, &mut dv.data_mut()[v_off..], (dv_w as isize, 1));
                for (zr, pr) in dz.chunks_mut(lk).zip(p.chunks(lk)) {
                    let dot: f32 = zr.iter().zip(pr).map(|(a, b)| a * b).sum();
                    for (z, &pv) in zr.iter_mut().zip(pr) {
                        *z = pv * (*z - dot) * scale;
                    }
                }
                // dQ += dZ K ; dK += dZᵀ Q
                f32::gemm(
                    lq,
                    lk,
                    hq,
                    1.0,
                    &dz,
                    (lk as isize, 1),
                    &kv.data()[k_off..],
                    (dq_w as isize, 1),
                    1.0,
                    &mut dq.data_mut()[q_off..],
                    (dq_w as isize, 1),
                );
                f32::gemm(
                    lk,
                    lq,
                    hq,
                    1.0,
                    &dz,
                    (1, lk as isize),
                    &qv.data()[q_off..],
                    (dq_w as isize, 1),
                    1.0,
                    &mut dk.data_mut()[k_off..],
                    (dq_w as isize, 1),
                );
            }
        }
        self.accumulate(grads, s.q, dq);
        self.accumulate(grads, s.k, dk);
        self.accumulate(grads, s.v, dv);
        Ok(())
    }
}

fn column_sums(g: &Tensor) -> Vec<f32> {
    let c = g.cols();
    let mut out = vec![0.0f32; c];
    for row in g.data().chunks(c.max(1)) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::checked();
        let x = tape.param(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn half_square_norm_gives_identity() {
        let mut tape = Tape::new();
        let xt = Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.0]).unwrap();
        let x = tape.param(xt.clone());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let h = tape.scale(s, 0.5).unwrap();
        let g = tape.backward(h).unwrap();
        assert_eq!(g.get(x).unwrap(), &xt);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::full(&[2, 2], 1.0));
        let b = tape.constant(Tensor::full(&[2, 2], 2.0));
        let m = tape.matmul(a, b).unwrap();
        let s = tape.sum(m).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(b).is_none());
        assert!(g.get(a).is_some());
    }

    #[test]
    fn checked_tape_rejects_nan() {
        let mut tape = Tape::checked();
        let a = tape.param(Tensor::full(&[1], f32::INFINITY));
        assert!(matches!(tape.scale(a, 0.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn gradient_shapes_match_values() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::full(&[3, 4], 0.1));
        let b = tape.param(Tensor::full(&[4], 0.2));
        let y = tape.add_row(a, b).unwrap();
        let y = tape.gelu(y).unwrap();
        let s = tape.mean(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().shape(), &[3, 4]);
        assert_eq!(g.get(b).unwrap().shape(), &[4]);
    }
}
