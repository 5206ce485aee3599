//! Reverse-mode automatic differentiation over a flat tape of nodes.
//!
//! Operations are recorded in construction order, so node index order is
//! already a topological order and `backward` is a single reverse sweep.
//! Values are computed eagerly at record time; gradients are allocated only
//! for nodes reachable from a `requires_grad` leaf.

use crate::tensor::{entropy_unchecked, masked_softmax_unchecked, Tensor};
use crate::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

enum Op {
    Leaf,
    /// a + b, same shape
    Add(NodeId, NodeId),
    /// a + c * b, same shape
    AddScaled(NodeId, NodeId, f64),
    Scale(NodeId, f64),
    MulElem(NodeId, NodeId),
    /// [m,k] x [k,n]
    Matmul(NodeId, NodeId),
    Relu(NodeId),
    /// Row-wise layer normalization, no affine parameters.
    LayerNorm(NodeId),
    /// Columns [start, end) of a rank-2 tensor.
    SliceCols(NodeId, usize, usize),
    /// Rows of a [v, d] table selected by id; backward scatter-adds.
    GatherRows(NodeId, Vec<usize>),
    /// out[idx[i]] += src[i], output has n_out rows.
    ScatterAddRows(NodeId, Vec<usize>, usize),
    /// Elements of a rank-2 tensor by (row, col) pairs, reshaped to [rows, cols].
    GatherElems(NodeId, Vec<(usize, usize)>),
    /// [n,d] rows scaled by a length-n vector.
    MulRows(NodeId, NodeId),
    /// Each row divided by its own sum.
    NormalizeRows(NodeId),
    /// Row-wise softmax; masked columns are treated as -inf logits and get
    /// probability 0 (no gradient flows through them).
    SoftmaxRows(NodeId, Option<Vec<bool>>),
    CausalAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
        /// Saved attention probabilities, [batch, heads, seq, seq] row-major.
        probs: Vec<f64>,
    },
    /// Mean of -ln p[target] over rows; saves row softmax.
    CrossEntropyMean {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    /// Mean over rows of the Shannon entropy of each row (rows are
    /// probability vectors; exact zeros contribute nothing).
    EntropyMeanRows(NodeId),
    /// sum_e coeff[e] * mean_i p[i,e] — used by the load-balancing term.
    ColMeanDot(NodeId, Vec<f64>),
    SumAll(NodeId),
    MeanAll(NodeId),
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.add_scaled(a, b, 1.0)
    }

    /// a + c * b
    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, c: f64) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                ta.shape, tb.shape
            )));
        }
        let data = ta
            .data
            .iter()
            .zip(&tb.data)
            .map(|(x, y)| x + c * y)
            .collect();
        let value = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        let rg = self.requires(a) || self.requires(b);
        let op = if c == 1.0 {
            Op::Add(a, b)
        } else {
            Op::AddScaled(a, b, c)
        };
        Ok(self.push(value, rg, op))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let ta = &self.nodes[a.0].value;
        let value = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|x| c * x).collect(),
        };
        let rg = self.requires(a);
        self.push(value, rg, Op::Scale(a, c))
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(Error::Shape(format!(
                "mul_elem: {:?} vs {:?}",
                ta.shape, tb.shape
            )));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let value = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, rg, Op::MulElem(a, b)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.nodes[a.0].value.dims2()?;
        let (kb, n) = self.nodes[b.0].value.dims2()?;
        if ka != kb {
            return Err(Error::Shape(format!("matmul: inner dims {ka} vs {kb}")));
        }
        let mut out = vec![0.0; m * n];
        {
            let da = &self.nodes[a.0].value.data;
            let db = &self.nodes[b.0].value.data;
            matmul_into(da, db, &mut out, m, ka, n);
        }
        let value = Tensor {
            shape: vec![m, n],
            data: out,
        };
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, rg, Op::Matmul(a, b)))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a.0].value;
        let value = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|&x| x.max(0.0)).collect(),
        };
        let rg = self.requires(a);
        self.push(value, rg, Op::Relu(a))
    }

    pub fn layer_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, d) = self.nodes[a.0].value.dims2()?;
        let src = &self.nodes[a.0].value.data;
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..d {
                out[i * d + j] = (row[j] - mean) * inv;
            }
        }
        let value = Tensor {
            shape: vec![n, d],
            data: out,
        };
        let rg = self.requires(a);
        Ok(self.push(value, rg, Op::LayerNorm(a)))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (n, d) = self.nodes[a.0].value.dims2()?;
        if start >= end || end > d {
            return Err(Error::Shape(format!(
                "slice_cols [{start},{end}) of width {d}"
            )));
        }
        let w = end - start;
        let src = &self.nodes[a.0].value.data;
        let mut out = vec![0.0; n * w];
        for i in 0..n {
            out[i * w..(i + 1) * w].copy_from_slice(&src[i * d + start..i * d + end]);
        }
        let value = Tensor {
            shape: vec![n, w],
            data: out,
        };
        let rg = self.requires(a);
        Ok(self.push(value, rg, Op::SliceCols(a, start, end)))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (v, d) = self.nodes[a.0].value.dims2()?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidArg(format!("gather_rows index {bad} >= {v}")));
        }
        let src = &self.nodes[a.0].value.data;
        let mut out = vec![0.0; idx.len() * d];
        for (i, &r) in idx.iter().enumerate() {
            out[i * d..(i + 1) * d].copy_from_slice(&src[r * d..(r + 1) * d]);
        }
        let value = Tensor {
            shape: vec![idx.len(), d],
            data: out,
        };
        let rg = self.requires(a);
        Ok(self.push(value, rg, Op::GatherRows(a, idx.to_vec())))
    }

    pub fn scatter_add_rows(&mut self, src: NodeId, idx: &[usize], n_out: usize) -> Result<NodeId> {
        let (n, d) = self.nodes[src.0].value.dims2()?;
        if idx.len() != n {
            return Err(Error::Shape(format!(
                "scatter_add_rows: {} indices for {} rows",
                idx.len(),
                n
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n_out) {
            return Err(Error::InvalidArg(format!("scatter index {bad} >= {n_out}")));
        }
        let data = &self.nodes[src.0].value.data;
        let mut out = vec![0.0; n_out * d];
        for (i, &r) in idx.iter().enumerate() {
            for j in 0..d {
                out[r * d + j] += data[i * d + j];
            }
        }
        let value = Tensor {
            shape: vec![n_out, d],
            data: out,
        };
        let rg = self.requires(src);
        Ok(self.push(value, rg, Op::ScatterAddRows(src, idx.to_vec(), n_out)))
    }

    /// Gather scattered elements of a rank-2 tensor into a [rows, cols] block.
    /// `pairs` is row-major, length rows*cols.
    pub fn gather_elems(
        &mut self,
        a: NodeId,
        pairs: &[(usize, usize)],
        rows: usize,
        cols: usize,
    ) -> Result<NodeId> {
        let (n, d) = self.nodes[a.0].value.dims2()?;
        if pairs.len() != rows * cols {
            return Err(Error::Shape(format!(
                "gather_elems: {} pairs for {rows}x{cols}",
                pairs.len()
            )));
        }
        if let Some(&(r, c)) = pairs.iter().find(|&&(r, c)| r >= n || c >= d) {
            return Err(Error::InvalidArg(format!(
                "gather_elems index ({r},{c}) out of {n}x{d}"
            )));
        }
        let src = &self.nodes[a.0].value.data;
        let out: Vec<f64> = pairs.iter().map(|&(r, c)| src[r * d + c]).collect();
        let value = Tensor {
            shape: vec![rows, cols],
            data: out,
        };
        let rg = self.requires(a);
        Ok(self.push(value, rg, Op::GatherElems(a, pairs.to_vec())))
    }

    /// Scale row i of `a` by `w[i]`.
    pub fn mul_rows(&mut self, a: NodeId, w: NodeId) -> Result<NodeId> {
        let (n, d) = self.nodes[a.0].value.dims2()?;
        if self.nodes[w.0].value.numel() != n {
            return Err(Error::Shape(format!(
                "mul_rows: {} weights for {n} rows",
                self.nodes[w.0].value.numel()
            )));
        }
        let da = &self.nodes[a.0].value.data;
        let dw = &self.nodes[w.0].value.data;
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] = da[i * d + j] * dw[i];
            }
        }
        let value = Tensor {
            shape: vec![n, d],
            data: out,
        };
        let rg = self.requires(a) || self.requires(w);
        Ok(self.push(value, rg, Op::MulRows(a, w)))
    }

    /// Divide each row by its sum.
    pub fn normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, d) = self.nodes[a.0].value.dims2()?;
        let src = &self.nodes[a.0].value.data;
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let s: f64 = src[i * d..(i + 1) * d].iter().sum();
            if s == 0.0 || !s.is_finite() {
                return Err(Error::NonFinite(format!(
                    "normalize_rows: row {i} sums to {s}"
                )));
            }
            for j in 0..d {
                out[i * d + j] = src[i * d + j] / s;
            }
        }
        let value = Tensor {
            shape: vec![n, d],
            data: out,
        };
        let rg = self.requires(a);
        Ok(self.push(value, rg, Op::NormalizeRows(a)))
    }

    pub fn softmax_rows(&mut self, a: NodeId, keep: Option<&[bool]>) -> Result<NodeId> {
        let (n, d) = self.nodes[a.0].value.dims2()?;
        if let Some(k) = keep {
            if k.len() != d {
                return Err(Error::Shape(format!(
                    "softmax mask len {} vs width {d}",
                    k.len()
                )));
            }
            if !k.iter().any(|&b| b) {
                return Err(Error::InvalidArg("softmax with all columns masked".into()));
            }
        }
        let src = &self.nodes[a.0].value.data;
        if src.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("softmax_rows input".into()));
        }
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = masked_softmax_unchecked(&src[i * d..(i + 1) * d], keep);
            out[i * d..(i + 1) * d].copy_from_slice(&row);
        }
        let value = Tensor {
            shape: vec![n, d],
            data: out,
        };
        let rg = self.requires(a);
        Ok(self.push(value, rg, Op::SoftmaxRows(a, keep.map(|k| k.to_vec()))))
    }

    /// Multi-head causal self-attention. q, k, v are [batch*seq, heads*dh]
    /// with head-major column layout; output has the same shape.
    pub fn causal_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<NodeId> {
        let (n, w) = self.nodes[q.0].value.dims2()?;
        if n != batch * seq || w % heads != 0 {
            return Err(Error::Shape(format!(
                "attention: [{n},{w}] incompatible with batch {batch} seq {seq} heads {heads}"
            )));
        }
        for id in [k, v] {
            if self.nodes[id.0].value.shape != self.nodes[q.0].value.shape {
                return Err(Error::Shape("attention: q/k/v shapes differ".into()));
            }
        }
        let dh = w / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let dq = &self.nodes[q.0].value.data;
        let dk = &self.nodes[k.0].value.data;
        let dv = &self.nodes[v.0].value.data;
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; n * w];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..seq {
                    let qoff = (b * seq + t) * w + h * dh;
                    for (s, sc) in scores.iter_mut().enumerate().take(t + 1) {
                        let koff = (b * seq + s) * w + h * dh;
                        let mut dot = 0.0;
                        for j in 0..dh {
                            dot += dq[qoff + j] * dk[koff + j];
                        }
                        *sc = dot * scale;
                    }
                    let p = masked_softmax_unchecked(&scores[..t + 1], None);
                    let poff = ((b * heads + h) * seq + t) * seq;
                    probs[poff..poff + t + 1].copy_from_slice(&p);
                    for (s, &ps) in p.iter().enumerate() {
                        let voff = (b * seq + s) * w + h * dh;
                        for j in 0..dh {
                            out[qoff + j] += ps * dv[voff + j];
                        }
                    }
                }
            }
        }
        let value = Tensor {
            shape: vec![n, w],
            data: out,
        };
        let rg = self.requires(q) || self.requires(k) || self.requires(v);
        Ok(self.push(
            value,
            rg,
            Op::CausalAttention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
        ))
    }

    /// Mean cross-entropy of row softmax vs integer targets.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (n, d) = self.nodes[logits.0].value.dims2()?;
        if targets.len() != n {
            return Err(Error::Shape(format!(
                "cross_entropy: {} targets for {n} rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= d) {
            return Err(Error::InvalidArg(format!("target {bad} >= {d}")));
        }
        let src = &self.nodes[logits.0].value.data;
        if src.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("cross_entropy logits".into()));
        }
        let mut probs = vec![0.0; n * d];
        let mut loss = 0.0;
        for i in 0..n {
            let row = masked_softmax_unchecked(&src[i * d..(i + 1) * d], None);
            loss -= row[targets[i]].max(1e-300).ln();
            probs[i * d..(i + 1) * d].copy_from_slice(&row);
        }
        loss /= n as f64;
        let rg = self.requires(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropyMean {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Mean over rows of -Σ p ln p. Rows must already be probability vectors.
    pub fn entropy_mean_rows(&mut self, probs: NodeId) -> Result<NodeId> {
        let (n, d) = self.nodes[probs.0].value.dims2()?;
        let src = &self.nodes[probs.0].value.data;
        let mut total = 0.0;
        for i in 0..n {
            total += entropy_unchecked(&src[i * d..(i + 1) * d]);
        }
        let value = Tensor::scalar(total / n as f64);
        let rg = self.requires(probs);
        Ok(self.push(value, rg, Op::EntropyMeanRows(probs)))
    }

    /// sum_e coeff[e] * mean_i p[i,e]
    pub fn col_mean_dot(&mut self, a: NodeId, coeff: &[f64]) -> Result<NodeId> {
        let (n, d) = self.nodes[a.0].value.dims2()?;
        if coeff.len() != d {
            return Err(Error::Shape(format!(
                "col_mean_dot: {} coeffs for width {d}",
                coeff.len()
            )));
        }
        let src = &self.nodes[a.0].value.data;
        let mut total = 0.0;
        for i in 0..n {
            for (e, &c) in coeff.iter().enumerate() {
                total += c * src[i * d + e];
            }
        }
        let value = Tensor::scalar(total / n as f64);
        let rg = self.requires(a);
        Ok(self.push(value, rg, Op::ColMeanDot(a, coeff.to_vec())))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].value.data.iter().sum();
        let rg = self.requires(a);
        self.push(Tensor::scalar(s), rg, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].value.numel();
        let s: f64 = self.nodes[a.0].value.data.iter().sum();
        let rg = self.requires(a);
        self.push(Tensor::scalar(s / n as f64), rg, Op::MeanAll(a))
    }

    /// Reverse sweep from a scalar loss; fills grad buffers of every
    /// `requires_grad` node on the path.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let lnode = &self.nodes[loss.0];
        if !lnode.value.is_scalar() {
            return Err(Error::Shape(format!(
                "backward: loss must be scalar, got shape {:?}",
                lnode.value.shape
            )));
        }
        if !lnode.value.data[0].is_finite() {
            return Err(Error::NonFinite(format!(
                "backward: loss = {}",
                lnode.value.data[0]
            )));
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            self.step_backward(i)?;
        }
        Ok(())
    }

    fn ensure_grad(&mut self, id: NodeId) {
        if self.nodes[id.0].grad.is_none() {
            let n = self.nodes[id.0].value.numel();
            self.nodes[id.0].grad = Some(vec![0.0; n]);
        }
    }

    /// Move grads out of a node temporarily to satisfy the borrow checker.
    fn take_grad(&mut self, i: usize) -> Vec<f64> {
        self.nodes[i].grad.take().unwrap()
    }

    fn step_backward(&mut self, i: usize) -> Result<()> {
        // Nothing to propagate from a leaf.
        if matches!(self.nodes[i].op, Op::Leaf) {
            return Ok(());
        }
        let g = self.take_grad(i);
        // Take the op out so the arms can mutate sibling nodes.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => unreachable!(),
            &Op::Add(a, b) => {
                self.accumulate(a, &g, 1.0);
                self.accumulate(b, &g, 1.0);
            }
            &Op::AddScaled(a, b, c) => {
                self.accumulate(a, &g, 1.0);
                self.accumulate(b, &g, c);
            }
            &Op::Scale(a, c) => {
                self.accumulate(a, &g, c);
            }
            &Op::MulElem(a, b) => {
                let da: Vec<f64> = self.nodes[b.0]
                    .value
                    .data
                    .iter()
                    .zip(&g)
                    .map(|(x, gi)| x * gi)
                    .collect();
                let db: Vec<f64> = self.nodes[a.0]
                    .value
                    .data
                    .iter()
                    .zip(&g)
                    .map(|(x, gi)| x * gi)
                    .collect();
                self.accumulate(a, &da, 1.0);
                self.accumulate(b, &db, 1.0);
            }
            &Op::Matmul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let (_, n) = self.nodes[b.0].value.dims2().unwrap();
                if self.requires(a) {
                    // dA = g . B^T
                    let db = &self.nodes[b.0].value.data;
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        for c in 0..n {
                            let gv = g[r * n + c];
                            if gv != 0.0 {
                                for j in 0..k {
                                    da[r * k + j] += gv * db[j * n + c];
                                }
                            }
                        }
                    }
                    self.accumulate(a, &da, 1.0);
                }
                if self.requires(b) {
                    // dB = A^T . g
                    let dat = &self.nodes[a.0].value.data;
                    let mut dbg = vec![0.0; k * n];
                    for r in 0..m {
                        for j in 0..k {
                            let av = dat[r * k + j];
                            if av != 0.0 {
                                for c in 0..n {
                                    dbg[j * n + c] += av * g[r * n + c];
                                }
                            }
                        }
                    }
                    self.accumulate(b, &dbg, 1.0);
                }
            }
            &Op::Relu(a) => {
                let da: Vec<f64> = self.nodes[a.0]
                    .value
                    .data
                    .iter()
                    .zip(&g)
                    .map(|(&x, gi)| if x > 0.0 { *gi } else { 0.0 })
                    .collect();
                self.accumulate(a, &da, 1.0);
            }
            &Op::LayerNorm(a) => {
                let (n, d) = self.nodes[a.0].value.dims2().unwrap();
                let x = &self.nodes[a.0].value.data;
                let y = &self.nodes[i].value.data;
                let mut dx = vec![0.0; n * d];
                for r in 0..n {
                    let xr = &x[r * d..(r + 1) * d];
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mean = xr.iter().sum::<f64>() / d as f64;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let gmean = gr.iter().sum::<f64>() / d as f64;
                    let gymean = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[r * d + j] = inv * (gr[j] - gmean - yr[j] * gymean);
                    }
                }
                self.accumulate(a, &dx, 1.0);
            }
            &Op::SliceCols(a, start, end) => {
                let (n, d) = self.nodes[a.0].value.dims2().unwrap();
                let w = end - start;
                let mut da = vec![0.0; n * d];
                for r in 0..n {
                    for j in 0..w {
                        da[r * d + start + j] = g[r * w + j];
                    }
                }
                self.accumulate(a, &da, 1.0);
            }
            Op::GatherRows(a, idx) => {
                let a = *a;
                let idx = idx.clone();
                let (v, d) = self.nodes[a.0].value.dims2().unwrap();
                let mut da = vec![0.0; v * d];
                for (r, &src_row) in idx.iter().enumerate() {
                    for j in 0..d {
                        da[src_row * d + j] += g[r * d + j];
                    }
                }
                self.accumulate(a, &da, 1.0);
            }
            Op::ScatterAddRows(src, idx, _n_out) => {
                let src = *src;
                let idx = idx.clone();
                let (n, d) = self.nodes[src.0].value.dims2().unwrap();
                let mut ds = vec![0.0; n * d];
                for (r, &out_row) in idx.iter().enumerate() {
                    ds[r * d..(r + 1) * d].copy_from_slice(&g[out_row * d..(out_row + 1) * d]);
                }
                self.accumulate(src, &ds, 1.0);
            }
            Op::GatherElems(a, pairs) => {
                let a = *a;
                let pairs = pairs.clone();
                let (n, d) = self.nodes[a.0].value.dims2().unwrap();
                let mut da = vec![0.0; n * d];
                for (out_i, &(r, c)) in pairs.iter().enumerate() {
                    da[r * d + c] += g[out_i];
                }
                self.accumulate(a, &da, 1.0);
            }
            &Op::MulRows(a, w) => {
                let (n, d) = self.nodes[a.0].value.dims2().unwrap();
                if self.requires(a) {
                    let dw = &self.nodes[w.0].value.data;
                    let mut da = vec![0.0; n * d];
                    for r in 0..n {
                        for j in 0..d {
                            da[r * d + j] = g[r * d + j] * dw[r];
                        }
                    }
                    self.accumulate(a, &da, 1.0);
                }
                if self.requires(w) {
                    let da = &self.nodes[a.0].value.data;
                    let mut dwv = vec![0.0; n];
                    for r in 0..n {
                        for j in 0..d {
                            dwv[r] += g[r * d + j] * da[r * d + j];
                        }
                    }
                    self.accumulate(w, &dwv, 1.0);
                }
            }
            &Op::NormalizeRows(a) => {
                let (n, d) = self.nodes[a.0].value.dims2().unwrap();
                let x = &self.nodes[a.0].value.data;
                let y = &self.nodes[i].value.data;
                let mut dx = vec![0.0; n * d];
                for r in 0..n {
                    let s: f64 = x[r * d..(r + 1) * d].iter().sum();
                    let gy: f64 = (0..d).map(|j| g[r * d + j] * y[r * d + j]).sum();
                    for j in 0..d {
                        dx[r * d + j] = (g[r * d + j] - gy) / s;
                    }
                }
                self.accumulate(a, &dx, 1.0);
            }
            Op::SoftmaxRows(a, keep) => {
                let a = *a;
                let keep = keep.clone();
                let (n, d) = self.nodes[a.0].value.dims2().unwrap();
                let p = self.nodes[i].value.data.clone();
                let mut dx = vec![0.0; n * d];
                for r in 0..n {
                    let pr = &p[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        let kept = keep.as_ref().is_none_or(|k| k[j]);
                        if kept {
                            dx[r * d + j] = pr[j] * (gr[j] - dot);
                        }
                    }
                }
                self.accumulate(a, &dx, 1.0);
            }
            Op::CausalAttention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (q, k, v) = (*q, *k, *v);
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let probs = probs.clone();
                let w = self.nodes[q.0].value.shape[1];
                let dh = w / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let dq_v = &self.nodes[q.0].value.data;
                let dk_v = &self.nodes[k.0].value.data;
                let dv_v = &self.nodes[v.0].value.data;
                let n = batch * seq;
                let mut gq = vec![0.0; n * w];
                let mut gk = vec![0.0; n * w];
                let mut gv = vec![0.0; n * w];
                let mut dp = vec![0.0; seq];
                let mut ds = vec![0.0; seq];
                for b in 0..batch {
                    for h in 0..heads {
                        for t in 0..seq {
                            let qoff = (b * seq + t) * w + h * dh;
                            let poff = ((b * heads + h) * seq + t) * seq;
                            let p = &probs[poff..poff + t + 1];
                            // dp_s = dout . v_s ; dv_s += p_s * dout
                            for (s, &ps) in p.iter().enumerate() {
                                let voff = (b * seq + s) * w + h * dh;
                                let mut dot = 0.0;
                                for j in 0..dh {
                                    dot += g[qoff + j] * dv_v[voff + j];
                                    gv[voff + j] += ps * g[qoff + j];
                                }
                                dp[s] = dot;
                            }
                            // softmax backward
                            let pdot: f64 = p.iter().zip(&dp[..t + 1]).map(|(a, b)| a * b).sum();
                            for s in 0..=t {
                                ds[s] = p[s] * (dp[s] - pdot) * scale;
                            }
                            for (s, &dss) in ds.iter().enumerate().take(t + 1) {
                                let koff = (b * seq + s) * w + h * dh;
                                for j in 0..dh {
                                    gq[qoff + j] += dss * dk_v[koff + j];
                                    gk[koff + j] += dss * dq_v[qoff + j];
                                }
                            }
                        }
                    }
                }
                self.accumulate(q, &gq, 1.0);
                self.accumulate(k, &gk, 1.0);
                self.accumulate(v, &gv, 1.0);
            }
            Op::CrossEntropyMean {
                logits,
                targets,
                probs,
            } => {
                let logits = *logits;
                let targets = targets.clone();
                let probs = probs.clone();
                let (n, d) = self.nodes[logits.0].value.dims2().unwrap();
                let up = g[0] / n as f64;
                let mut dl = probs;
                for r in 0..n {
                    dl[r * d + targets[r]] -= 1.0;
                }
                for x in dl.iter_mut() {
                    *x *= up;
                }
                self.accumulate(logits, &dl, 1.0);
            }
            &Op::EntropyMeanRows(a) => {
                let (n, d) = self.nodes[a.0].value.dims2().unwrap();
                let p = &self.nodes[a.0].value.data;
                let up = g[0] / n as f64;
                let mut dp = vec![0.0; n * d];
                for (j, &pv) in p.iter().enumerate() {
                    if pv > 0.0 {
                        dp[j] = -(pv.ln() + 1.0) * up;
                    }
                }
                self.accumulate(a, &dp, 1.0);
            }
            Op::ColMeanDot(a, coeff) => {
                let a = *a;
                let coeff = coeff.clone();
                let (n, d) = self.nodes[a.0].value.dims2().unwrap();
                let up = g[0] / n as f64;
                let mut da = vec![0.0; n * d];
                for r in 0..n {
                    for (e, &c) in coeff.iter().enumerate() {
                        da[r * d + e] = c * up;
                    }
                }
                self.accumulate(a, &da, 1.0);
            }
            &Op::SumAll(a) => {
                let n = self.nodes[a.0].value.numel();
                let da = vec![g[0]; n];
                self.accumulate(a, &da, 1.0);
            }
            &Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.numel();
                let da = vec![g[0] / n as f64; n];
                self.accumulate(a, &da, 1.0);
            }
        }
        self.nodes[i].op = op;
        self.nodes[i].grad = Some(g);
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: &[f64], scale: f64) {
        if !self.requires(id) {
            return;
        }
        self.ensure_grad(id);
        let g = self.nodes[id.0].grad.as_mut().unwrap();
        for (gi, &d) in g.iter_mut().zip(delta) {
            *gi += scale * d;
        }
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for r in 0..m {
        for j in 0..k {
            let av = a[r * k + j];
            if av != 0.0 {
                let brow = &b[j * n..(j + 1) * n];
                let orow = &mut out[r * n..(r + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_grad_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(
            Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            true,
        );
        let loss = t.sum_all(x);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn quadratic_grad() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap(), true);
        let sq = t.mul_elem(x, x).unwrap();
        let loss = t.sum_all(sq);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_nonscalar() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap(), true);
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn backward_rejects_nonfinite_loss() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(f64::NAN), true);
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn matmul_value() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.constant(Tensor::from_vec(&[2, 1], vec![1.0, 1.0]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data, vec![3.0, 7.0]);
    }

    #[test]
    fn backward_deterministic() {
        let run = || {
            let mut t = Tape::new();
            let x = t.leaf(
                Tensor::from_vec(&[2, 3], vec![0.3, -1.2, 0.7, 2.2, -0.4, 0.9]).unwrap(),
                true,
            );
            let w = t.leaf(
                Tensor::from_vec(&[3, 2], vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6]).unwrap(),
                true,
            );
            let y = t.matmul(x, w).unwrap();
            let sm = t.softmax_rows(y, None).unwrap();
            let loss = t.entropy_mean_rows(sm).unwrap();
            t.backward(loss).unwrap();
            (t.grad(x).unwrap().to_vec(), t.grad(w).unwrap().to_vec())
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        // bitwise identical
        assert!(a1.iter().zip(&a2).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(b1.iter().zip(&b2).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
