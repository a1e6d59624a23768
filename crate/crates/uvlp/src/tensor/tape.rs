//! The operation tape: forward recording and reverse-mode gradient flow.
//!
//! Every op pushes one node holding the result value, the op kind, and the
//! input node ids. `backward` seeds the loss node with 1.0 and sweeps the
//! nodes in reverse, so each call adds one full gradient contribution into
//! `Node::grad` (repeated calls accumulate). All loops run in a fixed order,
//! which makes both forward values and gradients bitwise reproducible.

use std::sync::Arc;

use super::{dims2, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Recorded operation kinds. Saved payloads hold whatever backward needs
/// beyond the input and output values.
enum Op {
    Leaf,
    /// C = A @ B
    MatMul { a: NodeId, b: NodeId },
    /// Elementwise sum of two same-shape tensors.
    Add { a: NodeId, b: NodeId },
    /// x (r x c) plus a length-r bias added to every column.
    AddBias { x: NodeId, bias: NodeId },
    /// Elementwise (Hadamard) product of two same-shape tensors.
    Mul { a: NodeId, b: NodeId },
    /// Multiplication by a constant.
    Scale { x: NodeId, c: f64 },
    /// Tanh-approximation GELU, applied elementwise.
    Gelu { x: NodeId },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    /// Per-column normalization with learned per-row gain and bias.
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        /// Saved (x-hat, inv_std) from the forward pass.
        saved: (Vec<f64>, Vec<f64>),
    },
    /// Row-wise softmax restricted to allowed columns; disallowed entries are
    /// exactly 0.0 and excluded from the normalization.
    MaskedSoftmax { x: NodeId, allow: Arc<Vec<bool>> },
    Transpose { x: NodeId },
    /// Rows [start, start+len) of x.
    SliceRows { x: NodeId, start: usize },
    /// Vertical stack: parts share a column count.
    ConcatRows { parts: Vec<NodeId> },
    /// Horizontal stack: parts share a row count.
    ConcatCols { parts: Vec<NodeId> },
    /// Gather of columns by index (duplicates allowed).
    SelectCols { x: NodeId, idx: Vec<usize> },
    /// Gather of rows by index (duplicates allowed); the embedding lookup.
    SelectRows { x: NodeId, idx: Vec<usize> },
    /// Sum of all entries, yielding a scalar.
    Sum { x: NodeId },
    /// Sum over columns of per-column softmax cross-entropy. `logits` is
    /// classes x positions; `targets[j]` is the class index for column j.
    /// Saves the softmax probabilities for backward.
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    /// Sum over all entries of binary cross-entropy with logits, computed in
    /// the overflow-safe softplus form.
    BceWithLogits { logits: NodeId, targets: Vec<f64> },
    /// Inverted dropout: kept entries are scaled by 1/keep_prob.
    Dropout {
        x: NodeId,
        keep: Vec<bool>,
        inv_keep: f64,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Records one forward pass; see the module docs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
            grad: None,
        });
        id
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    /// Shape of a node's value.
    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.node(id).shape
    }

    /// Value computed for a node during the forward pass.
    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.node(id).data
    }

    /// Gradient accumulated for a node by `backward`, if the node requires
    /// grad and was reached.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.node(id).grad.as_deref()
    }

    /// Registers a tensor's current value as a leaf node.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Registers a leaf and records the node id on the tensor itself so
    /// [`Tensor::accumulate_grad_from`] can find its gradient later.
    pub fn watch(&mut self, t: &mut Tensor) -> NodeId {
        let id = self.leaf(t);
        t.set_node_id(id);
        id
    }

    /// A constant leaf that never receives gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<NodeId, TensorError> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel == 0 || numel != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                data_len: data.len(),
            });
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    fn rg2(&self, a: NodeId, b: NodeId) -> bool {
        self.node(a).requires_grad || self.node(b).requires_grad
    }

    /// Matrix product of two rank-2 (or column-vector) nodes.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, ka) = dims2(&self.node(a).shape);
        let (kb, n) = dims2(&self.node(b).shape);
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.node(a).shape.clone(),
                rhs: self.node(b).shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        mm_nn(&self.node(a).data, &self.node(b).data, m, ka, n, &mut out);
        let rg = self.rg2(a, b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.node(a).shape != self.node(b).shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.node(a).shape.clone(),
                rhs: self.node(b).shape.clone(),
            });
        }
        let data: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg2(a, b);
        let shape = self.node(a).shape.clone();
        Ok(self.push(shape, data, Op::Add { a, b }, rg))
    }

    /// Adds a length-r bias vector to every column of an r x c node.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (r, c) = dims2(&self.node(x).shape);
        let (br, bc) = dims2(&self.node(bias).shape);
        if br != r || bc != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.node(x).shape.clone(),
                rhs: self.node(bias).shape.clone(),
            });
        }
        let mut data = self.node(x).data.clone();
        for i in 0..r {
            let bi = self.node(bias).data[i];
            for v in &mut data[i * c..(i + 1) * c] {
                *v += bi;
            }
        }
        let rg = self.rg2(x, bias);
        let shape = self.node(x).shape.clone();
        Ok(self.push(shape, data, Op::AddBias { x, bias }, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.node(a).shape != self.node(b).shape {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: self.node(a).shape.clone(),
                rhs: self.node(b).shape.clone(),
            });
        }
        let data: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg2(a, b);
        let shape = self.node(a).shape.clone();
        Ok(self.push(shape, data, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let data: Vec<f64> = self.node(x).data.iter().map(|v| v * c).collect();
        let rg = self.node(x).requires_grad;
        let shape = self.node(x).shape.clone();
        self.push(shape, data, Op::Scale { x, c }, rg)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f64> = self.node(x).data.iter().map(|&v| gelu(v)).collect();
        let rg = self.node(x).requires_grad;
        let shape = self.node(x).shape.clone();
        self.push(shape, data, Op::Gelu { x }, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f64> = self.node(x).data.iter().map(|&v| v.max(0.0)).collect();
        let rg = self.node(x).requires_grad;
        let shape = self.node(x).shape.clone();
        self.push(shape, data, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f64> = self.node(x).data.iter().map(|&v| sigmoid(v)).collect();
        let rg = self.node(x).requires_grad;
        let shape = self.node(x).shape.clone();
        self.push(shape, data, Op::Sigmoid { x }, rg)
    }

    /// Normalizes each column of `x` (r x c, r >= 2) to zero mean and unit
    /// variance (biased, divisor r), then applies per-row `gain` and `bias`:
    /// `y[i][j] = gain[i] * xhat[i][j] + bias[i]`. `eps` sits inside the
    /// square root.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId, TensorError> {
        let (r, c) = dims2(&self.node(x).shape);
        if r < 2 {
            return Err(TensorError::DegenerateLayerNorm { rows: r });
        }
        let (gr, gc) = dims2(&self.node(gain).shape);
        let (br, bc) = dims2(&self.node(bias).shape);
        if gr != r || gc != 1 || br != r || bc != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.node(x).shape.clone(),
                rhs: self.node(gain).shape.clone(),
            });
        }
        let xd = &self.node(x).data;
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; c];
        for j in 0..c {
            let mut mean = 0.0;
            for i in 0..r {
                mean += xd[i * c + j];
            }
            mean /= r as f64;
            let mut var = 0.0;
            for i in 0..r {
                let d = xd[i * c + j] - mean;
                var += d * d;
            }
            var /= r as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[j] = is;
            for i in 0..r {
                xhat[i * c + j] = (xd[i * c + j] - mean) * is;
            }
        }
        let gd = &self.node(gain).data;
        let bd = &self.node(bias).data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = gd[i] * xhat[i * c + j] + bd[i];
            }
        }
        let rg = self.node(x).requires_grad || self.rg2(gain, bias);
        let shape = self.node(x).shape.clone();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                saved: (xhat, inv_std),
            },
            rg,
        ))
    }

    /// Row-wise softmax over allowed columns only. `allow` is row-major
    /// r x c; disallowed entries of the result are exactly 0.0 and the
    /// allowed entries of each row sum to 1. Rows with no allowed column are
    /// rejected.
    pub fn masked_softmax(
        &mut self,
        x: NodeId,
        allow: Arc<Vec<bool>>,
    ) -> Result<NodeId, TensorError> {
        let (r, c) = dims2(&self.node(x).shape);
        if allow.len() != r * c {
            return Err(TensorError::MaskShape {
                rows: r,
                cols: c,
                mask_len: allow.len(),
            });
        }
        let xd = &self.node(x).data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let arow = &allow[i * c..(i + 1) * c];
            let mut max = f64::NEG_INFINITY;
            for j in 0..c {
                if arow[j] && row[j] > max {
                    max = row[j];
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(TensorError::EmptyMaskRow { row: i });
            }
            let mut denom = 0.0;
            for j in 0..c {
                if arow[j] {
                    denom += (row[j] - max).exp();
                }
            }
            let orow = &mut out[i * c..(i + 1) * c];
            for j in 0..c {
                if arow[j] {
                    orow[j] = (row[j] - max).exp() / denom;
                }
            }
        }
        let rg = self.node(x).requires_grad;
        let shape = self.node(x).shape.clone();
        Ok(self.push(shape, out, Op::MaskedSoftmax { x, allow }, rg))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let (r, c) = dims2(&self.node(x).shape);
        let xd = &self.node(x).data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        let rg = self.node(x).requires_grad;
        self.push(vec![c, r], out, Op::Transpose { x }, rg)
    }

    /// Rows [start, start+len) of x.
    pub fn slice_rows(
        &mut self,
        x: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, TensorError> {
        let (r, c) = dims2(&self.node(x).shape);
        if start + len > r || len == 0 {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                bound: r,
            });
        }
        let data = self.node(x).data[start * c..(start + len) * c].to_vec();
        let rg = self.node(x).requires_grad;
        Ok(self.push(vec![len, c], data, Op::SliceRows { x, start }, rg))
    }

    /// Vertical stack of nodes sharing a column count.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let (_, c0) = dims2(&self.node(parts[0]).shape);
        let mut rows = 0;
        let mut data = Vec::new();
        let mut rg = false;
        for &p in parts {
            let (r, c) = dims2(&self.node(p).shape);
            if c != c0 {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.node(parts[0]).shape.clone(),
                    rhs: self.node(p).shape.clone(),
                });
            }
            rows += r;
            data.extend_from_slice(&self.node(p).data);
            rg |= self.node(p).requires_grad;
        }
        Ok(self.push(
            vec![rows, c0],
            data,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Horizontal stack of nodes sharing a row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let (r0, _) = dims2(&self.node(parts[0]).shape);
        let mut cols = 0;
        let mut widths = Vec::with_capacity(parts.len());
        let mut rg = false;
        for &p in parts {
            let (r, c) = dims2(&self.node(p).shape);
            if r != r0 {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.node(parts[0]).shape.clone(),
                    rhs: self.node(p).shape.clone(),
                });
            }
            cols += c;
            widths.push(c);
            rg |= self.node(p).requires_grad;
        }
        let mut data = vec![0.0; r0 * cols];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = &self.node(p).data;
            for i in 0..r0 {
                data[i * cols + off..i * cols + off + w].copy_from_slice(&pd[i * w..(i + 1) * w]);
            }
            off += w;
        }
        Ok(self.push(
            vec![r0, cols],
            data,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Gathers columns of x by index; duplicate indices are allowed and their
    /// gradients accumulate.
    pub fn select_cols(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId, TensorError> {
        let (r, c) = dims2(&self.node(x).shape);
        for &j in idx {
            if j >= c {
                return Err(TensorError::IndexOutOfRange {
                    op: "select_cols",
                    index: j,
                    bound: c,
                });
            }
        }
        let xd = &self.node(x).data;
        let k = idx.len();
        let mut data = vec![0.0; r * k];
        for i in 0..r {
            for (jj, &j) in idx.iter().enumerate() {
                data[i * k + jj] = xd[i * c + j];
            }
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(
            vec![r, k],
            data,
            Op::SelectCols {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Gathers rows of x by index; the table-lookup primitive.
    pub fn select_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId, TensorError> {
        let (r, c) = dims2(&self.node(x).shape);
        for &i in idx {
            if i >= r {
                return Err(TensorError::IndexOutOfRange {
                    op: "select_rows",
                    index: i,
                    bound: r,
                });
            }
        }
        let xd = &self.node(x).data;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&xd[i * c..(i + 1) * c]);
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(
            vec![idx.len(), c],
            data,
            Op::SelectRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Sum of every entry, as a scalar node of shape [1].
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.node(x).data.iter().sum();
        let rg = self.node(x).requires_grad;
        self.push(vec![1], vec![s], Op::Sum { x }, rg)
    }

    /// Sum over columns of softmax cross-entropy. `logits` is
    /// classes x positions; `targets[j]` names the true class of column j.
    /// Callers divide by the position count themselves when they want a mean.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
    ) -> Result<NodeId, TensorError> {
        let (v, p) = dims2(&self.node(logits).shape);
        if targets.len() != p {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: self.node(logits).shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        for &t in targets {
            if t >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    bound: v,
                });
            }
        }
        let ld = &self.node(logits).data;
        let mut probs = vec![0.0; v * p];
        let mut total = 0.0;
        for j in 0..p {
            let mut max = f64::NEG_INFINITY;
            for i in 0..v {
                max = max.max(ld[i * p + j]);
            }
            let mut denom = 0.0;
            for i in 0..v {
                denom += (ld[i * p + j] - max).exp();
            }
            let log_denom = denom.ln() + max;
            for i in 0..v {
                probs[i * p + j] = (ld[i * p + j] - log_denom).exp();
            }
            total += log_denom - ld[targets[j] * p + j];
        }
        let rg = self.node(logits).requires_grad;
        Ok(self.push(
            vec![1],
            vec![total],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Sum over all entries of binary cross-entropy against soft targets,
    /// computed from logits in the softplus form so saturated scores cannot
    /// produce log(0).
    pub fn bce_with_logits(
        &mut self,
        logits: NodeId,
        targets: &[f64],
    ) -> Result<NodeId, TensorError> {
        let n = self.node(logits).data.len();
        if targets.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                lhs: self.node(logits).shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        let ld = &self.node(logits).data;
        let mut total = 0.0;
        for (&z, &t) in ld.iter().zip(targets) {
            total += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        }
        let rg = self.node(logits).requires_grad;
        Ok(self.push(
            vec![1],
            vec![total],
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Inverted dropout with a caller-supplied keep mask (drawn from the run
    /// RNG so training stays reproducible). Kept entries are scaled by
    /// `1 / keep_prob`.
    pub fn dropout(
        &mut self,
        x: NodeId,
        keep: Vec<bool>,
        keep_prob: f64,
    ) -> Result<NodeId, TensorError> {
        let n = self.node(x).data.len();
        if keep.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "dropout",
                lhs: self.node(x).shape.clone(),
                rhs: vec![keep.len()],
            });
        }
        let inv_keep = 1.0 / keep_prob;
        let data: Vec<f64> = self
            .node(x)
            .data
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v * inv_keep } else { 0.0 })
            .collect();
        let rg = self.node(x).requires_grad;
        let shape = self.node(x).shape.clone();
        Ok(self.push(shape, data, Op::Dropout { x, keep, inv_keep }, rg))
    }

    /// Reverse sweep from a scalar loss node. Each call accumulates one unit
    /// of loss gradient into every reachable `requires_grad` node.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if self.node(loss).data.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.node(loss).shape.clone(),
            });
        }
        let n = self.nodes.len();
        let mut local: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
        local.resize_with(n, || None);
        local[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                local[i] = None;
                continue;
            }
            let Some(g) = local[i].take() else { continue };
            // Record this pass's contribution on the node itself.
            {
                let node = &mut self.nodes[i];
                let grad = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
                for (dst, src) in grad.iter_mut().zip(&g) {
                    *dst += src;
                }
            }
            self.propagate(i, &g, &mut local);
        }
        Ok(())
    }

    /// Distributes the local gradient `g` of node `i` to its inputs.
    fn propagate(&self, i: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let add_to = |local: &mut [Option<Vec<f64>>], id: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            let buf = local[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].data.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = dims2(&self.nodes[a.0].shape);
                let (_, nn) = dims2(&self.nodes[b.0].shape);
                add_to(local, *a, &mut |buf| {
                    mm_nt(g, &self.nodes[b.0].data, m, nn, k, buf);
                });
                add_to(local, *b, &mut |buf| {
                    mm_tn(&self.nodes[a.0].data, g, m, k, nn, buf);
                });
            }
            Op::Add { a, b } => {
                add_to(local, *a, &mut |buf| {
                    for (d, s) in buf.iter_mut().zip(g) {
                        *d += s;
                    }
                });
                add_to(local, *b, &mut |buf| {
                    for (d, s) in buf.iter_mut().zip(g) {
                        *d += s;
                    }
                });
            }
            Op::AddBias { x, bias } => {
                let (r, c) = dims2(&node.shape);
                add_to(local, *x, &mut |buf| {
                    for (d, s) in buf.iter_mut().zip(g) {
                        *d += s;
                    }
                });
                add_to(local, *bias, &mut |buf| {
                    for i in 0..r {
                        let mut s = 0.0;
                        for j in 0..c {
                            s += g[i * c + j];
                        }
                        buf[i] += s;
                    }
                });
            }
            Op::Mul { a, b } => {
                add_to(local, *a, &mut |buf| {
                    for ((d, s), o) in buf.iter_mut().zip(g).zip(&self.nodes[b.0].data) {
                        *d += s * o;
                    }
                });
                add_to(local, *b, &mut |buf| {
                    for ((d, s), o) in buf.iter_mut().zip(g).zip(&self.nodes[a.0].data) {
                        *d += s * o;
                    }
                });
            }
            Op::Scale { x, c } => {
                add_to(local, *x, &mut |buf| {
                    for (d, s) in buf.iter_mut().zip(g) {
                        *d += s * c;
                    }
                });
            }
            Op::Gelu { x } => {
                add_to(local, *x, &mut |buf| {
                    for ((d, s), &v) in buf.iter_mut().zip(g).zip(&self.nodes[x.0].data) {
                        *d += s * gelu_grad(v);
                    }
                });
            }
            Op::Relu { x } => {
                add_to(local, *x, &mut |buf| {
                    for ((d, s), &v) in buf.iter_mut().zip(g).zip(&self.nodes[x.0].data) {
                        if v > 0.0 {
                            *d += s;
                        }
                    }
                });
            }
            Op::Sigmoid { x } => {
                // The forward output is this node's own value.
                add_to(local, *x, &mut |buf| {
                    for ((d, s), &y) in buf.iter_mut().zip(g).zip(&node.data) {
                        *d += s * y * (1.0 - y);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                saved: (xhat, inv_std),
            } => {
                let (r, c) = dims2(&node.shape);
                let gd = &self.nodes[gain.0].data;
                add_to(local, *x, &mut |buf| {
                    for j in 0..c {
                        // h = g .* gain for this column; the standard
                        // layer-norm backward uses its mean and its
                        // xhat-weighted mean.
                        let mut mean_h = 0.0;
                        let mut mean_hx = 0.0;
                        for i in 0..r {
                            let h = g[i * c + j] * gd[i];
                            mean_h += h;
                            mean_hx += h * xhat[i * c + j];
                        }
                        mean_h /= r as f64;
                        mean_hx /= r as f64;
                        for i in 0..r {
                            let h = g[i * c + j] * gd[i];
                            buf[i * c + j] +=
                                (h - mean_h - xhat[i * c + j] * mean_hx) * inv_std[j];
                        }
                    }
                });
                add_to(local, *gain, &mut |buf| {
                    for i in 0..r {
                        let mut s = 0.0;
                        for j in 0..c {
                            s += g[i * c + j] * xhat[i * c + j];
                        }
                        buf[i] += s;
                    }
                });
                add_to(local, *bias, &mut |buf| {
                    for i in 0..r {
                        let mut s = 0.0;
                        for j in 0..c {
                            s += g[i * c + j];
                        }
                        buf[i] += s;
                    }
                });
            }
            Op::MaskedSoftmax { x, allow } => {
                let (r, c) = dims2(&node.shape);
                let p = &node.data;
                add_to(local, *x, &mut |buf| {
                    for i in 0..r {
                        let mut dot = 0.0;
                        for j in 0..c {
                            if allow[i * c + j] {
                                dot += g[i * c + j] * p[i * c + j];
                            }
                        }
                        for j in 0..c {
                            if allow[i * c + j] {
                                buf[i * c + j] += p[i * c + j] * (g[i * c + j] - dot);
                            }
                        }
                    }
                });
            }
            Op::Transpose { x } => {
                let (r, c) = dims2(&node.shape); // shape of the transposed value
                add_to(local, *x, &mut |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let (len, c) = dims2(&node.shape);
                add_to(local, *x, &mut |buf| {
                    for (d, s) in buf[start * c..(start + len) * c].iter_mut().zip(g) {
                        *d += s;
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let (_, c) = dims2(&node.shape);
                let mut row_off = 0;
                for &p in parts {
                    let (pr, _) = dims2(&self.nodes[p.0].shape);
                    let lo = row_off * c;
                    let hi = (row_off + pr) * c;
                    add_to(local, p, &mut |buf| {
                        for (d, s) in buf.iter_mut().zip(&g[lo..hi]) {
                            *d += s;
                        }
                    });
                    row_off += pr;
                }
            }
            Op::ConcatCols { parts } => {
                let (r, cols) = dims2(&node.shape);
                let mut off = 0;
                for &p in parts {
                    let (_, w) = dims2(&self.nodes[p.0].shape);
                    let start = off;
                    add_to(local, p, &mut |buf| {
                        for i in 0..r {
                            for j in 0..w {
                                buf[i * w + j] += g[i * cols + start + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::SelectCols { x, idx } => {
                let (r, k) = dims2(&node.shape);
                let (_, c) = dims2(&self.nodes[x.0].shape);
                add_to(local, *x, &mut |buf| {
                    for i in 0..r {
                        for (jj, &j) in idx.iter().enumerate() {
                            buf[i * c + j] += g[i * k + jj];
                        }
                    }
                });
            }
            Op::SelectRows { x, idx } => {
                let (_, c) = dims2(&node.shape);
                add_to(local, *x, &mut |buf| {
                    for (ii, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            buf[i * c + j] += g[ii * c + j];
                        }
                    }
                });
            }
            Op::Sum { x } => {
                add_to(local, *x, &mut |buf| {
                    for d in buf.iter_mut() {
                        *d += g[0];
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (v, p) = dims2(&self.nodes[logits.0].shape);
                add_to(local, *logits, &mut |buf| {
                    for j in 0..p {
                        for i in 0..v {
                            let onehot = if targets[j] == i { 1.0 } else { 0.0 };
                            buf[i * p + j] += g[0] * (probs[i * p + j] - onehot);
                        }
                    }
                });
            }
            Op::BceWithLogits { logits, targets } => {
                add_to(local, *logits, &mut |buf| {
                    for ((d, &z), &t) in buf
                        .iter_mut()
                        .zip(&self.nodes[logits.0].data)
                        .zip(targets)
                    {
                        *d += g[0] * (sigmoid(z) - t);
                    }
                });
            }
            Op::Dropout { x, keep, inv_keep } => {
                add_to(local, *x, &mut |buf| {
                    for ((d, s), &k) in buf.iter_mut().zip(g).zip(keep) {
                        if k {
                            *d += s * inv_keep;
                        }
                    }
                });
            }
        }
    }
}

/// Logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximation GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

/// Derivative of the tanh-approximation GELU.
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// C(m x n) = A(m x k) B(k x n). Overwrites `out`; the transposed variants
/// below accumulate instead, because backward sums contributions.
pub(crate) fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    out.fill(0.0);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// C(m x k) = A(m x n) B(k x n)^T — i.e. C = A B^T.
pub(crate) fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut s = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            orow[kk] += s;
        }
    }
}

/// C(k x n) = A(m x k)^T B(m x n) — i.e. C = A^T B.
pub(crate) fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::tensor::{
        finite_diff_check, Binding, NodeId, ParamStore, Tape, Tensor, TensorError,
    };

    use super::{gelu, gelu_grad, sigmoid};

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    fn tensor(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_known_product() {
        let mut tape = Tape::new();
        let a = tape
            .constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0])
            .unwrap();
        let b = tape
            .constant(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0])
            .unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        match &err {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                assert_eq!(*op, "matmul");
                assert_eq!(lhs, &vec![2, 3]);
                assert_eq!(rhs, &vec![2, 2]);
            }
            other => panic!("unexpected error {other:?}"),
        }
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn layer_norm_standardizes_columns() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2], vec![1.0, 3.0]).unwrap();
        let gain = tape.constant(vec![2], vec![1.0, 1.0]).unwrap();
        let bias = tape.constant(vec![2], vec![0.0, 0.0]).unwrap();
        let y = tape.layer_norm(x, gain, bias, 0.0).unwrap();
        close(tape.value(y)[0], -1.0, 1e-12);
        close(tape.value(y)[1], 1.0, 1e-12);

        // Affine parameters are applied after standardization.
        let gain2 = tape.constant(vec![2], vec![2.0, 2.0]).unwrap();
        let bias2 = tape.constant(vec![2], vec![1.0, 1.0]).unwrap();
        let y2 = tape.layer_norm(x, gain2, bias2, 0.0).unwrap();
        close(tape.value(y2)[0], -1.0, 1e-12);
        close(tape.value(y2)[1], 3.0, 1e-12);
    }

    #[test]
    fn layer_norm_rejects_single_row() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let gain = tape.constant(vec![1], vec![1.0]).unwrap();
        let bias = tape.constant(vec![1], vec![0.0]).unwrap();
        assert!(matches!(
            tape.layer_norm(x, gain, bias, 1e-12),
            Err(TensorError::DegenerateLayerNorm { rows: 1 })
        ));
    }

    #[test]
    fn masked_softmax_excludes_disallowed_columns_exactly() {
        let mut tape = Tape::new();
        let x = tape
            .constant(vec![1, 3], vec![2.0_f64.ln(), 0.0, 0.0])
            .unwrap();
        let allow = Arc::new(vec![true, true, false]);
        let p = tape.masked_softmax(x, allow).unwrap();
        let v = tape.value(p);
        close(v[0], 2.0 / 3.0, 1e-12);
        close(v[1], 1.0 / 3.0, 1e-12);
        // Disallowed entries are exactly zero, not merely small.
        assert_eq!(v[2].to_bits(), 0.0_f64.to_bits());
        close(v.iter().sum::<f64>(), 1.0, 1e-12);
    }

    #[test]
    fn masked_softmax_rejects_empty_row() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        let allow = Arc::new(vec![true, false, false, false]);
        assert!(matches!(
            tape.masked_softmax(x, allow),
            Err(TensorError::EmptyMaskRow { row: 1 })
        ));
    }

    #[test]
    fn gelu_matches_tanh_form() {
        close(gelu(0.0), 0.0, 1e-15);
        close(gelu(1.0), 0.8412, 1e-3);
        // Exact tanh-form recomputation.
        let x = 1.0_f64;
        let direct =
            0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
        close(gelu(1.0), direct, 1e-15);
        close(gelu(10.0), 10.0, 1e-8);
        close(gelu(-10.0), 0.0, 1e-8);
        // Derivative against central differences.
        for &x in &[-2.3, -0.7, 0.1, 0.9, 2.8] {
            let h = 1e-6;
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            close(gelu_grad(x), num, 1e-8);
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        close(sigmoid(0.0), 0.5, 1e-15);
        assert!(sigmoid(800.0) <= 1.0 && sigmoid(800.0) > 0.999);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(-800.0) < 1e-300);
        assert!(sigmoid(-800.0).is_finite() && sigmoid(800.0).is_finite());
    }

    #[test]
    fn cross_entropy_matches_hand_computed_log_softmax() {
        // Uniform logits over a 5-word vocabulary: CE = ln 5.
        let mut tape = Tape::new();
        let logits = tape.constant(vec![5, 1], vec![0.0; 5]).unwrap();
        let ce = tape.cross_entropy(logits, &[2]).unwrap();
        close(tape.value(ce)[0], 5.0_f64.ln(), 1e-12);

        // Random logits, one masked position, straight-line log-softmax.
        let vals = [0.3, -1.2, 2.0, 0.0, -0.5];
        let mut tape = Tape::new();
        let logits = tape.constant(vec![5, 1], vals.to_vec()).unwrap();
        let ce = tape.cross_entropy(logits, &[4]).unwrap();
        let denom: f64 = vals.iter().map(|v| v.exp()).sum();
        let expected = denom.ln() - vals[4];
        close(tape.value(ce)[0], expected, 1e-12);
    }

    #[test]
    fn bce_with_logits_matches_closed_form() {
        let mut tape = Tape::new();
        let z = tape.constant(vec![1], vec![0.0]).unwrap();
        let loss = tape.bce_with_logits(z, &[0.5]).unwrap();
        close(tape.value(loss)[0], 2.0_f64.ln(), 1e-12);

        // Saturated logits stay finite in both directions.
        let mut tape = Tape::new();
        let z = tape.constant(vec![2], vec![500.0, -500.0]).unwrap();
        let loss = tape.bce_with_logits(z, &[0.0, 1.0]).unwrap();
        assert!(tape.value(loss)[0].is_finite());
        close(tape.value(loss)[0], 1000.0, 1e-9);
    }

    #[test]
    fn backward_accumulates_through_shared_inputs() {
        // loss = sum((x + y) .* x): dx = 2x + y, dy = x.
        let x = tensor(&[3], &[1.0, -2.0, 0.5]).with_grad();
        let y = tensor(&[3], &[0.3, 0.7, -1.1]).with_grad();
        let mut tape = Tape::new();
        let xi = tape.leaf(&x);
        let yi = tape.leaf(&y);
        let s = tape.add(xi, yi).unwrap();
        let prod = tape.mul(s, xi).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        let gx = tape.grad(xi).unwrap();
        let gy = tape.grad(yi).unwrap();
        for i in 0..3 {
            close(gx[i], 2.0 * x.data()[i] + y.data()[i], 1e-12);
            close(gy[i], x.data()[i], 1e-12);
        }
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let x = tensor(&[2], &[1.0, 2.0]).with_grad();
        let mut tape = Tape::new();
        let xi = tape.leaf(&x);
        assert!(matches!(
            tape.backward(xi),
            Err(TensorError::NotScalar { .. })
        ));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = tensor(&[2], &[3.0, -1.0]).with_grad();
        let mut tape = Tape::new();
        let xi = tape.leaf(&x);
        let sq = tape.mul(xi, xi).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        let once: Vec<f64> = tape.grad(xi).unwrap().to_vec();
        tape.backward(loss).unwrap();
        let twice = tape.grad(xi).unwrap();
        for i in 0..2 {
            close(twice[i], 2.0 * once[i], 1e-15);
        }
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let run = || -> Vec<u64> {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut store = ParamStore::new();
            store.add_normal("a", vec![4, 3], 1.0, &mut rng);
            store.add_normal("b", vec![3, 5], 1.0, &mut rng);
            let mut tape = Tape::new();
            let binding = store.bind_mut(&mut tape);
            let ids: Vec<NodeId> = (0..store.len())
                .map(|i| binding[crate::tensor::ParamId(i)])
                .collect();
            let prod = tape.matmul(ids[0], ids[1]).unwrap();
            let act = tape.gelu(prod);
            let loss = tape.sum(act);
            tape.backward(loss).unwrap();
            let mut bits = Vec::new();
            for id in ids {
                bits.extend(tape.grad(id).unwrap().iter().map(|v| v.to_bits()));
            }
            bits
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn select_rows_accumulates_duplicate_indices() {
        let table = tensor(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).with_grad();
        let mut tape = Tape::new();
        let t = tape.leaf(&table);
        let rows = tape.select_rows(t, &[1, 1]).unwrap();
        let loss = tape.sum(rows);
        tape.backward(loss).unwrap();
        let g = tape.grad(t).unwrap();
        assert_eq!(g, &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
    }

    /// Runs `finite_diff_check` over parameters drawn from a seeded normal
    /// and asserts the analytic gradients match numeric ones.
    fn fd_case<F>(seed: u64, shapes: &[Vec<usize>], f: F)
    where
        F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, TensorError>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (i, shape) in shapes.iter().enumerate() {
            store.add_normal(format!("p{i}"), shape.clone(), 1.0, &mut rng);
        }
        let n = shapes.len();
        let err = finite_diff_check(&mut store, 1e-5, |tape, binding: &Binding| {
            let ids: Vec<NodeId> = (0..n).map(|i| binding[crate::tensor::ParamId(i)]).collect();
            f(tape, &ids)
        })
        .unwrap();
        assert!(err < 1e-6, "finite-difference mismatch: {err}");
    }

    #[test]
    fn fd_matmul_add_bias() {
        fd_case(1, &[vec![3, 4], vec![4, 2], vec![3]], |tape, ids| {
            let prod = tape.matmul(ids[0], ids[1])?;
            let biased = tape.add_bias(prod, ids[2])?;
            Ok(tape.sum(biased))
        });
    }

    #[test]
    fn fd_mul_scale_add() {
        fd_case(2, &[vec![2, 3], vec![2, 3]], |tape, ids| {
            let m = tape.mul(ids[0], ids[1])?;
            let s = tape.scale(m, -1.7);
            let a = tape.add(s, ids[0])?;
            Ok(tape.sum(a))
        });
    }

    #[test]
    fn fd_activations() {
        fd_case(3, &[vec![4, 3]], |tape, ids| {
            let g = tape.gelu(ids[0]);
            let r = tape.relu(g);
            let s = tape.sigmoid(r);
            Ok(tape.sum(s))
        });
    }

    #[test]
    fn fd_layer_norm() {
        fd_case(4, &[vec![5, 3], vec![5], vec![5]], |tape, ids| {
            let y = tape.layer_norm(ids[0], ids[1], ids[2], 1e-12)?;
            // Square the output so gradients are not uniform.
            let sq = tape.mul(y, y)?;
            Ok(tape.sum(sq))
        });
    }

    #[test]
    fn fd_masked_softmax() {
        let allow = Arc::new(vec![
            true, false, true, true, //
            false, true, true, false, //
            true, true, true, true,
        ]);
        fd_case(5, &[vec![3, 4], vec![3, 4]], move |tape, ids| {
            let p = tape.masked_softmax(ids[0], Arc::clone(&allow))?;
            // Weight the probabilities so each coordinate matters.
            let w = tape.mul(p, ids[1])?;
            Ok(tape.sum(w))
        });
    }

    #[test]
    fn fd_shape_ops() {
        fd_case(6, &[vec![4, 3], vec![2, 3]], |tape, ids| {
            let t = tape.transpose(ids[0]); // 3 x 4
            let sl = tape.slice_rows(ids[0], 1, 2)?; // 2 x 3
            let cat = tape.concat_rows(&[sl, ids[1]])?; // 4 x 3
            let wide = tape.concat_cols(&[cat, ids[0]])?; // 4 x 6
            let picked_c = tape.select_cols(wide, &[0, 5, 5])?; // dup cols
            let picked_r = tape.select_rows(t, &[2, 0, 2])?; // dup rows
            let s1 = tape.sum(picked_c);
            let s2 = tape.sum(picked_r);
            let both = tape.add(s1, s2)?;
            // Make the loss nonlinear so transposes cannot cancel out.
            let sq = tape.mul(both, both)?;
            Ok(tape.sum(sq))
        });
    }

    #[test]
    fn fd_cross_entropy() {
        fd_case(7, &[vec![5, 3]], |tape, ids| {
            tape.cross_entropy(ids[0], &[2, 0, 4])
        });
    }

    #[test]
    fn fd_bce_with_logits() {
        fd_case(8, &[vec![2, 3]], |tape, ids| {
            tape.bce_with_logits(ids[0], &[0.0, 1.0, 0.5, 0.25, 0.75, 1.0])
        });
    }

    #[test]
    fn fd_dropout() {
        let keep = vec![true, false, true, true, false, true];
        fd_case(9, &[vec![2, 3]], move |tape, ids| {
            let d = tape.dropout(ids[0], keep.clone(), 0.7)?;
            let sq = tape.mul(d, d)?;
            Ok(tape.sum(sq))
        });
    }

    #[test]
    fn dropout_scales_kept_entries() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let d = tape
            .dropout(x, vec![true, false, true, false], 0.5)
            .unwrap();
        assert_eq!(tape.value(d), &[2.0, 0.0, 6.0, 0.0]);
    }

    #[test]
    fn random_masked_softmax_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..25 {
            let r = 4;
            let c = 6;
            let data: Vec<f64> = (0..r * c).map(|_| rng.random::<f64>() * 8.0 - 4.0).collect();
            let mut allow = vec![false; r * c];
            for i in 0..r {
                let mut any = false;
                for j in 0..c {
                    if rng.random::<f64>() < 0.5 {
                        allow[i * c + j] = true;
                        any = true;
                    }
                }
                if !any {
                    allow[i * c + rng.random_range(0..c)] = true;
                }
            }
            let mut tape = Tape::new();
            let x = tape.constant(vec![r, c], data).unwrap();
            let p = tape.masked_softmax(x, Arc::new(allow.clone())).unwrap();
            let v = tape.value(p);
            for i in 0..r {
                let mut sum = 0.0;
                for j in 0..c {
                    if allow[i * c + j] {
                        sum += v[i * c + j];
                    } else {
                        assert_eq!(v[i * c + j].to_bits(), 0.0_f64.to_bits());
                    }
                }
                close(sum, 1.0, 1e-12);
            }
        }
    }
}
