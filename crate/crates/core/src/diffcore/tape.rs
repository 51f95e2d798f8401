//! Define-by-run reverse-mode tape.
//!
//! A [`Graph`] is rebuilt for every forward pass. Operations append nodes to
//! an arena (parents always precede children), so the backward sweep is a
//! single reverse walk. `backward` may run once per graph; building a new
//! graph is the way to re-forward.

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf { trainable: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    Exp(NodeId),
    Ln(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Sqrt(NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    /// `[n, m] + [m]`, the row vector broadcast over rows.
    AddRow(NodeId, NodeId),
    /// `[n, m] * [m]` elementwise, broadcast over rows.
    MulRow(NodeId, NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    SoftmaxRows(NodeId),
    /// Summed token cross-entropy over the active rows of `[n, vocab]` logits.
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        active: Vec<bool>,
    },
    LayerNorm {
        x: NodeId,
        eps: f64,
    },
    /// Row lookup `table[ids[i]]`; gradient scatter-adds into the table.
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    ConcatRows(NodeId, NodeId),
    SliceRows {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols(NodeId, NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    GatherRows {
        x: NodeId,
        idx: Vec<usize>,
    },
    /// Pairwise rotation by fixed per-position angles (rotary positions).
    Rope {
        x: NodeId,
        cos: Tensor,
        sin: Tensor,
    },
    Detach,
    Clamp {
        x: NodeId,
        lo: f64,
        hi: f64,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
}

pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated at `id` by the last `backward`; zeros if the
    /// node was unreachable from the loss.
    pub fn grad(&self, id: NodeId) -> Tensor {
        match &self.nodes[id.0].grad {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[id.0].value.shape()),
        }
    }

    /// Constant input; no gradient is tracked into it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf { trainable: false })
    }

    /// Differentiable input (parameter or probed tensor).
    pub fn var(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf { trainable: true })
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (
            self.nodes[a.0].value.shape(),
            self.nodes[b.0].value.shape(),
        );
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.nodes[a.0].value.add(&self.nodes[b.0].value)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = self.nodes[a.0].value.sub(&self.nodes[b.0].value)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = self.nodes[a.0].value.mul(&self.nodes[b.0].value)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.scale(-1.0);
        self.push(v, Op::Neg(a))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.add_scalar(c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.scale(c);
        self.push(v, Op::MulScalar(a, c))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        Ok(self.push(v, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.transpose()?;
        Ok(self.push(v, Op::Transpose(a)))
    }

    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, m) = self.shh2("add_row", a, b)?;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = av.data().to_vec();
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] += bv.data()[j];
            }
        }
        let v = Tensor::new(av.shape(), out)?;
        Ok(self.push(v, Op::AddRow(a, b)))
    }

    pub fn mul_row(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let (n, m) = self.shh2("mul_row", a, s)?;
        let av = &self.nodes[a.0].value;
        let sv = &self.nodes[s.0].value;
        let mut out = av.data().to_vec();
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] *= sv.data()[j];
            }
        }
        let v = Tensor::new(av.shape(), out)?;
        Ok(self.push(v, Op::MulRow(a, s)))
    }

    fn shh2(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(usize, usize)> {
        let (n, m) = self.shape2(op, a)?;
        let bv = &self.nodes[b.0].value;
        if bv.shape() != [m] {
            return Err(Error::ShapeMismatch {
                op,
                left: self.nodes[a.0].value.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        Ok((n, m))
    }

    fn shape2(&self, op: &'static str, a: NodeId) -> Result<(usize, usize)> {
        let v = &self.nodes[a.0].value;
        if v.shape().len() != 2 {
            return Err(Error::invalid(format!(
                "{op} wants a rank-2 tensor, got {:?}",
                v.shape()
            )));
        }
        Ok((v.shape()[0], v.shape()[1]))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.nodes[a.0].value.sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].value.len() as f64;
        let v = Tensor::scalar(self.nodes[a.0].value.sum() / n);
        self.push(v, Op::MeanAll(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, m) = self.shape2("softmax_rows", a)?;
        let av = &self.nodes[a.0].value;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = av.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..m {
                let e = (row[j] - mx).exp();
                out[i * m + j] = e;
                z += e;
            }
            for j in 0..m {
                out[i * m + j] /= z;
            }
        }
        let v = Tensor::new(&[n, m], out)?;
        Ok(self.push(v, Op::SoftmaxRows(a)))
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax,
    /// counting only rows where `active` is set.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        active: &[bool],
    ) -> Result<NodeId> {
        let (n, m) = self.shape2("cross_entropy", logits)?;
        if targets.len() != n || active.len() != n {
            return Err(Error::invalid(format!(
                "cross_entropy: {n} logit rows, {} targets, {} active flags",
                targets.len(),
                active.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= m) {
            return Err(Error::invalid(format!(
                "cross_entropy: target id {t} out of vocabulary {m}"
            )));
        }
        let logp = self.nodes[logits.0].value.log_softmax_rows();
        let mut total = 0.0;
        for i in 0..n {
            if active[i] {
                total -= logp.get2(i, targets[i]);
            }
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                active: active.to_vec(),
            },
        ))
    }

    /// Row-wise normalization to zero mean, unit variance (no affine part).
    pub fn layer_norm(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let (n, m) = self.shape2("layer_norm", x)?;
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..m {
                out[i * m + j] = (row[j] - mean) * inv;
            }
        }
        let v = Tensor::new(&[n, m], out)?;
        Ok(self.push(v, Op::LayerNorm { x, eps }))
    }

    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v_rows, d) = self.shape2("embedding", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v_rows) {
            return Err(Error::invalid(format!(
                "embedding: id {bad} out of table with {v_rows} rows"
            )));
        }
        let tv = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tv.row(i));
        }
        let v = Tensor::new(&[ids.len(), d], out)?;
        Ok(self.push(
            v,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (na, ma) = self.shape2("concat_rows", a)?;
        let (nb, mb) = self.shape2("concat_rows", b)?;
        if ma != mb {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                left: vec![na, ma],
                right: vec![nb, mb],
            });
        }
        let mut data = self.nodes[a.0].value.data().to_vec();
        data.extend_from_slice(self.nodes[b.0].value.data());
        let v = Tensor::new(&[na + nb, ma], data)?;
        Ok(self.push(v, Op::ConcatRows(a, b)))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (n, m) = self.shape2("slice_rows", x)?;
        if start + len > n {
            return Err(Error::invalid(format!(
                "slice_rows: [{start}, {}) out of {n} rows",
                start + len
            )));
        }
        let data = self.nodes[x.0].value.data()[start * m..(start + len) * m].to_vec();
        let v = Tensor::new(&[len, m], data)?;
        Ok(self.push(v, Op::SliceRows { x, start, len }))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (na, ma) = self.shape2("concat_cols", a)?;
        let (nb, mb) = self.shape2("concat_cols", b)?;
        if na != nb {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                left: vec![na, ma],
                right: vec![nb, mb],
            });
        }
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut data = Vec::with_capacity(na * (ma + mb));
        for i in 0..na {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        let v = Tensor::new(&[na, ma + mb], data)?;
        Ok(self.push(v, Op::ConcatCols(a, b)))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (n, m) = self.shape2("slice_cols", x)?;
        if start + len > m {
            return Err(Error::invalid(format!(
                "slice_cols: [{start}, {}) out of {m} cols",
                start + len
            )));
        }
        let xv = &self.nodes[x.0].value;
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let v = Tensor::new(&[n, len], data)?;
        Ok(self.push(v, Op::SliceCols { x, start, len }))
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (n, m) = self.shape2("gather_rows", x)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!(
                "gather_rows: index {bad} out of {n} rows"
            )));
        }
        let xv = &self.nodes[x.0].value;
        let mut data = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            data.extend_from_slice(xv.row(i));
        }
        let v = Tensor::new(&[idx.len(), m], data)?;
        Ok(self.push(
            v,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Rotate adjacent column pairs of `[n, m]` (m even) by per-entry angles
    /// given as `cos`/`sin` tables of shape `[n, m/2]`.
    pub fn rope(&mut self, x: NodeId, cos: &Tensor, sin: &Tensor) -> Result<NodeId> {
        let (n, m) = self.shape2("rope", x)?;
        if m % 2 != 0 || cos.shape() != [n, m / 2] || sin.shape() != [n, m / 2] {
            return Err(Error::ShapeMismatch {
                op: "rope",
                left: vec![n, m],
                right: cos.shape().to_vec(),
            });
        }
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m / 2 {
                let (c, s) = (cos.get2(i, j), sin.get2(i, j));
                let (x0, x1) = (xv.get2(i, 2 * j), xv.get2(i, 2 * j + 1));
                out[i * m + 2 * j] = x0 * c - x1 * s;
                out[i * m + 2 * j + 1] = x0 * s + x1 * c;
            }
        }
        let v = Tensor::new(&[n, m], out)?;
        Ok(self.push(
            v,
            Op::Rope {
                x,
                cos: cos.clone(),
                sin: sin.clone(),
            },
        ))
    }

    /// Same value, but gradients stop here.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.clone();
        self.push(v, Op::Detach)
    }

    /// Elementwise clamp; gradient passes only strictly inside the range.
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.nodes[x.0].value.map(|v| v.clamp(lo, hi));
        self.push(v, Op::Clamp { x, lo, hi })
    }

    fn accum(&mut self, id: NodeId, delta: &Tensor) {
        // Constants never need a gradient buffer.
        if let Op::Leaf { trainable: false } = self.nodes[id.0].op {
            return;
        }
        match &mut self.nodes[id.0].grad {
            Some(g) => {
                for (gi, di) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gi += di;
                }
            }
            None => self.nodes[id.0].grad = Some(delta.clone()),
        }
    }

    /// Reverse sweep from a scalar loss. Populates per-node gradients; may
    /// run once per graph.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autodiff(
                "backward called twice on the same graph; re-run forward first".into(),
            ));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward wants a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let g = match &self.nodes[i].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            // Ops are moved out for dispatch and the node keeps its value/grad.
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf { trainable: false });
            self.propagate(&op, i, &g)?;
            self.nodes[i].op = op;
        }
        Ok(())
    }

    fn propagate(&mut self, op: &Op, node: usize, g: &Tensor) -> Result<()> {
        match op {
            Op::Leaf { .. } | Op::Detach => {}
            Op::Add(a, b) => {
                self.accum(*a, g);
                self.accum(*b, g);
            }
            Op::Sub(a, b) => {
                self.accum(*a, g);
                self.accum(*b, &g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let da = g.mul(&self.nodes[b.0].value)?;
                let db = g.mul(&self.nodes[a.0].value)?;
                self.accum(*a, &da);
                self.accum(*b, &db);
            }
            Op::Neg(a) => self.accum(*a, &g.scale(-1.0)),
            Op::AddScalar(a) => self.accum(*a, g),
            Op::MulScalar(a, c) => self.accum(*a, &g.scale(*c)),
            Op::Exp(a) => {
                let da = g.mul(&self.nodes[node].value)?;
                self.accum(*a, &da);
            }
            Op::Ln(a) => {
                let da = g.zip_map(&self.nodes[a.0].value, "ln_back", |gi, xi| gi / xi)?;
                self.accum(*a, &da);
            }
            Op::Tanh(a) => {
                let da = g.zip_map(&self.nodes[node].value, "tanh_back", |gi, yi| {
                    gi * (1.0 - yi * yi)
                })?;
                self.accum(*a, &da);
            }
            Op::Sigmoid(a) => {
                let da = g.zip_map(&self.nodes[node].value, "sigmoid_back", |gi, yi| {
                    gi * yi * (1.0 - yi)
                })?;
                self.accum(*a, &da);
            }
            Op::Sqrt(a) => {
                let da = g.zip_map(&self.nodes[node].value, "sqrt_back", |gi, yi| {
                    gi / (2.0 * yi)
                })?;
                self.accum(*a, &da);
            }
            Op::Matmul(a, b) => {
                let bt = self.nodes[b.0].value.transpose()?;
                let at = self.nodes[a.0].value.transpose()?;
                let da = g.matmul(&bt)?;
                let db = at.matmul(g)?;
                self.accum(*a, &da);
                self.accum(*b, &db);
            }
            Op::Transpose(a) => {
                let da = g.transpose()?;
                self.accum(*a, &da);
            }
            Op::AddRow(a, b) => {
                self.accum(*a, g);
                let m = self.nodes[b.0].value.len();
                let mut db = vec![0.0; m];
                for i in 0..g.rows() {
                    for (j, d) in db.iter_mut().enumerate() {
                        *d += g.get2(i, j);
                    }
                }
                self.accum(*b, &Tensor::from_vec(db));
            }
            Op::MulRow(a, s) => {
                let (n, m) = self.shh2("mul_row", *a, *s)?;
                let av = self.nodes[a.0].value.clone();
                let sv = self.nodes[s.0].value.clone();
                let mut da = vec![0.0; n * m];
                let mut ds = vec![0.0; m];
                for i in 0..n {
                    for j in 0..m {
                        da[i * m + j] = g.get2(i, j) * sv.data()[j];
                        ds[j] += g.get2(i, j) * av.get2(i, j);
                    }
                }
                self.accum(*a, &Tensor::new(&[n, m], da)?);
                self.accum(*s, &Tensor::from_vec(ds));
            }
            Op::SumAll(a) => {
                let da = Tensor::full(self.nodes[a.0].value.shape(), g.item());
                self.accum(*a, &da);
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                let da = Tensor::full(self.nodes[a.0].value.shape(), g.item() / n);
                self.accum(*a, &da);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[node].value;
                let (n, m) = (y.rows(), y.cols());
                let mut da = vec![0.0; n * m];
                for i in 0..n {
                    let mut dot = 0.0;
                    for j in 0..m {
                        dot += g.get2(i, j) * y.get2(i, j);
                    }
                    for j in 0..m {
                        da[i * m + j] = y.get2(i, j) * (g.get2(i, j) - dot);
                    }
                }
                self.accum(*a, &Tensor::new(&[n, m], da)?);
            }
            Op::CrossEntropy {
                logits,
                targets,
                active,
            } => {
                let lv = &self.nodes[logits.0].value;
                let (n, m) = (lv.rows(), lv.cols());
                let scale = g.item();
                let mut da = vec![0.0; n * m];
                for i in 0..n {
                    if !active[i] {
                        continue;
                    }
                    let row = lv.row(i);
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                    for j in 0..m {
                        let p = (row[j] - mx).exp() / z;
                        da[i * m + j] = scale * (p - if j == targets[i] { 1.0 } else { 0.0 });
                    }
                }
                self.accum(*logits, &Tensor::new(&[n, m], da)?);
            }
            Op::LayerNorm { x, eps } => {
                let y = self.nodes[node].value.clone();
                let xv = &self.nodes[x.0].value;
                let (n, m) = (xv.rows(), xv.cols());
                let mut da = vec![0.0; n * m];
                for i in 0..n {
                    let row = xv.row(i);
                    let mean = row.iter().sum::<f64>() / m as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let g_mean = (0..m).map(|j| g.get2(i, j)).sum::<f64>() / m as f64;
                    let gy_mean =
                        (0..m).map(|j| g.get2(i, j) * y.get2(i, j)).sum::<f64>() / m as f64;
                    for j in 0..m {
                        da[i * m + j] = inv * (g.get2(i, j) - g_mean - y.get2(i, j) * gy_mean);
                    }
                }
                self.accum(*x, &Tensor::new(&[n, m], da)?);
            }
            Op::Embedding { table, ids } => {
                let (rows, d) = (
                    self.nodes[table.0].value.rows(),
                    self.nodes[table.0].value.cols(),
                );
                let mut dt = vec![0.0; rows * d];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g.get2(i, j);
                    }
                }
                self.accum(*table, &Tensor::new(&[rows, d], dt)?);
            }
            Op::ConcatRows(a, b) => {
                let na = self.nodes[a.0].value.rows();
                let m = self.nodes[a.0].value.cols();
                let da = Tensor::new(&[na, m], g.data()[..na * m].to_vec())?;
                let nb = self.nodes[b.0].value.rows();
                let db = Tensor::new(&[nb, m], g.data()[na * m..].to_vec())?;
                self.accum(*a, &da);
                self.accum(*b, &db);
            }
            Op::SliceRows { x, start, len } => {
                let (n, m) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                let mut dx = vec![0.0; n * m];
                dx[start * m..(start + len) * m].copy_from_slice(g.data());
                self.accum(*x, &Tensor::new(&[n, m], dx)?);
            }
            Op::ConcatCols(a, b) => {
                let (n, ma) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let mb = self.nodes[b.0].value.cols();
                let mut da = vec![0.0; n * ma];
                let mut db = vec![0.0; n * mb];
                for i in 0..n {
                    da[i * ma..(i + 1) * ma].copy_from_slice(&g.row(i)[..ma]);
                    db[i * mb..(i + 1) * mb].copy_from_slice(&g.row(i)[ma..]);
                }
                self.accum(*a, &Tensor::new(&[n, ma], da)?);
                self.accum(*b, &Tensor::new(&[n, mb], db)?);
            }
            Op::SliceCols { x, start, len } => {
                let (n, m) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                let mut dx = vec![0.0; n * m];
                for i in 0..n {
                    dx[i * m + start..i * m + start + len].copy_from_slice(g.row(i));
                }
                self.accum(*x, &Tensor::new(&[n, m], dx)?);
            }
            Op::GatherRows { x, idx } => {
                let (n, m) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                let mut dx = vec![0.0; n * m];
                for (i, &id) in idx.iter().enumerate() {
                    for j in 0..m {
                        dx[id * m + j] += g.get2(i, j);
                    }
                }
                self.accum(*x, &Tensor::new(&[n, m], dx)?);
            }
            Op::Clamp { x, lo, hi } => {
                let dx = g.zip_map(&self.nodes[x.0].value, "clamp_back", |gi, xi| {
                    if xi > *lo && xi < *hi {
                        gi
                    } else {
                        0.0
                    }
                })?;
                self.accum(*x, &dx);
            }
            Op::Rope { x, cos, sin } => {
                let (n, m) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                let mut dx = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m / 2 {
                        let (c, s) = (cos.get2(i, j), sin.get2(i, j));
                        let (g0, g1) = (g.get2(i, 2 * j), g.get2(i, 2 * j + 1));
                        dx[i * m + 2 * j] = g0 * c + g1 * s;
                        dx[i * m + 2 * j + 1] = -g0 * s + g1 * c;
                    }
                }
                self.accum(*x, &Tensor::new(&[n, m], dx)?);
            }
        }
        Ok(())
    }
}

/// Per-position rotary tables for a `[len, dim]` stream (`dim` even).
pub fn rope_tables(len: usize, dim: usize, base: f64) -> (Tensor, Tensor) {
    let half = dim / 2;
    let mut cos = vec![0.0; len * half];
    let mut sin = vec![0.0; len * half];
    for pos in 0..len {
        for j in 0..half {
            let freq = base.powf(-2.0 * j as f64 / dim as f64);
            let angle = pos as f64 * freq;
            cos[pos * half + j] = angle.cos();
            sin[pos * half + j] = angle.sin();
        }
    }
    (
        Tensor::new(&[len, half], cos).expect("rope table shape"),
        Tensor::new(&[len, half], sin).expect("rope table shape"),
    )
}
