//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] is an append-only arena of nodes. Every operation records its
//! inputs and returns a [`Var`] handle; [`Tape::backward`] then walks the arena
//! in reverse creation order, which is a valid topological order because a
//! node can only reference nodes created before it.
//!
//! Only the operations the training objectives need are provided. Leaves are
//! created either as constants ([`Tape::constant`]) or as trainable parameters
//! ([`Tape::param`]); gradients are only propagated into subgraphs that reach a
//! parameter, so constant leaves keep a zero gradient.
//!
//! Row-oriented operations (`slice_rows`, `concat_rows`, ...) act on the
//! leading axis: a `[K, M, d]` tensor has `K` rows of `M·d` elements.

use crate::error::{MpaError, Result};
use crate::tensor::{gemm, gemm_nt, gemm_tn, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Reciprocal(Var),
    Tanh(Var),
    Sum(Var),
    Mean(Var),
    L1Dist(Var, Var),
    L2Sq(Var, Var),
    Concat(Vec<Var>),
    Slice { a: Var, start: usize },
    Reshape(Var),
    GroupMeanRows { a: Var, group: usize },
    NormalizeRows(Var),
    CosineSim(Var, Var),
    SoftmaxRows(Var),
    SoftmaxCe { logits: Var, label: usize },
    CrossEntropyRows { logits: Var, labels: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Arena of recorded operations.
#[derive(Debug, Clone, Default)]
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

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
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

    /// Accumulated gradient of `v`, zeros if nothing has flowed into it.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(node.value.shape()))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = self.any_grad(inputs);
        self.push(value, op, rg)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(MpaError::dim(op, s, &[0, 0])),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(MpaError::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(MpaError::dim("matmul", self.shape(a), self.shape(b)));
        }
        let data = gemm(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.record(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_nt")?;
        let (n, k2) = self.matrix_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(MpaError::dim("matmul_nt", self.shape(a), self.shape(b)));
        }
        let data = gemm_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.record(value, Op::MatMulNt(a, b), &[a, b]))
    }

    /// Row-wise affine map `x · wᵀ + b` for `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, inp) = self.matrix_dims(x, "linear")?;
        let (out, inp2) = self.matrix_dims(w, "linear")?;
        if inp != inp2 {
            return Err(MpaError::dim("linear", self.shape(x), self.shape(w)));
        }
        let mut data = gemm_nt(self.value(x).data(), self.value(w).data(), n, inp, out);
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(MpaError::dim("linear bias", self.shape(b), &[out]));
            }
            let bias = self.value(b).data();
            for row in data.chunks_mut(out.max(1)) {
                for (o, bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let value = Tensor::new(vec![n, out], data)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.record(value, Op::Linear { x, w, b }, &inputs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.record(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.record(value, Op::Sub(a, b), &[a, b]))
    }

    /// Multiplication by a fixed real.
    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("shape preserved");
        self.record(value, Op::Scale(a, factor), &[a])
    }

    /// Multiplication by a scalar node.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(MpaError::dim("scale_by", self.shape(s), &[]));
        }
        let factor = self.value(s).item();
        let src = self.value(a);
        let data = src.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.record(value, Op::ScaleBy(a, s), &[a, s]))
    }

    pub fn reciprocal(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        if src.data().contains(&0.0) {
            return Err(MpaError::Degenerate("reciprocal of zero".into()));
        }
        let data = src.data().iter().map(|v| 1.0 / v).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.record(value, Op::Reciprocal(a), &[a]))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|v| v.tanh()).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("shape preserved");
        self.record(value, Op::Tanh(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.record(value, Op::Sum(a), &[a])
    }

    /// Mean over all elements. An empty tensor has mean zero.
    pub fn mean(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let n = src.len();
        let m = if n == 0 { 0.0 } else { src.sum() / n as f64 };
        self.record(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// `Σ |a − b|`.
    pub fn l1_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "l1_dist")?;
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        Ok(self.record(Tensor::scalar(s), Op::L1Dist(a, b), &[a, b]))
    }

    /// `Σ (a − b)²`.
    pub fn l2_sq(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "l2_sq")?;
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.record(Tensor::scalar(s), Op::L2Sq(a, b), &[a, b]))
    }

    /// Concatenation along the leading axis. Trailing dimensions must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| MpaError::Contract("concat of zero tensors".into()))?;
        let tail = self.shape(first).get(1..).unwrap_or(&[]).to_vec();
        if self.shape(first).is_empty() {
            return Err(MpaError::dim("concat", &[], &[1]));
        }
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(MpaError::dim("concat", self.shape(first), s));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(shape, data)?;
        Ok(self.record(value, Op::Concat(parts.to_vec()), parts))
    }

    /// Rows `start..end` of the leading axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let src = self.value(a);
        if src.shape().is_empty() {
            return Err(MpaError::dim("slice", &[], &[end]));
        }
        if start > end || end > src.rows() {
            return Err(MpaError::Index {
                what: "slice end",
                index: end,
                bound: src.rows(),
            });
        }
        let w = src.row_len();
        let data = src.data()[start * w..end * w].to_vec();
        let mut shape = src.shape().to_vec();
        shape[0] = end - start;
        let value = Tensor::new(shape, data)?;
        Ok(self.record(value, Op::Slice { a, start }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.record(value, Op::Reshape(a), &[a]))
    }

    /// Averages consecutive groups of `group` rows of a matrix: `[g·r, c] → [r, c]`.
    pub fn group_mean_rows(&mut self, a: Var, group: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "group_mean_rows")?;
        if group == 0 || r % group != 0 {
            return Err(MpaError::dim("group_mean_rows", &[r, c], &[group]));
        }
        let src = self.value(a).data();
        let out_rows = r / group;
        let mut data = vec![0.0; out_rows * c];
        let inv = 1.0 / group as f64;
        for (i, row) in src.chunks(c.max(1)).enumerate().take(r) {
            let o = &mut data[(i / group) * c..(i / group + 1) * c];
            for (dst, v) in o.iter_mut().zip(row) {
                *dst += v * inv;
            }
        }
        let value = Tensor::new(vec![out_rows, c], data)?;
        Ok(self.record(value, Op::GroupMeanRows { a, group }, &[a]))
    }

    /// Scales every row of a matrix to unit L2 norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "normalize_rows")?;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let norm = l2(row);
            if norm == 0.0 || !norm.is_finite() {
                return Err(MpaError::Degenerate(format!("row {i} has zero norm")));
            }
            data.extend(row.iter().map(|v| v / norm));
        }
        let value = Tensor::new(vec![r, c], data)?;
        Ok(self.record(value, Op::NormalizeRows(a), &[a]))
    }

    /// Cosine similarity of two same-shape tensors, as a scalar.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "cosine_sim")?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let (nx, ny) = (l2(x), l2(y));
        if nx == 0.0 || ny == 0.0 {
            return Err(MpaError::Degenerate("cosine similarity of a zero vector".into()));
        }
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        let c = (dot / (nx * ny)).clamp(-1.0, 1.0);
        Ok(self.record(Tensor::scalar(c), Op::CosineSim(a, b), &[a, b]))
    }

    /// Row-wise pairwise cosine similarity: `[m, d] × [n, d] → [m, n]`.
    pub fn cosine_sim_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.normalize_rows(a)?;
        let nb = self.normalize_rows(b)?;
        self.matmul_nt(na, nb)
    }

    /// Softmax over the last axis of a vector or matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let c = match src.shape() {
            [c] => *c,
            [_, c] => *c,
            s => return Err(MpaError::dim("softmax", s, &[0, 0])),
        };
        let mut data = Vec::with_capacity(src.len());
        for row in src.data().chunks(c.max(1)) {
            data.extend(softmax(row));
        }
        let value = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.record(value, Op::SoftmaxRows(a), &[a]))
    }

    /// `−log softmax(logits)[label]` for a logit vector.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let src = self.value(logits);
        let k = match src.shape() {
            [k] => *k,
            s => return Err(MpaError::dim("softmax_cross_entropy", s, &[0])),
        };
        if label >= k {
            return Err(MpaError::Index {
                what: "label",
                index: label,
                bound: k,
            });
        }
        let v = cross_entropy(src.data(), label);
        Ok(self.record(
            Tensor::scalar(v),
            Op::SoftmaxCe { logits, label },
            &[logits],
        ))
    }

    /// Mean cross-entropy of a `[B, K]` logit matrix against `B` labels.
    pub fn cross_entropy_rows(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = self.matrix_dims(logits, "cross_entropy_rows")?;
        if labels.len() != b {
            return Err(MpaError::dim("cross_entropy_rows", &[b, k], &[labels.len()]));
        }
        if b == 0 {
            return Err(MpaError::Contract("cross-entropy over an empty batch".into()));
        }
        let src = self.value(logits).data();
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(MpaError::Index {
                    what: "label",
                    index: y,
                    bound: k,
                });
            }
            let row = &src[i * k..(i + 1) * k];
            total += cross_entropy(row, y);
        }
        let v = total / b as f64;
        Ok(self.record(
            Tensor::scalar(v),
            Op::CrossEntropyRows {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    /// Accumulates `∂loss/∂node` into every node reachable from `loss`.
    ///
    /// Repeated calls add to the existing gradients; use [`Tape::zero_grad`]
    /// to reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(MpaError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            for (parent, contrib) in self.local_grads(i, &g) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut adj[parent.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for each of its inputs.
    fn local_grads(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let gd = g.data();
        let val = |v: Var| &self.nodes[v.0].value;
        let like = |v: Var, data: Vec<f64>| {
            Tensor::new(val(v).shape().to_vec(), data).expect("gradient shape")
        };
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                vec![
                    (*a, like(*a, gemm_nt(gd, val(*b).data(), m, n, k))),
                    (*b, like(*b, gemm_tn(val(*a).data(), gd, m, k, n))),
                ]
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[0];
                vec![
                    (*a, like(*a, gemm(gd, val(*b).data(), m, n, k))),
                    (*b, like(*b, gemm_tn(gd, val(*a).data(), m, n, k))),
                ]
            }
            Op::Linear { x, w, b } => {
                let (n, inp) = (val(*x).shape()[0], val(*x).shape()[1]);
                let out = val(*w).shape()[0];
                let mut res = vec![
                    (*x, like(*x, gemm(gd, val(*w).data(), n, out, inp))),
                    (*w, like(*w, gemm_tn(gd, val(*x).data(), n, out, inp))),
                ];
                if let Some(b) = b {
                    let mut gb = vec![0.0; out];
                    for row in gd.chunks(out.max(1)) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    res.push((*b, like(*b, gb)));
                }
                res
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![
                (*a, g.clone()),
                (*b, like(*b, gd.iter().map(|v| -v).collect())),
            ],
            Op::Scale(a, f) => vec![(*a, like(*a, gd.iter().map(|v| v * f).collect()))],
            Op::ScaleBy(a, s) => {
                let factor = val(*s).item();
                let gs: f64 = gd.iter().zip(val(*a).data()).map(|(p, q)| p * q).sum();
                vec![
                    (*a, like(*a, gd.iter().map(|v| v * factor).collect())),
                    (*s, like(*s, vec![gs])),
                ]
            }
            Op::Reciprocal(a) => {
                let data = gd
                    .iter()
                    .zip(val(*a).data())
                    .map(|(gv, x)| -gv / (x * x))
                    .collect();
                vec![(*a, like(*a, data))]
            }
            Op::Tanh(a) => {
                let data = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(gv, y)| gv * (1.0 - y * y))
                    .collect();
                vec![(*a, like(*a, data))]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), gd[0]))],
            Op::Mean(a) => {
                let n = val(*a).len().max(1) as f64;
                vec![(*a, Tensor::full(val(*a).shape(), gd[0] / n))]
            }
            Op::L1Dist(a, b) => {
                let sign: Vec<f64> = val(*a)
                    .data()
                    .iter()
                    .zip(val(*b).data())
                    .map(|(x, y)| gd[0] * signum0(x - y))
                    .collect();
                let neg = sign.iter().map(|v| -v).collect();
                vec![(*a, like(*a, sign)), (*b, like(*b, neg))]
            }
            Op::L2Sq(a, b) => {
                let diff: Vec<f64> = val(*a)
                    .data()
                    .iter()
                    .zip(val(*b).data())
                    .map(|(x, y)| 2.0 * gd[0] * (x - y))
                    .collect();
                let neg = diff.iter().map(|v| -v).collect();
                vec![(*a, like(*a, diff)), (*b, like(*b, neg))]
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|p| {
                        let n = val(*p).len();
                        let t = like(*p, gd[offset..offset + n].to_vec());
                        offset += n;
                        (*p, t)
                    })
                    .collect()
            }
            Op::Slice { a, start } => {
                let src = val(*a);
                let w = src.row_len();
                let mut data = vec![0.0; src.len()];
                data[start * w..start * w + gd.len()].copy_from_slice(gd);
                vec![(*a, like(*a, data))]
            }
            Op::Reshape(a) => vec![(*a, like(*a, gd.to_vec()))],
            Op::GroupMeanRows { a, group } => {
                let src = val(*a);
                let c = src.shape()[1];
                let inv = 1.0 / *group as f64;
                let mut data = vec![0.0; src.len()];
                for (i, row) in data.chunks_mut(c.max(1)).enumerate() {
                    let o = &gd[(i / group) * c..(i / group + 1) * c];
                    for (dst, v) in row.iter_mut().zip(o) {
                        *dst = v * inv;
                    }
                }
                vec![(*a, like(*a, data))]
            }
            Op::NormalizeRows(a) => {
                let src = val(*a);
                let c = src.shape()[1];
                let y = node.value.data();
                let mut data = vec![0.0; src.len()];
                for r in 0..src.shape()[0] {
                    let span = r * c..(r + 1) * c;
                    let norm = l2(&src.data()[span.clone()]);
                    let yr = &y[span.clone()];
                    let gr = &gd[span.clone()];
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((dst, yv), gv) in data[span].iter_mut().zip(yr).zip(gr) {
                        *dst = (gv - yv * dot) / norm;
                    }
                }
                vec![(*a, like(*a, data))]
            }
            Op::CosineSim(a, b) => {
                let (x, y) = (val(*a).data(), val(*b).data());
                let (nx, ny) = (l2(x), l2(y));
                let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                let c = dot / (nx * ny);
                let ga = x
                    .iter()
                    .zip(y)
                    .map(|(p, q)| gd[0] * (q / (nx * ny) - c * p / (nx * nx)))
                    .collect();
                let gb = x
                    .iter()
                    .zip(y)
                    .map(|(p, q)| gd[0] * (p / (nx * ny) - c * q / (ny * ny)))
                    .collect();
                vec![(*a, like(*a, ga)), (*b, like(*b, gb))]
            }
            Op::SoftmaxRows(a) => {
                let c = *node.value.shape().last().expect("softmax rank");
                let y = node.value.data();
                let mut data = vec![0.0; y.len()];
                for r in 0..y.len() / c.max(1) {
                    let span = r * c..(r + 1) * c;
                    let yr = &y[span.clone()];
                    let gr = &gd[span.clone()];
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((dst, yv), gv) in data[span].iter_mut().zip(yr).zip(gr) {
                        *dst = yv * (gv - dot);
                    }
                }
                vec![(*a, like(*a, data))]
            }
            Op::SoftmaxCe { logits, label } => {
                let mut p = softmax(val(*logits).data());
                p[*label] -= 1.0;
                p.iter_mut().for_each(|v| *v *= gd[0]);
                vec![(*logits, like(*logits, p))]
            }
            Op::CrossEntropyRows { logits, labels } => {
                let src = val(*logits);
                let k = src.shape()[1];
                let scale = gd[0] / labels.len() as f64;
                let mut data = Vec::with_capacity(src.len());
                for (i, &y) in labels.iter().enumerate() {
                    let mut p = softmax(&src.data()[i * k..(i + 1) * k]);
                    p[y] -= 1.0;
                    data.extend(p.into_iter().map(|v| v * scale));
                }
                vec![(*logits, like(*logits, data))]
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect()
}

fn signum0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `−log softmax(row)[label]`, computed as `(max − z_label) + ln(1 + Σ_{j≠argmax} e^{z_j − max})`
/// so that confident predictions keep full relative precision.
pub(crate) fn cross_entropy(row: &[f64], label: usize) -> f64 {
    let (arg, max) = row
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
    let rest: f64 = row
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != arg)
        .map(|(_, v)| (v - max).exp())
        .sum();
    ((max - row[label]) + rest.ln_1p()).max(0.0)
}

pub(crate) fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
