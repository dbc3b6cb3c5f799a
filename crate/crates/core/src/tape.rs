//! Reverse-mode automatic differentiation on a per-pass tape.
//!
//! Every forward pass records its operations onto a fresh `Tape`; nodes are
//! appended in evaluation order, so parents always precede children and a
//! single reverse sweep visits each node exactly once. The tape owns the
//! forward values; gradients live in a parallel buffer populated by
//! [`Tape::backward`].
//!
//! Matrices are 2-D row-major (leading axes are flattened into rows).
//! Matrix products go through `matrixmultiply::dgemm`, which is
//! single-threaded and summation-order deterministic.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TapeId(usize);

impl TapeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// Elementwise sum of two same-shape tensors.
    Add(TapeId, TapeId),
    /// `[r x c] + [c]`, the row vector broadcast over rows.
    AddRow(TapeId, TapeId),
    /// Elementwise product.
    Mul(TapeId, TapeId),
    Scale(TapeId, f64),
    /// `[m x k] . [k x n]`.
    Matmul(TapeId, TapeId),
    /// `A . B^T` for `A [m x k]`, `B [n x k]`.
    MatmulNT(TapeId, TapeId),
    Relu(TapeId),
    /// Row-wise softmax over the last axis.
    Softmax(TapeId),
    RmsNorm {
        x: TapeId,
        gain: TapeId,
        eps: f64,
    },
    /// Row lookup: `out[t] = table[ids[t]]`.
    Gather {
        table: TapeId,
        ids: Vec<usize>,
    },
    /// Columns `[start, start+len)` of a matrix.
    ColSlice {
        src: TapeId,
        start: usize,
        len: usize,
    },
    /// Horizontal concatenation of equal-row matrices.
    ConcatCols(Vec<TapeId>),
    /// Sum of all elements, yielding a scalar.
    Sum(TapeId),
    /// Mean of -log softmax(logits)[target] over non-ignored positions.
    CrossEntropy {
        logits: TapeId,
        targets: Vec<usize>,
        kept: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    /// True when some ancestor leaf requires grad; prunes the reverse sweep.
    needs_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TapeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of `id` after [`Tape::backward`], if the node was reached.
    pub fn grad(&self, id: TapeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> TapeId {
        let id = TapeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        id
    }

    fn needs(&self, id: TapeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Records a tensor as a differentiable leaf (clones its data).
    pub fn leaf(&mut self, t: &Tensor) -> TapeId {
        let needs = t.requires_grad();
        self.push(t.clone(), Op::Leaf, needs)
    }

    /// Records a value the sweep never differentiates through.
    pub fn constant(&mut self, t: Tensor) -> TapeId {
        self.push(t, Op::Leaf, false)
    }

    pub fn add(&mut self, a: TapeId, b: TapeId) -> Result<TapeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch {
                context: "add",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data: Vec<f64> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_vec(va.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn add_row(&mut self, a: TapeId, row: TapeId) -> Result<TapeId> {
        let (va, vr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        let c = va.last_dim();
        if vr.shape() != [c] {
            return Err(Error::ShapeMismatch {
                context: "add_row",
                lhs: va.shape().to_vec(),
                rhs: vr.shape().to_vec(),
            });
        }
        let mut data = va.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (x, y) in chunk.iter_mut().zip(vr.data()) {
                *x += y;
            }
        }
        let value = Tensor::from_vec(va.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(row);
        Ok(self.push(value, Op::AddRow(a, row), needs))
    }

    pub fn mul(&mut self, a: TapeId, b: TapeId) -> Result<TapeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch {
                context: "mul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data: Vec<f64> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_vec(va.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: TapeId, factor: f64) -> TapeId {
        let va = &self.nodes[a.0].value;
        let data: Vec<f64> = va.data().iter().map(|x| x * factor).collect();
        let value = Tensor::from_vec(va.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(a);
        self.push(value, Op::Scale(a, factor), needs)
    }

    /// `[m x k] . [k x n] -> [m x n]`.
    pub fn matmul(&mut self, a: TapeId, b: TapeId) -> Result<TapeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = (va.rows(), va.last_dim());
        let (kb, n) = (vb.rows(), vb.last_dim());
        if k != kb {
            return Err(Error::ShapeMismatch {
                context: "matmul inner dimensions",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            va.data(),
            (k as isize, 1),
            vb.data(),
            (n as isize, 1),
            &mut out,
        );
        let value = Tensor::from_vec(vec![m, n], out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Matmul(a, b), needs))
    }

    /// `A . B^T` for `A [m x k]`, `B [n x k]` -> `[m x n]`.
    pub fn matmul_nt(&mut self, a: TapeId, b: TapeId) -> Result<TapeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = (va.rows(), va.last_dim());
        let (n, kb) = (vb.rows(), vb.last_dim());
        if k != kb {
            return Err(Error::ShapeMismatch {
                context: "matmul_nt inner dimensions",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        // B read transposed: element (k, n) of B^T sits at B[n*kb + k].
        gemm(
            m,
            k,
            n,
            va.data(),
            (k as isize, 1),
            vb.data(),
            (1, k as isize),
            &mut out,
        );
        let value = Tensor::from_vec(vec![m, n], out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatmulNT(a, b), needs))
    }

    pub fn relu(&mut self, a: TapeId) -> TapeId {
        let va = &self.nodes[a.0].value;
        let data: Vec<f64> = va.data().iter().map(|&x| x.max(0.0)).collect();
        let value = Tensor::from_vec(va.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(a);
        self.push(value, Op::Relu(a), needs)
    }

    /// Row-wise softmax with max subtraction; rows sum to 1.
    pub fn softmax(&mut self, a: TapeId) -> Result<TapeId> {
        let va = &self.nodes[a.0].value;
        if va.data().iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric("softmax over NaN input".into()));
        }
        let c = va.last_dim();
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let value = Tensor::from_vec(va.shape().to_vec(), data)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Softmax(a), needs))
    }

    /// `y = gain (*) x / sqrt(mean(x^2) + eps)` per row over the last axis.
    pub fn rms_norm(&mut self, x: TapeId, gain: TapeId, eps: f64) -> Result<TapeId> {
        let (vx, vg) = (&self.nodes[x.0].value, &self.nodes[gain.0].value);
        let d = vx.last_dim();
        if vg.shape() != [d] {
            return Err(Error::ShapeMismatch {
                context: "rms_norm gain",
                lhs: vx.shape().to_vec(),
                rhs: vg.shape().to_vec(),
            });
        }
        let g = vg.data();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(d) {
            let ms = row.iter().map(|x| x * x).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            for (v, gi) in row.iter_mut().zip(g) {
                *v = gi * *v * inv;
            }
        }
        let value = Tensor::from_vec(vx.shape().to_vec(), data)?;
        let needs = self.needs(x) || self.needs(gain);
        Ok(self.push(value, Op::RmsNorm { x, gain, eps }, needs))
    }

    /// Embedding lookup: stacks `table[ids[t]]` into `[len(ids) x d]`.
    pub fn gather(&mut self, table: TapeId, ids: &[usize]) -> Result<TapeId> {
        let vt = &self.nodes[table.0].value;
        let (rows, d) = (vt.rows(), vt.last_dim());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::IndexOutOfRange {
                    what: "gather row",
                    index: id,
                    limit: rows,
                });
            }
            data.extend_from_slice(&vt.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::from_vec(vec![ids.len(), d], data)?;
        let needs = self.needs(table);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    pub fn col_slice(&mut self, src: TapeId, start: usize, len: usize) -> Result<TapeId> {
        let vs = &self.nodes[src.0].value;
        let (rows, c) = (vs.rows(), vs.last_dim());
        if start + len > c {
            return Err(Error::IndexOutOfRange {
                what: "col_slice end",
                index: start + len,
                limit: c,
            });
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&vs.data()[r * c + start..r * c + start + len]);
        }
        let value = Tensor::from_vec(vec![rows, len], data)?;
        let needs = self.needs(src);
        Ok(self.push(value, Op::ColSlice { src, start, len }, needs))
    }

    pub fn concat_cols(&mut self, parts: &[TapeId]) -> Result<TapeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero parts".into()));
        }
        let rows = self.nodes[parts[0].0].value.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if v.rows() != rows {
                return Err(Error::ShapeMismatch {
                    context: "concat_cols rows",
                    lhs: vec![rows],
                    rhs: vec![v.rows()],
                });
            }
            widths.push(v.last_dim());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                let v = &self.nodes[p.0].value;
                data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::from_vec(vec![rows, total], data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), needs))
    }

    pub fn sum(&mut self, a: TapeId) -> TapeId {
        let total: f64 = self.nodes[a.0].value.data().iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(total), Op::Sum(a), needs)
    }

    /// Mean of scalar nodes, built from add and scale so it differentiates.
    pub fn mean_scalars(&mut self, ids: &[TapeId]) -> Result<TapeId> {
        if ids.is_empty() {
            return Err(Error::Contract("mean_scalars of zero nodes".into()));
        }
        let mut acc = ids[0];
        for &id in &ids[1..] {
            acc = self.add(acc, id)?;
        }
        Ok(self.scale(acc, 1.0 / ids.len() as f64))
    }

    /// Mean over non-ignored positions of `-log softmax(logits)[target]`.
    pub fn cross_entropy(
        &mut self,
        logits: TapeId,
        targets: &[usize],
        ignore_id: Option<usize>,
    ) -> Result<TapeId> {
        let vl = &self.nodes[logits.0].value;
        let (t, v) = (vl.rows(), vl.last_dim());
        if targets.len() != t {
            return Err(Error::ShapeMismatch {
                context: "cross_entropy targets",
                lhs: vec![t],
                rhs: vec![targets.len()],
            });
        }
        let mut kept = Vec::with_capacity(t);
        for (pos, &tok) in targets.iter().enumerate() {
            if Some(tok) == ignore_id {
                continue;
            }
            if tok >= v {
                return Err(Error::IndexOutOfRange {
                    what: "cross_entropy target",
                    index: tok,
                    limit: v,
                });
            }
            kept.push(pos);
        }
        if kept.is_empty() {
            return Err(Error::EmptyLoss);
        }
        let mut total = 0.0;
        for &pos in &kept {
            let row = &vl.data()[pos * v..(pos + 1) * v];
            total += log_sum_exp(row) - row[targets[pos]];
        }
        let loss = total / kept.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss}")));
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                kept,
            },
            needs,
        ))
    }

    /// Reverse sweep from a scalar loss. Gradients of previous sweeps on this
    /// tape are cleared first, then accumulate additively across node uses.
    pub fn backward(&mut self, loss: TapeId) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(dy) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &dy);
            self.grads[i] = Some(dy);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: TapeId, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let numel = self.nodes[id.0].value.numel();
        let buf = self.grads[id.0].get_or_insert_with(|| vec![0.0; numel]);
        f(buf);
    }

    fn propagate(&mut self, i: usize, dy: &[f64]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, |g| {
                    for (g, d) in g.iter_mut().zip(dy) {
                        *g += d;
                    }
                });
                self.accumulate(b, |g| {
                    for (g, d) in g.iter_mut().zip(dy) {
                        *g += d;
                    }
                });
            }
            Op::AddRow(a, row) => {
                let (a, row) = (*a, *row);
                let c = self.nodes[row.0].value.numel();
                self.accumulate(a, |g| {
                    for (g, d) in g.iter_mut().zip(dy) {
                        *g += d;
                    }
                });
                self.accumulate(row, |g| {
                    for (j, d) in dy.iter().enumerate() {
                        g[j % c] += d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let da: Vec<f64> = self.nodes[b.0]
                    .value
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(x, d)| x * d)
                    .collect();
                let db: Vec<f64> = self.nodes[a.0]
                    .value
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(x, d)| x * d)
                    .collect();
                self.accumulate(a, |g| {
                    for (g, d) in g.iter_mut().zip(&da) {
                        *g += d;
                    }
                });
                self.accumulate(b, |g| {
                    for (g, d) in g.iter_mut().zip(&db) {
                        *g += d;
                    }
                });
            }
            Op::Scale(a, factor) => {
                let (a, factor) = (*a, *factor);
                self.accumulate(a, |g| {
                    for (g, d) in g.iter_mut().zip(dy) {
                        *g += factor * d;
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.last_dim());
                let n = self.nodes[b.0].value.last_dim();
                if self.needs(a) {
                    // dA += dC . B^T
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        dy,
                        (n as isize, 1),
                        self.nodes[b.0].value.data(),
                        (1, n as isize),
                        &mut da,
                    );
                    self.accumulate(a, |g| {
                        for (g, d) in g.iter_mut().zip(&da) {
                            *g += d;
                        }
                    });
                }
                if self.needs(b) {
                    // dB += A^T . dC
                    let mut db = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        self.nodes[a.0].value.data(),
                        (1, k as isize),
                        dy,
                        (n as isize, 1),
                        &mut db,
                    );
                    self.accumulate(b, |g| {
                        for (g, d) in g.iter_mut().zip(&db) {
                            *g += d;
                        }
                    });
                }
            }
            Op::MatmulNT(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.last_dim());
                let n = self.nodes[b.0].value.rows();
                if self.needs(a) {
                    // dA += dC . B
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        dy,
                        (n as isize, 1),
                        self.nodes[b.0].value.data(),
                        (k as isize, 1),
                        &mut da,
                    );
                    self.accumulate(a, |g| {
                        for (g, d) in g.iter_mut().zip(&da) {
                            *g += d;
                        }
                    });
                }
                if self.needs(b) {
                    // dB += dC^T . A
                    let mut db = vec![0.0; n * k];
                    gemm(
                        n,
                        m,
                        k,
                        dy,
                        (1, n as isize),
                        self.nodes[a.0].value.data(),
                        (k as isize, 1),
                        &mut db,
                    );
                    self.accumulate(b, |g| {
                        for (g, d) in g.iter_mut().zip(&db) {
                            *g += d;
                        }
                    });
                }
            }
            Op::Relu(a) => {
                let a = *a;
                let mask: Vec<f64> = self.nodes[a.0]
                    .value
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&x, d)| if x > 0.0 { *d } else { 0.0 })
                    .collect();
                self.accumulate(a, |g| {
                    for (g, d) in g.iter_mut().zip(&mask) {
                        *g += d;
                    }
                });
            }
            Op::Softmax(a) => {
                let a = *a;
                let y = self.nodes[i].value.data();
                let c = self.nodes[i].value.last_dim();
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.len() / c {
                    let ys = &y[r * c..(r + 1) * c];
                    let ds = &dy[r * c..(r + 1) * c];
                    let dot: f64 = ys.iter().zip(ds).map(|(y, d)| y * d).sum();
                    for j in 0..c {
                        dx[r * c + j] = ys[j] * (ds[j] - dot);
                    }
                }
                self.accumulate(a, |g| {
                    for (g, d) in g.iter_mut().zip(&dx) {
                        *g += d;
                    }
                });
            }
            Op::RmsNorm { x, gain, eps } => {
                let (x, gain, eps) = (*x, *gain, *eps);
                let vx = self.nodes[x.0].value.data();
                let vg = self.nodes[gain.0].value.data();
                let d = self.nodes[gain.0].value.numel();
                let rows = vx.len() / d;
                let mut dx = vec![0.0; vx.len()];
                let mut dg = vec![0.0; d];
                for r in 0..rows {
                    let xs = &vx[r * d..(r + 1) * d];
                    let ds = &dy[r * d..(r + 1) * d];
                    let ms = xs.iter().map(|x| x * x).sum::<f64>() / d as f64;
                    let rms = (ms + eps).sqrt();
                    let inv = 1.0 / rms;
                    // weighted = sum_i dy_i * g_i * x_i
                    let weighted: f64 = ds
                        .iter()
                        .zip(vg)
                        .zip(xs)
                        .map(|((d, g), x)| d * g * x)
                        .sum();
                    let coef = weighted / (d as f64 * rms * rms * rms);
                    for j in 0..d {
                        dx[r * d + j] = inv * vg[j] * ds[j] - xs[j] * coef;
                        dg[j] += ds[j] * xs[j] * inv;
                    }
                }
                self.accumulate(x, |g| {
                    for (g, d) in g.iter_mut().zip(&dx) {
                        *g += d;
                    }
                });
                self.accumulate(gain, |g| {
                    for (g, d) in g.iter_mut().zip(&dg) {
                        *g += d;
                    }
                });
            }
            Op::Gather { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                let d = self.nodes[i].value.last_dim();
                self.accumulate(table, |g| {
                    for (t, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            g[id * d + j] += dy[t * d + j];
                        }
                    }
                });
            }
            Op::ColSlice { src, start, len } => {
                let (src, start, len) = (*src, *start, *len);
                let c = self.nodes[src.0].value.last_dim();
                let rows = self.nodes[src.0].value.rows();
                self.accumulate(src, |g| {
                    for r in 0..rows {
                        for j in 0..len {
                            g[r * c + start + j] += dy[r * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|&p| self.nodes[p.0].value.last_dim())
                    .collect();
                let total: usize = widths.iter().sum();
                let rows = self.nodes[i].value.rows();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    let off = offset;
                    self.accumulate(p, |g| {
                        for r in 0..rows {
                            for j in 0..w {
                                g[r * w + j] += dy[r * total + off + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Sum(a) => {
                let a = *a;
                let d = dy[0];
                self.accumulate(a, |g| {
                    for g in g.iter_mut() {
                        *g += d;
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                kept,
            } => {
                let logits = *logits;
                let targets = targets.clone();
                let kept = kept.clone();
                let vl = self.nodes[logits.0].value.data();
                let v = self.nodes[logits.0].value.last_dim();
                let scale = dy[0] / kept.len() as f64;
                let mut dl = vec![0.0; vl.len()];
                for &pos in &kept {
                    let row = &vl[pos * v..(pos + 1) * v];
                    let lse = log_sum_exp(row);
                    for j in 0..v {
                        dl[pos * v + j] = scale * (row[j] - lse).exp();
                    }
                    dl[pos * v + targets[pos]] -= scale;
                }
                self.accumulate(logits, |g| {
                    for (g, d) in g.iter_mut().zip(&dl) {
                        *g += d;
                    }
                });
            }
        }
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Value-level cross-entropy over `[T x V]` logits, same definition as the
/// taped op: mean of `-log softmax(logits)[target]` over non-ignored rows.
pub fn cross_entropy_value(
    logits: &Tensor,
    targets: &[usize],
    ignore_id: Option<usize>,
) -> Result<f64> {
    let (t, v) = (logits.rows(), logits.last_dim());
    if targets.len() != t {
        return Err(Error::ShapeMismatch {
            context: "cross_entropy targets",
            lhs: vec![t],
            rhs: vec![targets.len()],
        });
    }
    let mut total = 0.0;
    let mut kept = 0usize;
    for (pos, &tok) in targets.iter().enumerate() {
        if Some(tok) == ignore_id {
            continue;
        }
        if tok >= v {
            return Err(Error::IndexOutOfRange {
                what: "cross_entropy target",
                index: tok,
                limit: v,
            });
        }
        let row = &logits.data()[pos * v..(pos + 1) * v];
        total += log_sum_exp(row) - row[tok];
        kept += 1;
    }
    if kept == 0 {
        return Err(Error::EmptyLoss);
    }
    let loss = total / kept as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {loss}")));
    }
    Ok(loss)
}

/// Row-major dgemm wrapper: `c += a . b` with explicit (row, col) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
) {
    debug_assert!(c.len() == m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: Vec<usize>, data: Vec<f64>) -> TapeId {
        let mut t = Tensor::from_vec(shape, data).unwrap();
        t.set_requires_grad(true);
        tape.leaf(&t)
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = leaf(&mut tape, vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let a = leaf(&mut tape, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let c = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_projector_selects_rows() {
        let mut tape = Tape::new();
        let p = leaf(&mut tape, vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]);
        let a = leaf(&mut tape, vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let c = tape.matmul(p, a).unwrap();
        assert_eq!(tape.value(c).data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 3], vec![0.0; 6]);
        let b = leaf(&mut tape, vec![2, 2], vec![0.0; 4]);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    // Central finite differences on sum(A.B) wrt A at A=[[1,2]], B=[[3],[4]].
    // f(A) = A00*3 + A01*4, so numerically d/dA = [3, 4] to machine precision.
    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let h = 1e-6;
        let f = |a00: f64, a01: f64| a00 * 3.0 + a01 * 4.0;
        let fd = [
            (f(1.0 + h, 2.0) - f(1.0 - h, 2.0)) / (2.0 * h),
            (f(1.0, 2.0 + h) - f(1.0, 2.0 - h)) / (2.0 * h),
        ];

        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![1, 2], vec![1.0, 2.0]);
        let b = leaf(&mut tape, vec![2, 1], vec![3.0, 4.0]);
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum(c);
        tape.backward(loss).unwrap();
        let grad = tape.grad(a).unwrap();
        for (g, n) in grad.iter().zip(&fd) {
            assert!((g - n).abs() < 1e-5, "analytic {g} vs fd {n}");
        }
        assert_eq!(grad, &[3.0, 4.0]);
    }

    #[test]
    fn matmul_nt_agrees_with_explicit_transpose() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = leaf(&mut tape, vec![2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.0, -2.0]);
        let c = tape.matmul_nt(a, b).unwrap();
        // rows of a dotted with rows of b
        let expect = [
            1.0 * 0.5 + 2.0 * -1.0 + 3.0 * 2.0,
            1.0 * 1.5 + 2.0 * 0.0 + 3.0 * -2.0,
            4.0 * 0.5 + 5.0 * -1.0 + 6.0 * 2.0,
            4.0 * 1.5 + 5.0 * 0.0 + 6.0 * -2.0,
        ];
        for (got, want) in tape.value(c).data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_uniform_input() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 3], vec![0.0, 0.0, 0.0]);
        let y = tape.softmax(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_stable_under_large_shift() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 2], vec![1000.0, 1000.0]);
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_closed_form() {
        let mut tape = Tape::new();
        let x = leaf(
            &mut tape,
            vec![1, 3],
            vec![1.0_f64.ln(), 2.0_f64.ln(), 3.0_f64.ln()],
        );
        let y = tape.softmax(x).unwrap();
        let got = tape.value(y).data();
        for (g, want) in got.iter().zip(&[1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((g - want).abs() < 1e-12);
        }
    }

    #[test]
    fn rms_norm_hand_computed() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 2], vec![3.0, 4.0]);
        let g = leaf(&mut tape, vec![2], vec![1.0, 1.0]);
        let y = tape.rms_norm(x, g, 0.0).unwrap();
        let rms = (12.5_f64).sqrt();
        let got = tape.value(y).data();
        assert!((got[0] - 3.0 / rms).abs() < 1e-12);
        assert!((got[1] - 4.0 / rms).abs() < 1e-12);
    }

    #[test]
    fn rms_norm_constant_input_gives_ones() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 4], vec![2.5; 4]);
        let g = leaf(&mut tape, vec![4], vec![1.0; 4]);
        let y = tape.rms_norm(x, g, 0.0).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rms_norm_zero_gain_gives_zeros() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 3], vec![1.0, -2.0, 0.5]);
        let g = leaf(&mut tape, vec![3], vec![0.0; 3]);
        let y = tape.rms_norm(x, g, 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_perfect_prediction_limit() {
        let mut tape = Tape::new();
        // one-hot aligned logits with large magnitude approach zero loss
        let x = leaf(&mut tape, vec![1, 3], vec![50.0, 0.0, 0.0]);
        let loss = tape.cross_entropy(x, &[0], None).unwrap();
        assert!(tape.value(loss).scalar_value().unwrap() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2, 4], vec![0.0; 8]);
        let loss = tape.cross_entropy(x, &[1, 3], None).unwrap();
        let got = tape.value(loss).scalar_value().unwrap();
        assert!((got - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_all_ignored_is_empty_loss() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2, 4], vec![0.0; 8]);
        let err = tape.cross_entropy(x, &[9, 9], Some(9)).unwrap_err();
        assert!(matches!(err, Error::EmptyLoss));
    }

    #[test]
    fn cross_entropy_out_of_range_target() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 4], vec![0.0; 4]);
        let err = tape.cross_entropy(x, &[4], None).unwrap_err();
        assert!(matches!(err, Error::IndexOutOfRange { .. }));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3], vec![5.0, -1.0, 2.0]);
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_quadratic() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn using_a_tensor_twice_sums_per_use_gradients() {
        // loss = sum(x) + sum(2x): grad should be 1 + 2 = 3 everywhere
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 1.0]);
        let s1 = tape.sum(x);
        let scaled = tape.scale(x, 2.0);
        let s2 = tape.sum(scaled);
        let loss = tape.add(s1, s2).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        let c = tape.constant(Tensor::from_vec(vec![2], vec![3.0, 4.0]).unwrap());
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 4.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn gather_scatters_gradient_rows() {
        let mut tape = Tape::new();
        let table = leaf(&mut tape, vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = tape.gather(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(out).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = tape.sum(out);
        tape.backward(loss).unwrap();
        // row 2 used twice, row 0 once, row 1 never
        assert_eq!(tape.grad(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn col_slice_and_concat_round_trip() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2, 4], (0..8).map(|v| v as f64).collect());
        let a = tape.col_slice(x, 0, 2).unwrap();
        let b = tape.col_slice(x, 2, 2).unwrap();
        let y = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 8]);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn softmax_of(data: Vec<f64>) -> Vec<f64> {
            let mut tape = Tape::new();
            let n = data.len();
            let x = leaf(&mut tape, vec![1, n], data);
            let y = tape.softmax(x).unwrap();
            tape.value(y).data().to_vec()
        }

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(
                row in proptest::collection::vec(-50.0..50.0f64, 1..12)
            ) {
                let y = softmax_of(row);
                let sum: f64 = y.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                prop_assert!(y.iter().all(|&v| v >= 0.0));
            }

            #[test]
            fn softmax_invariant_to_additive_shift(
                row in proptest::collection::vec(-50.0..50.0f64, 1..12),
                shift in -100.0..100.0f64
            ) {
                let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
                let a = softmax_of(row);
                let b = softmax_of(shifted);
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }

            #[test]
            fn rms_norm_invariant_to_positive_scale(
                row in proptest::collection::vec(-10.0..10.0f64, 2..10),
                scale in 1e-3..1e3f64
            ) {
                prop_assume!(row.iter().any(|&v| v != 0.0));
                let n = row.len();
                let norm = |data: Vec<f64>| {
                    let mut tape = Tape::new();
                    let x = leaf(&mut tape, vec![1, n], data);
                    let g = leaf(&mut tape, vec![n], vec![1.0; n]);
                    let y = tape.rms_norm(x, g, 0.0).unwrap();
                    tape.value(y).data().to_vec()
                };
                let a = norm(row.clone());
                let b = norm(row.iter().map(|v| v * scale).collect());
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}
