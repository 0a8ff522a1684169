//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Nodes are appended in execution order, so the tape order is already a
//! topological order and the backward pass is a single reverse sweep that
//! visits each node exactly once. One tape per computation; independent
//! computations may run on independent threads.

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, f64),
    AddRow(VarId, VarId),
    MulRow(VarId, VarId),
    Matmul(VarId, VarId),
    Transpose(VarId),
    Softmax(VarId, Axis),
    Gelu(VarId),
    LayerNorm { x: VarId, gain: VarId, bias: VarId },
    Embedding { table: VarId, ids: Vec<usize> },
    ConcatRows(Vec<VarId>),
    SliceRows { x: VarId, start: usize, end: usize },
    ConcatCols(Vec<VarId>),
    SliceCols { x: VarId, start: usize, end: usize },
    SumAll(VarId),
    MeanAll(VarId),
    MseLoss(VarId, VarId),
    CrossEntropyMasked { logits: VarId, targets: Vec<usize>, mask: Vec<bool> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Per-node gradient accumulators produced by [`Tape::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. the given node; zeros if the node does
    /// not influence the loss.
    pub fn get(&self, id: VarId, tape: &Tape<T>) -> Tensor<T> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(id).shape()),
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> VarId {
        debug_assert!(value.all_finite(), "non-finite value produced by op");
        self.nodes.push(Node { value, op });
        VarId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> VarId {
        self.push(value, Op::Leaf)
    }

    fn same_shape(&self, a: VarId, b: VarId, op: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{op}: shapes {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_shape(a, b, "add")?;
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_shape(a, b, "sub")?;
        let data =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect();
        let v = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_shape(a, b, "mul")?;
        let data =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let v = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Multiply by a compile-time constant; the scalar is not differentiated.
    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let cv = T::from_f64(c);
        let v = self.value(a).map(|x| x * cv);
        self.push(v, Op::Scale(a, c))
    }

    fn row_compat(&self, a: VarId, r: VarId, op: &str) -> Result<usize> {
        let (_, n) = self.value(a).dims2()?;
        let rs = self.value(r).shape();
        if rs != [n] {
            return Err(Error::Dimension(format!(
                "{op}: row vector shape {:?} vs matrix columns {}",
                rs, n
            )));
        }
        Ok(n)
    }

    /// Add a length-n vector to every row of an m x n matrix.
    pub fn add_row(&mut self, a: VarId, r: VarId) -> Result<VarId> {
        let n = self.row_compat(a, r, "add_row")?;
        let rd = self.value(r).data().to_vec();
        let mut v = self.value(a).clone();
        for row in v.data_mut().chunks_mut(n) {
            for (x, &b) in row.iter_mut().zip(&rd) {
                *x += b;
            }
        }
        Ok(self.push(v, Op::AddRow(a, r)))
    }

    /// Multiply every row of an m x n matrix elementwise by a length-n vector.
    pub fn mul_row(&mut self, a: VarId, r: VarId) -> Result<VarId> {
        let n = self.row_compat(a, r, "mul_row")?;
        let rd = self.value(r).data().to_vec();
        let mut v = self.value(a).clone();
        for row in v.data_mut().chunks_mut(n) {
            for (x, &b) in row.iter_mut().zip(&rd) {
                *x *= b;
            }
        }
        Ok(self.push(v, Op::MulRow(a, r)))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = matmul_into(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: VarId) -> Result<VarId> {
        let (m, n) = self.value(a).dims2()?;
        let ad = self.value(a).data();
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = ad[i * n + j];
            }
        }
        let v = Tensor::new(vec![n, m], data)?;
        Ok(self.push(v, Op::Transpose(a)))
    }

    /// Numerically stable softmax along the given axis of a matrix.
    pub fn softmax(&mut self, x: VarId, axis: Axis) -> Result<VarId> {
        let (m, n) = self.value(x).dims2()?;
        let xd = self.value(x).data();
        let mut data = vec![T::zero(); m * n];
        let (outer, inner, so, si) = match axis {
            Axis::Rows => (m, n, n, 1),
            Axis::Cols => (n, m, 1, n),
        };
        for o in 0..outer {
            let idx = |i: usize| o * so + i * si;
            let mut mx = xd[idx(0)];
            for i in 1..inner {
                if xd[idx(i)] > mx {
                    mx = xd[idx(i)];
                }
            }
            let mut sum = T::zero();
            for i in 0..inner {
                let e = (xd[idx(i)] - mx).exp();
                data[idx(i)] = e;
                sum += e;
            }
            for i in 0..inner {
                data[idx(i)] = data[idx(i)] / sum;
            }
        }
        let v = Tensor::new(vec![m, n], data)?;
        Ok(self.push(v, Op::Softmax(x, axis)))
    }

    pub fn gelu(&mut self, x: VarId) -> VarId {
        let v = self.value(x).map(|u| gelu_fwd(u));
        self.push(v, Op::Gelu(x))
    }

    /// Per-row layer normalization with learned gain/bias (each length n).
    /// Variance floor LAYER_NORM_EPS, so a constant row normalizes to the
    /// bias vector.
    pub fn layer_norm(&mut self, x: VarId, gain: VarId, bias: VarId) -> Result<VarId> {
        let n = self.row_compat(x, gain, "layer_norm")?;
        self.row_compat(x, bias, "layer_norm")?;
        let gd = self.value(gain).data().to_vec();
        let bd = self.value(bias).data().to_vec();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(n) {
            let (mu, sigma) = row_moments(row);
            for (j, x) in row.iter_mut().enumerate() {
                *x = (*x - mu) / sigma * gd[j] + bd[j];
            }
        }
        Ok(self.push(v, Op::LayerNorm { x, gain, bias }))
    }

    /// Gather rows of `table` by index.
    pub fn embedding(&mut self, table: VarId, ids: &[usize]) -> Result<VarId> {
        let (vocab, d) = self.value(table).dims2()?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Argument(format!("embedding id {} out of range {}", bad, vocab)));
        }
        let td = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let v = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(v, Op::Embedding { table, ids: ids.to_vec() }))
    }

    pub fn concat_rows(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::Argument("concat_rows of zero parts".into()));
        }
        let (_, n) = self.value(parts[0]).dims2()?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (m, pn) = self.value(p).dims2()?;
            if pn != n {
                return Err(Error::Dimension("concat_rows: column mismatch".into()));
            }
            rows += m;
            data.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::new(vec![rows, n], data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: VarId, start: usize, end: usize) -> Result<VarId> {
        let (m, n) = self.value(x).dims2()?;
        if start > end || end > m {
            return Err(Error::Argument(format!("slice_rows {start}..{end} of {m}")));
        }
        let data = self.value(x).data()[start * n..end * n].to_vec();
        let v = Tensor::new(vec![end - start, n], data)?;
        Ok(self.push(v, Op::SliceRows { x, start, end }))
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::Argument("concat_cols of zero parts".into()));
        }
        let (m, _) = self.value(parts[0]).dims2()?;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pm, pn) = self.value(p).dims2()?;
                if pm != m {
                    return Err(Error::Dimension("concat_cols: row mismatch".into()));
                }
                Ok(pn)
            })
            .collect::<Result<_>>()?;
        let total: usize = widths.iter().sum();
        let mut data = vec![T::zero(); m * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = self.value(p).data();
            for i in 0..m {
                data[i * total + off..i * total + off + w].copy_from_slice(&pd[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let v = Tensor::new(vec![m, total], data)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: VarId, start: usize, end: usize) -> Result<VarId> {
        let (m, n) = self.value(x).dims2()?;
        if start > end || end > n {
            return Err(Error::Argument(format!("slice_cols {start}..{end} of {n}")));
        }
        let xd = self.value(x).data();
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&xd[i * n + start..i * n + end]);
        }
        let v = Tensor::new(vec![m, w], data)?;
        Ok(self.push(v, Op::SliceCols { x, start, end }))
    }

    pub fn sum_all(&mut self, x: VarId) -> VarId {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &b| a + b);
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: VarId) -> VarId {
        let n = T::from_f64(self.value(x).numel().max(1) as f64);
        let s = self.value(x).data().iter().fold(T::zero(), |a, &b| a + b) / n;
        self.push(Tensor::scalar(s), Op::MeanAll(x))
    }

    /// Mean over all elements of the squared difference.
    pub fn mse_loss(&mut self, pred: VarId, target: VarId) -> Result<VarId> {
        self.same_shape(pred, target, "mse_loss")?;
        let n = T::from_f64(self.value(pred).numel().max(1) as f64);
        let s = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .fold(T::zero(), |acc, (&p, &t)| acc + (p - t) * (p - t))
            / n;
        Ok(self.push(Tensor::scalar(s), Op::MseLoss(pred, target)))
    }

    /// Cross-entropy over masked rows only; unmasked rows contribute exactly
    /// zero loss and zero gradient. Returns 0 when no row is masked.
    pub fn cross_entropy_masked(
        &mut self,
        logits: VarId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<VarId> {
        let (m, n) = self.value(logits).dims2()?;
        if targets.len() != m || mask.len() != m {
            return Err(Error::Dimension("cross_entropy_masked: row count mismatch".into()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Argument(format!("target {} out of vocab {}", bad, n)));
        }
        let count = mask.iter().filter(|&&b| b).count();
        let ld = self.value(logits).data();
        let mut total = 0.0f64;
        for i in 0..m {
            if !mask[i] {
                continue;
            }
            let row = &ld[i * n..(i + 1) * n];
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| if b > a { b } else { a });
            let lse = row.iter().map(|&x| (x - mx).to_f64().exp()).sum::<f64>().ln() + mx.to_f64();
            total += lse - row[targets[i]].to_f64();
        }
        let v = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.push(
            Tensor::scalar(T::from_f64(v)),
            Op::CrossEntropyMasked { logits, targets: targets.to_vec(), mask: mask.to_vec() },
        ))
    }

    /// Reverse sweep from a scalar loss. Each node is visited exactly once.
    pub fn backward(&self, loss: VarId) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for id in (0..=loss.0).rev() {
            let Some(gy) = grads[id].take() else { continue };
            self.accumulate_parents(VarId(id), &gy, &mut grads)?;
            grads[id] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], id: VarId, delta: Tensor<T>) {
        match &mut grads[id.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate_parents(
        &self,
        id: VarId,
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match &self.nodes[id.0].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, gy.clone());
                self.acc(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, gy.clone());
                self.acc(grads, *b, gy.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let ga = elementwise_mul(gy, self.value(*b));
                let gb = elementwise_mul(gy, self.value(*a));
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::Scale(a, c) => {
                let cv = T::from_f64(*c);
                self.acc(grads, *a, gy.map(|x| x * cv));
            }
            Op::AddRow(a, r) => {
                self.acc(grads, *a, gy.clone());
                self.acc(grads, *r, col_sums(gy));
            }
            Op::MulRow(a, r) => {
                let n = self.value(*r).numel();
                let rd = self.value(*r).data();
                let mut ga = gy.clone();
                for row in ga.data_mut().chunks_mut(n) {
                    for (x, &b) in row.iter_mut().zip(rd) {
                        *x *= b;
                    }
                }
                self.acc(grads, *a, ga);
                let prod = elementwise_mul(gy, self.value(*a));
                self.acc(grads, *r, col_sums(&prod));
            }
            Op::Matmul(a, b) => {
                let bt = transpose_t(self.value(*b));
                let at = transpose_t(self.value(*a));
                self.acc(grads, *a, matmul_into(gy, &bt)?);
                self.acc(grads, *b, matmul_into(&at, gy)?);
            }
            Op::Transpose(a) => {
                self.acc(grads, *a, transpose_t(gy));
            }
            Op::Softmax(x, axis) => {
                let y = self.value(id);
                let (m, n) = y.dims2()?;
                let (outer, inner, so, si) = match axis {
                    Axis::Rows => (m, n, n, 1),
                    Axis::Cols => (n, m, 1, n),
                };
                let yd = y.data();
                let gd = gy.data();
                let mut gx = vec![T::zero(); m * n];
                for o in 0..outer {
                    let idx = |i: usize| o * so + i * si;
                    let mut dot = T::zero();
                    for i in 0..inner {
                        dot += gd[idx(i)] * yd[idx(i)];
                    }
                    for i in 0..inner {
                        gx[idx(i)] = yd[idx(i)] * (gd[idx(i)] - dot);
                    }
                }
                self.acc(grads, *x, Tensor::new(vec![m, n], gx)?);
            }
            Op::Gelu(x) => {
                let xd = self.value(*x).data();
                let data = gy.data().iter().zip(xd).map(|(&g, &u)| g * gelu_bwd(u)).collect();
                self.acc(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), data)?);
            }
            Op::LayerNorm { x, gain, bias } => {
                let (m, n) = self.value(*x).dims2()?;
                let xd = self.value(*x).data();
                let gd = self.value(*gain).data();
                let gyd = gy.data();
                let mut gx = vec![T::zero(); m * n];
                let mut ggain = vec![T::zero(); n];
                let mut gbias = vec![T::zero(); n];
                let nn = T::from_f64(n as f64);
                for i in 0..m {
                    let row = &xd[i * n..(i + 1) * n];
                    let (mu, sigma) = row_moments(row);
                    let gyr = &gyd[i * n..(i + 1) * n];
                    let mut mean_gdy = T::zero();
                    let mut mean_gdy_xh = T::zero();
                    for j in 0..n {
                        let xh = (row[j] - mu) / sigma;
                        let gdy = gd[j] * gyr[j];
                        mean_gdy += gdy;
                        mean_gdy_xh += gdy * xh;
                        ggain[j] += gyr[j] * xh;
                        gbias[j] += gyr[j];
                    }
                    mean_gdy /= nn;
                    mean_gdy_xh /= nn;
                    for j in 0..n {
                        let xh = (row[j] - mu) / sigma;
                        gx[i * n + j] = (gd[j] * gyr[j] - mean_gdy - xh * mean_gdy_xh) / sigma;
                    }
                }
                self.acc(grads, *x, Tensor::new(vec![m, n], gx)?);
                self.acc(grads, *gain, Tensor::new(vec![n], ggain)?);
                self.acc(grads, *bias, Tensor::new(vec![n], gbias)?);
            }
            Op::Embedding { table, ids } => {
                let (vocab, d) = self.value(*table).dims2()?;
                let mut gt = vec![T::zero(); vocab * d];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[i * d + j] += gy.data()[r * d + j];
                    }
                }
                self.acc(grads, *table, Tensor::new(vec![vocab, d], gt)?);
            }
            Op::ConcatRows(parts) => {
                let (_, n) = gy.dims2()?;
                let mut start = 0;
                for &p in parts {
                    let (m, _) = self.value(p).dims2()?;
                    let data = gy.data()[start * n..(start + m) * n].to_vec();
                    self.acc(grads, p, Tensor::new(vec![m, n], data)?);
                    start += m;
                }
            }
            Op::SliceRows { x, start, end } => {
                let (m, n) = self.value(*x).dims2()?;
                let mut gx = vec![T::zero(); m * n];
                gx[start * n..end * n].copy_from_slice(gy.data());
                self.acc(grads, *x, Tensor::new(vec![m, n], gx)?);
            }
            Op::ConcatCols(parts) => {
                let (m, total) = gy.dims2()?;
                let mut off = 0;
                for &p in parts {
                    let (_, w) = self.value(p).dims2()?;
                    let mut data = Vec::with_capacity(m * w);
                    for i in 0..m {
                        data.extend_from_slice(&gy.data()[i * total + off..i * total + off + w]);
                    }
                    self.acc(grads, p, Tensor::new(vec![m, w], data)?);
                    off += w;
                }
            }
            Op::SliceCols { x, start, end } => {
                let (m, n) = self.value(*x).dims2()?;
                let w = end - start;
                let mut gx = vec![T::zero(); m * n];
                for i in 0..m {
                    gx[i * n + start..i * n + end].copy_from_slice(&gy.data()[i * w..(i + 1) * w]);
                }
                self.acc(grads, *x, Tensor::new(vec![m, n], gx)?);
            }
            Op::SumAll(x) => {
                let g = gy.item();
                self.acc(grads, *x, Tensor::full(self.value(*x).shape(), g));
            }
            Op::MeanAll(x) => {
                let n = T::from_f64(self.value(*x).numel().max(1) as f64);
                let g = gy.item() / n;
                self.acc(grads, *x, Tensor::full(self.value(*x).shape(), g));
            }
            Op::MseLoss(pred, target) => {
                let n = T::from_f64(self.value(*pred).numel().max(1) as f64);
                let g = gy.item();
                let two = T::from_f64(2.0);
                let data: Vec<T> = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(self.value(*target).data())
                    .map(|(&p, &t)| two * (p - t) / n * g)
                    .collect();
                let gp = Tensor::new(self.value(*pred).shape().to_vec(), data)?;
                self.acc(grads, *target, gp.map(|x| -x));
                self.acc(grads, *pred, gp);
            }
            Op::CrossEntropyMasked { logits, targets, mask } => {
                let (m, n) = self.value(*logits).dims2()?;
                let count = mask.iter().filter(|&&b| b).count();
                let mut gl = vec![T::zero(); m * n];
                if count > 0 {
                    let scale = gy.item() / T::from_f64(count as f64);
                    let ld = self.value(*logits).data();
                    for i in 0..m {
                        if !mask[i] {
                            continue;
                        }
                        let row = &ld[i * n..(i + 1) * n];
                        let mx =
                            row.iter().fold(T::neg_infinity(), |a, &b| if b > a { b } else { a });
                        let mut sum = T::zero();
                        let mut exps = vec![T::zero(); n];
                        for j in 0..n {
                            exps[j] = (row[j] - mx).exp();
                            sum += exps[j];
                        }
                        for j in 0..n {
                            let p = exps[j] / sum;
                            let y = if j == targets[i] { T::one() } else { T::zero() };
                            gl[i * n + j] = (p - y) * scale;
                        }
                    }
                }
                self.acc(grads, *logits, Tensor::new(vec![m, n], gl)?);
            }
        }
        Ok(())
    }
}

fn elementwise_mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked")
}

fn transpose_t<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let (m, n) = a.dims2().expect("matrix");
    let ad = a.data();
    let mut data = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            data[j * m + i] = ad[i * n + j];
        }
    }
    Tensor::new(vec![n, m], data).expect("shape")
}

fn col_sums<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let (m, n) = a.dims2().expect("matrix");
    let mut s = vec![T::zero(); n];
    for i in 0..m {
        for j in 0..n {
            s[j] += a.data()[i * n + j];
        }
    }
    Tensor::new(vec![n], s).expect("shape")
}

fn row_moments<T: Scalar>(row: &[T]) -> (T, T) {
    let n = T::from_f64(row.len() as f64);
    let mu = row.iter().fold(T::zero(), |a, &b| a + b) / n;
    let var = row.iter().fold(T::zero(), |a, &b| a + (b - mu) * (b - mu)) / n;
    let sigma = (var + T::from_f64(LAYER_NORM_EPS)).sqrt();
    (mu, sigma)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_bwd<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}

/// Sinusoidal embedding of a scalar time value: even slots sin, odd slots
/// cos, geometric frequency ladder. embed(0, d) = [0, 1, 0, 1, ...].
pub fn sinusoidal_embed<T: Scalar>(t: f64, dim: usize) -> Tensor<T> {
    let half = dim.div_ceil(2);
    let mut data = vec![T::zero(); dim];
    for i in 0..half {
        let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        let angle = t * freq;
        data[2 * i] = T::from_f64(angle.sin());
        if 2 * i + 1 < dim {
            data[2 * i + 1] = T::from_f64(angle.cos());
        }
    }
    Tensor::new(vec![1, dim], data).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetry_and_shift_invariance() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap());
        let y = tape.softmax(x, Axis::Rows).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let big = tape.leaf(Tensor::from_rows(&[vec![1000.0, 1000.0]]).unwrap());
        let yb = tape.softmax(big, Axis::Rows).unwrap();
        assert_eq!(tape.value(yb).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_hand_example() {
        // [0, ln 3] -> [0.25, 0.75]
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![0.0, 3f64.ln()]]).unwrap());
        let y = tape.softmax(x, Axis::Rows).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-12);
        assert!((d[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(
            Tensor::from_rows(&[vec![1.0, -2.0, 0.5], vec![10.0, 10.0, -3.0]]).unwrap(),
        );
        let y = tape.softmax(x, Axis::Rows).unwrap();
        for row in tape.value(y).data().chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![3.0, 3.0, 3.0]]).unwrap());
        let g = tape.leaf(Tensor::new(vec![3], vec![1.0; 3]).unwrap());
        let b = tape.leaf(Tensor::zeros(&[3]));
        let y = tape.layer_norm(x, g, b).unwrap();
        for &v in tape.value(y).data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn sinusoidal_embed_at_zero() {
        let e = sinusoidal_embed::<f64>(0.0, 8);
        assert_eq!(e.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn masked_cross_entropy_empty_mask_is_zero() {
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, -1.0]]).unwrap());
        let loss = tape.cross_entropy_masked(l, &[0, 1], &[false, false]).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(l, &tape).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn matmul_then_sum_backward_matches_ones_times_bt() {
        // d sum(A B) / dA = 1 B^T
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = tape.leaf(Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum_all(c);
        let grads = tape.backward(loss).unwrap();
        let ga = grads.get(a, &tape);
        assert_eq!(ga.data(), &[11.0, 15.0, 11.0, 15.0]);
    }
}
