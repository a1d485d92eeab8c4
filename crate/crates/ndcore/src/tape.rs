//! Reverse-mode differentiation tape over dense row-major float64 tensors.
//!
//! Every operation appends a node; node ids are therefore already in
//! topological order and the backward pass is a single reverse sweep.
//! Repeated `backward` calls accumulate into existing gradients; build a
//! fresh tape per training step to reset.

use crate::{NdError, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    /// [m,k] x [k,n] -> [m,n]
    MatMul(TensorId, TensorId),
    /// [m,k] x [n,k]^T -> [m,n]
    MatMulTransB(TensorId, TensorId),
    /// [.., n] + [n], broadcast over leading axes
    AddRow(TensorId, TensorId),
    Sigmoid(TensorId),
    Tanh(TensorId),
    Relu(TensorId),
    /// softmax along the last axis
    Softmax(TensorId),
    /// zero-mean unit-variance along the last axis
    LayerNorm(TensorId),
    /// concatenate along the last axis; identical leading dims
    ConcatLast(Vec<TensorId>),
    SliceLast(TensorId, usize, usize),
    /// row lookup into a [v, e] table
    Gather(TensorId, Vec<usize>),
    Sum(TensorId),
    Mean(TensorId),
    Reshape(TensorId),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    /// op-specific saved state (per-row inverse stddev for layer norm)
    aux: Vec<f64>,
    needs_grad: bool,
}

/// The differentiation tape. All tensors live here; [`TensorId`]s index it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// (rows, cols) view of a shape collapsed onto its last axis.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    (numel(shape) / cols.max(1), cols)
}

const LN_EPS: f64 = 1e-8;

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

    pub fn shape(&self, t: TensorId) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn value(&self, t: TensorId) -> &[f64] {
        &self.nodes[t.0].value
    }

    /// Gradient of the last `backward` target w.r.t. `t`. Zero if the
    /// tensor was not reached (or not differentiable).
    pub fn grad(&self, t: TensorId) -> Vec<f64> {
        match &self.grads[t.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[t.0].value.len()],
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, aux: Vec<f64>) -> TensorId {
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::MatMulTransB(a, b)
            | Op::AddRow(a, b) => self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad,
            Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Softmax(a)
            | Op::LayerNorm(a)
            | Op::SliceLast(a, _, _)
            | Op::Gather(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a) => self.nodes[a.0].needs_grad,
            Op::ConcatLast(xs) => xs.iter().any(|x| self.nodes[x.0].needs_grad),
        };
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            aux,
            needs_grad,
        });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    /// Insert a leaf tensor. `differentiable` marks it as a parameter
    /// whose gradient will be tracked.
    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>, differentiable: bool) -> Result<TensorId> {
        if numel(shape) != data.len() {
            return Err(NdError::Shape {
                op: "leaf",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        let id = self.push(Op::Leaf, shape.to_vec(), data, Vec::new());
        self.nodes[id.0].needs_grad = differentiable;
        Ok(id)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.leaf(&[1], vec![v], false).expect("scalar leaf")
    }

    fn binary_same_shape(&mut self, op_name: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(NdError::Shape {
                op: op_name,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("add", a, b)?;
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Op::Add(a, b), self.nodes[a.0].shape.clone(), v, Vec::new()))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("sub", a, b)?;
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(Op::Sub(a, b), self.nodes[a.0].shape.clone(), v, Vec::new()))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("mul", a, b)?;
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Op::Mul(a, b), self.nodes[a.0].shape.clone(), v, Vec::new()))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let v: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x * c).collect();
        self.push(Op::Scale(a, c), self.nodes[a.0].shape.clone(), v, Vec::new())
    }

    /// [m,k] x [k,n] -> [m,n]
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NdError::Shape {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut v = vec![0.0; m * n];
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        for i in 0..m {
            for p in 0..k {
                let x = av[i * k + p];
                for j in 0..n {
                    v[i * n + j] += x * bv[p * n + j];
                }
            }
        }
        Ok(self.push(Op::MatMul(a, b), vec![m, n], v, Vec::new()))
    }

    /// [m,k] x [n,k]^T -> [m,n]; the natural layout for `x . w^T`.
    pub fn matmul_tb(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(NdError::Shape {
                op: "matmul_tb",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut v = vec![0.0; m * n];
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += av[i * k + p] * bv[j * k + p];
                }
                v[i * n + j] = acc;
            }
        }
        Ok(self.push(Op::MatMulTransB(a, b), vec![m, n], v, Vec::new()))
    }

    /// Broadcast-add a row vector along the last axis.
    pub fn add_row(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (rows, cols) = rows_cols(&self.nodes[a.0].shape);
        if self.nodes[b.0].shape != [cols] {
            return Err(NdError::Shape {
                op: "add_row",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut v = self.nodes[a.0].value.clone();
        let bv = &self.nodes[b.0].value;
        for r in 0..rows {
            for c in 0..cols {
                v[r * cols + c] += bv[c];
            }
        }
        Ok(self.push(Op::AddRow(a, b), self.nodes[a.0].shape.clone(), v, Vec::new()))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        self.push(Op::Sigmoid(a), self.nodes[a.0].shape.clone(), v, Vec::new())
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let v: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x.tanh()).collect();
        self.push(Op::Tanh(a), self.nodes[a.0].shape.clone(), v, Vec::new())
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let v: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x.max(0.0)).collect();
        self.push(Op::Relu(a), self.nodes[a.0].shape.clone(), v, Vec::new())
    }

    /// Numerically stable softmax along the last axis.
    pub fn softmax(&mut self, a: TensorId) -> TensorId {
        let (rows, cols) = rows_cols(&self.nodes[a.0].shape);
        let av = &self.nodes[a.0].value;
        let mut v = vec![0.0; av.len()];
        for r in 0..rows {
            let row = &av[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..cols {
                let e = (row[c] - m).exp();
                v[r * cols + c] = e;
                z += e;
            }
            for c in 0..cols {
                v[r * cols + c] /= z;
            }
        }
        self.push(Op::Softmax(a), self.nodes[a.0].shape.clone(), v, Vec::new())
    }

    /// Normalize each last-axis slice to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: TensorId) -> TensorId {
        let (rows, cols) = rows_cols(&self.nodes[a.0].shape);
        let av = &self.nodes[a.0].value;
        let mut v = vec![0.0; av.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &av[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                v[r * cols + c] = (row[c] - mean) * is;
            }
        }
        self.push(Op::LayerNorm(a), self.nodes[a.0].shape.clone(), v, inv_std)
    }

    /// Concatenate along the last axis. All inputs must share leading dims.
    pub fn concat_last(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(NdError::Contract("concat of zero tensors".into()));
        }
        let lead: Vec<usize> = {
            let s = &self.nodes[parts[0].0].shape;
            s[..s.len() - 1].to_vec()
        };
        let mut total_cols = 0;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            if s[..s.len() - 1] != lead[..] {
                return Err(NdError::Shape {
                    op: "concat_last",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: s.clone(),
                });
            }
            total_cols += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product::<usize>().max(1);
        let mut v = vec![0.0; rows * total_cols];
        for r in 0..rows {
            let mut at = 0;
            for p in parts {
                let cols = *self.nodes[p.0].shape.last().unwrap();
                let pv = &self.nodes[p.0].value[r * cols..(r + 1) * cols];
                v[r * total_cols + at..r * total_cols + at + cols].copy_from_slice(pv);
                at += cols;
            }
        }
        let mut shape = lead;
        shape.push(total_cols);
        Ok(self.push(Op::ConcatLast(parts.to_vec()), shape, v, Vec::new()))
    }

    /// Take `[start, start+len)` along the last axis.
    pub fn slice_last(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (rows, cols) = rows_cols(&self.nodes[a.0].shape);
        if start + len > cols {
            return Err(NdError::Shape {
                op: "slice_last",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: vec![start, len],
            });
        }
        let av = &self.nodes[a.0].value;
        let mut v = vec![0.0; rows * len];
        for r in 0..rows {
            v[r * len..(r + 1) * len].copy_from_slice(&av[r * cols + start..r * cols + start + len]);
        }
        let mut shape = self.nodes[a.0].shape.clone();
        *shape.last_mut().unwrap() = len;
        Ok(self.push(Op::SliceLast(a, start, len), shape, v, Vec::new()))
    }

    /// Row lookup into a `[v, e]` table; differentiable into the table.
    pub fn gather(&mut self, table: TensorId, indices: &[usize]) -> Result<TensorId> {
        let s = &self.nodes[table.0].shape;
        if s.len() != 2 {
            return Err(NdError::Shape {
                op: "gather",
                lhs: s.clone(),
                rhs: vec![],
            });
        }
        let (vsize, e) = (s[0], s[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= vsize) {
            return Err(NdError::Contract(format!(
                "gather index {bad} out of range for table of {vsize} rows"
            )));
        }
        let tv = &self.nodes[table.0].value;
        let mut v = vec![0.0; indices.len() * e];
        for (r, &i) in indices.iter().enumerate() {
            v[r * e..(r + 1) * e].copy_from_slice(&tv[i * e..(i + 1) * e]);
        }
        Ok(self.push(
            Op::Gather(table, indices.to_vec()),
            vec![indices.len(), e],
            v,
            Vec::new(),
        ))
    }

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let v = self.nodes[a.0].value.iter().sum::<f64>();
        self.push(Op::Sum(a), vec![1], vec![v], Vec::new())
    }

    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let n = self.nodes[a.0].value.len().max(1);
        let v = self.nodes[a.0].value.iter().sum::<f64>() / n as f64;
        self.push(Op::Mean(a), vec![1], vec![v], Vec::new())
    }

    /// Reinterpret the shape; element count must be preserved.
    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId> {
        if numel(shape) != self.nodes[a.0].value.len() {
            return Err(NdError::Shape {
                op: "reshape",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let v = self.nodes[a.0].value.clone();
        Ok(self.push(Op::Reshape(a), shape.to_vec(), v, Vec::new()))
    }

    /// Mean squared error between two same-shape tensors, as a scalar node.
    pub fn mse(&mut self, pred: TensorId, truth: TensorId) -> Result<TensorId> {
        let d = self.sub(pred, truth)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate across calls.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NdError::Contract(format!(
                "backward target must be scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        // Sweep into a fresh buffer so repeated backward calls accumulate
        // exactly once per call instead of re-propagating old gradients.
        let mut local: Vec<Option<Vec<f64>>> = vec![None; self.grads.len()];
        local[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match &local[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            let (nodes, grads) = (&self.nodes, &mut local);
            let node = &nodes[i];
            let mut acc = |t: TensorId, f: &mut dyn FnMut(&mut [f64])| {
                if nodes[t.0].needs_grad {
                    let slot = grads[t.0].get_or_insert_with(|| vec![0.0; nodes[t.0].value.len()]);
                    f(slot);
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(*a, &mut |d| {
                        for (dx, gx) in d.iter_mut().zip(&g) {
                            *dx += gx;
                        }
                    });
                    acc(*b, &mut |d| {
                        for (dx, gx) in d.iter_mut().zip(&g) {
                            *dx += gx;
                        }
                    });
                }
                Op::Sub(a, b) => {
                    acc(*a, &mut |d| {
                        for (dx, gx) in d.iter_mut().zip(&g) {
                            *dx += gx;
                        }
                    });
                    acc(*b, &mut |d| {
                        for (dx, gx) in d.iter_mut().zip(&g) {
                            *dx -= gx;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    acc(*a, &mut |d| {
                        for k in 0..d.len() {
                            d[k] += g[k] * bv[k];
                        }
                    });
                    acc(*b, &mut |d| {
                        for k in 0..d.len() {
                            d[k] += g[k] * av[k];
                        }
                    });
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(*a, &mut |d| {
                        for k in 0..d.len() {
                            d[k] += g[k] * c;
                        }
                    });
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                    let n = nodes[b.0].shape[1];
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    acc(*a, &mut |d| {
                        // dA = g . B^T
                        for i2 in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[i2 * n + j] * bv[p * n + j];
                                }
                                d[i2 * k + p] += s;
                            }
                        }
                    });
                    acc(*b, &mut |d| {
                        // dB = A^T . g
                        for p in 0..k {
                            for j in 0..n {
                                let mut s = 0.0;
                                for i2 in 0..m {
                                    s += av[i2 * k + p] * g[i2 * n + j];
                                }
                                d[p * n + j] += s;
                            }
                        }
                    });
                }
                Op::MatMulTransB(a, b) => {
                    let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                    let n = nodes[b.0].shape[0];
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    acc(*a, &mut |d| {
                        // dA = g . B
                        for i2 in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[i2 * n + j] * bv[j * k + p];
                                }
                                d[i2 * k + p] += s;
                            }
                        }
                    });
                    acc(*b, &mut |d| {
                        // dB = g^T . A
                        for j in 0..n {
                            for p in 0..k {
                                let mut s = 0.0;
                                for i2 in 0..m {
                                    s += g[i2 * n + j] * av[i2 * k + p];
                                }
                                d[j * k + p] += s;
                            }
                        }
                    });
                }
                Op::AddRow(a, b) => {
                    let (rows, cols) = rows_cols(&nodes[a.0].shape);
                    acc(*a, &mut |d| {
                        for k in 0..d.len() {
                            d[k] += g[k];
                        }
                    });
                    acc(*b, &mut |d| {
                        for r in 0..rows {
                            for c in 0..cols {
                                d[c] += g[r * cols + c];
                            }
                        }
                    });
                }
                Op::Sigmoid(a) => {
                    let yv = &node.value;
                    acc(*a, &mut |d| {
                        for k in 0..d.len() {
                            d[k] += g[k] * yv[k] * (1.0 - yv[k]);
                        }
                    });
                }
                Op::Tanh(a) => {
                    let yv = &node.value;
                    acc(*a, &mut |d| {
                        for k in 0..d.len() {
                            d[k] += g[k] * (1.0 - yv[k] * yv[k]);
                        }
                    });
                }
                Op::Relu(a) => {
                    let xv = &nodes[a.0].value;
                    acc(*a, &mut |d| {
                        for k in 0..d.len() {
                            if xv[k] > 0.0 {
                                d[k] += g[k];
                            }
                        }
                    });
                }
                Op::Softmax(a) => {
                    let (rows, cols) = rows_cols(&node.shape);
                    let yv = &node.value;
                    acc(*a, &mut |d| {
                        for r in 0..rows {
                            let base = r * cols;
                            let dot: f64 = (0..cols).map(|c| g[base + c] * yv[base + c]).sum();
                            for c in 0..cols {
                                d[base + c] += yv[base + c] * (g[base + c] - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm(a) => {
                    let (rows, cols) = rows_cols(&node.shape);
                    let yv = &node.value;
                    let inv_std = &node.aux;
                    acc(*a, &mut |d| {
                        for r in 0..rows {
                            let base = r * cols;
                            let mg: f64 = (0..cols).map(|c| g[base + c]).sum::<f64>() / cols as f64;
                            let mgy: f64 =
                                (0..cols).map(|c| g[base + c] * yv[base + c]).sum::<f64>()
                                    / cols as f64;
                            for c in 0..cols {
                                d[base + c] +=
                                    inv_std[r] * (g[base + c] - mg - yv[base + c] * mgy);
                            }
                        }
                    });
                }
                Op::ConcatLast(parts) => {
                    let (rows, total_cols) = rows_cols(&node.shape);
                    let mut at = 0;
                    for p in parts {
                        let cols = *nodes[p.0].shape.last().unwrap();
                        let start = at;
                        acc(*p, &mut |d| {
                            for r in 0..rows {
                                for c in 0..cols {
                                    d[r * cols + c] += g[r * total_cols + start + c];
                                }
                            }
                        });
                        at += cols;
                    }
                }
                Op::SliceLast(a, start, len) => {
                    let (rows, cols) = rows_cols(&nodes[a.0].shape);
                    let (start, len) = (*start, *len);
                    acc(*a, &mut |d| {
                        for r in 0..rows {
                            for c in 0..len {
                                d[r * cols + start + c] += g[r * len + c];
                            }
                        }
                    });
                }
                Op::Gather(table, indices) => {
                    let e = nodes[table.0].shape[1];
                    acc(*table, &mut |d| {
                        for (r, &idx) in indices.iter().enumerate() {
                            for c in 0..e {
                                d[idx * e + c] += g[r * e + c];
                            }
                        }
                    });
                }
                Op::Sum(a) => {
                    let g0 = g[0];
                    acc(*a, &mut |d| {
                        for dx in d.iter_mut() {
                            *dx += g0;
                        }
                    });
                }
                Op::Mean(a) => {
                    let n = nodes[a.0].value.len().max(1) as f64;
                    let g0 = g[0] / n;
                    acc(*a, &mut |d| {
                        for dx in d.iter_mut() {
                            *dx += g0;
                        }
                    });
                }
                Op::Reshape(a) => {
                    acc(*a, &mut |d| {
                        for k in 0..d.len() {
                            d[k] += g[k];
                        }
                    });
                }
            }
        }
        for (slot, fresh) in self.grads.iter_mut().zip(local) {
            if let Some(fresh) = fresh {
                let acc = slot.get_or_insert_with(|| vec![0.0; fresh.len()]);
                for (a, f) in acc.iter_mut().zip(&fresh) {
                    *a += f;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_grad_is_input() {
        // loss = sum(w * x), x fixed -> grad(w) = x
        let mut t = Tape::new();
        let w = t.leaf(&[3], vec![1.0, -2.0, 0.5], true).unwrap();
        let x = t.leaf(&[3], vec![4.0, 5.0, 6.0], false).unwrap();
        let p = t.mul(w, x).unwrap();
        let loss = t.sum(p);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w), vec![4.0, 5.0, 6.0]);
    }

    #[test]
    fn square_grad() {
        // loss = sum(w^2) at w=3 -> grad 6
        let mut t = Tape::new();
        let w = t.leaf(&[1], vec![3.0], true).unwrap();
        let sq = t.mul(w, w).unwrap();
        let loss = t.sum(sq);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w), vec![6.0]);
    }

    #[test]
    fn backward_accumulates_without_zeroing() {
        let mut t = Tape::new();
        let w = t.leaf(&[1], vec![2.0], true).unwrap();
        let loss = t.sum(w);
        t.backward(loss).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w), vec![2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let w = t.leaf(&[2], vec![1.0, 2.0], true).unwrap();
        assert!(matches!(t.backward(w), Err(NdError::Contract(_))));
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut t = Tape::new();
        let x = t.leaf(&[2, 3], vec![1000.0, 0.0, 0.0, 0.0, 0.0, 0.0], false).unwrap();
        let y = t.softmax(x);
        let v = t.value(y);
        assert!(v.iter().all(|p| p.is_finite() && *p >= 0.0));
        assert!((v[0] - 1.0).abs() < 1e-12);
        for r in 0..2 {
            let s: f64 = v[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!((v[3] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn matmul_shapes_checked() {
        let mut t = Tape::new();
        let a = t.leaf(&[2, 3], vec![0.0; 6], false).unwrap();
        let b = t.leaf(&[2, 2], vec![0.0; 4], false).unwrap();
        assert!(matches!(t.matmul(a, b), Err(NdError::Shape { .. })));
    }
}
