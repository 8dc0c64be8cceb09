//! Minimal dense-tensor engine: 2D double-precision matrices, a
//! define-by-run tape with reverse-mode differentiation, stop-gradient
//! boundaries, and an AdamW optimizer filtered by parameter labels.
//!
//! The graph is rebuilt per step. Parameter values are shared into tapes
//! through `Arc`, so any number of forward evaluations may run
//! concurrently against a read-only [`ParamStore`]; gradient accumulation
//! and [`ParamStore::optimizer_step`] are single-writer.
//!
//! All kernels accumulate in a fixed order per output element, so results
//! are bit-identical regardless of thread count.

use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch { op: &'static str, left: (usize, usize), right: (usize, usize) },
    #[error("loss must be a 1x1 scalar, got {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("index {index} out of bounds for {what} of length {len}")]
    IndexOutOfBounds { what: &'static str, index: usize, len: usize },
    #[error("missing gradient on active parameter `{0}`")]
    MissingGrad(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

/// Dense row-major matrix of f64. Cloning is cheap (shared storage).
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Arc<Vec<f64>>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must equal rows*cols");
        Self { rows, cols, data: Arc::new(data) }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(1, 1, vec![v])
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data)
    }

    pub fn column(values: &[f64]) -> Self {
        Self::new(values.len(), 1, values.to_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!((self.rows, self.cols), (1, 1));
        self.data[0]
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax_slice(xs: &[f64]) -> Vec<f64> {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = xs.iter().map(|&x| (x - mx).exp()).collect();
    let s: f64 = out.iter().sum();
    for v in &mut out {
        *v /= s;
    }
    out
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + xs.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln()
}

// ---------------------------------------------------------------------------
// Matmul kernels. 4-row register blocking; each output block is produced by
// exactly one task with a fixed inner loop order.
// ---------------------------------------------------------------------------

/// C = A @ B, shapes [m,k] x [k,n].
fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    c.par_chunks_mut(4 * n).enumerate().for_each(|(blk, chunk)| {
        let i0 = blk * 4;
        let rows = chunk.len() / n;
        if rows == 4 {
            let (c0, rest) = chunk.split_at_mut(n);
            let (c1, rest) = rest.split_at_mut(n);
            let (c2, c3) = rest.split_at_mut(n);
            for kk in 0..k {
                let a0 = a[i0 * k + kk];
                let a1 = a[(i0 + 1) * k + kk];
                let a2 = a[(i0 + 2) * k + kk];
                let a3 = a[(i0 + 3) * k + kk];
                let brow = &b[kk * n..(kk + 1) * n];
                for (j, &bv) in brow.iter().enumerate() {
                    c0[j] += a0 * bv;
                    c1[j] += a1 * bv;
                    c2[j] += a2 * bv;
                    c3[j] += a3 * bv;
                }
            }
        } else {
            for (r, crow) in chunk.chunks_mut(n).enumerate() {
                let i = i0 + r;
                for kk in 0..k {
                    let av = a[i * k + kk];
                    let brow = &b[kk * n..(kk + 1) * n];
                    for (j, &bv) in brow.iter().enumerate() {
                        crow[j] += av * bv;
                    }
                }
            }
        }
    });
    c
}

/// C = A @ B^T, shapes [m,k] x [n,k].
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    c.par_chunks_mut(2 * n).enumerate().for_each(|(blk, chunk)| {
        let i0 = blk * 2;
        let rows = chunk.len() / n;
        if rows == 2 {
            let (c0, c1) = chunk.split_at_mut(n);
            let a0 = &a[i0 * k..(i0 + 1) * k];
            let a1 = &a[(i0 + 1) * k..(i0 + 2) * k];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                let mut s0 = 0.0;
                let mut s1 = 0.0;
                for kk in 0..k {
                    let bv = brow[kk];
                    s0 += a0[kk] * bv;
                    s1 += a1[kk] * bv;
                }
                c0[j] = s0;
                c1[j] = s1;
            }
        } else {
            for (r, crow) in chunk.chunks_mut(n).enumerate() {
                let arow = &a[(i0 + r) * k..(i0 + r + 1) * k];
                for j in 0..n {
                    let brow = &b[j * k..(j + 1) * k];
                    crow[j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
                }
            }
        }
    });
    c
}

/// C = A^T @ B, shapes [m,k] x [m,n] -> [k,n].
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    c.par_chunks_mut(4 * n).enumerate().for_each(|(blk, chunk)| {
        let p0 = blk * 4;
        let rows = chunk.len() / n;
        if rows == 4 {
            let (c0, rest) = chunk.split_at_mut(n);
            let (c1, rest) = rest.split_at_mut(n);
            let (c2, c3) = rest.split_at_mut(n);
            for i in 0..m {
                let a0 = a[i * k + p0];
                let a1 = a[i * k + p0 + 1];
                let a2 = a[i * k + p0 + 2];
                let a3 = a[i * k + p0 + 3];
                let brow = &b[i * n..(i + 1) * n];
                for (j, &bv) in brow.iter().enumerate() {
                    c0[j] += a0 * bv;
                    c1[j] += a1 * bv;
                    c2[j] += a2 * bv;
                    c3[j] += a3 * bv;
                }
            }
        } else {
            for (r, crow) in chunk.chunks_mut(n).enumerate() {
                let p = p0 + r;
                for i in 0..m {
                    let av = a[i * k + p];
                    let brow = &b[i * n..(i + 1) * n];
                    for (j, &bv) in brow.iter().enumerate() {
                        crow[j] += av * bv;
                    }
                }
            }
        }
    });
    c
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Disjoint ownership label of a model parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum ParamLabel {
    Shared,
    GenerationExpert,
    RefinementExpert,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub label: ParamLabel,
    pub rows: usize,
    pub cols: usize,
    pub data: Arc<Vec<f64>>,
    pub grad: Vec<f64>,
    pub grad_touched: bool,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Per-parameter AdamW step; keeps a parameter's update sequence
    /// independent of optimizer calls that never touch it.
    pub step: u64,
}

/// Total, disjoint labeling of every parameter id.
#[derive(Debug, Clone)]
pub struct ParameterPartition {
    labels: Vec<ParamLabel>,
}

impl ParameterPartition {
    pub fn label(&self, id: ParamId) -> ParamLabel {
        self.labels[id.0]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn ids_with(&self, label: ParamLabel) -> Vec<ParamId> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == label).then_some(ParamId(i)))
            .collect()
    }
}

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Owner of all trainable parameters, their gradients, and optimizer state.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    pub step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_param(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        label: ParamLabel,
        data: Vec<f64>,
    ) -> ParamId {
        assert_eq!(data.len(), rows * cols);
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.into(),
            label,
            rows,
            cols,
            data: Arc::new(data),
            grad: vec![0.0; rows * cols],
            grad_touched: false,
            m: vec![0.0; rows * cols],
            v: vec![0.0; rows * cols],
            step: 0,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn value(&self, id: ParamId) -> Mat {
        let p = &self.params[id.0];
        Mat { rows: p.rows, cols: p.cols, data: Arc::clone(&p.data) }
    }

    /// Overwrite a parameter's values (shape must match).
    pub fn set_data(&mut self, id: ParamId, data: Vec<f64>) {
        let p = &mut self.params[id.0];
        assert_eq!(data.len(), p.rows * p.cols);
        p.data = Arc::new(data);
    }

    /// Restore a parameter's AdamW step counter (checkpoint restore).
    pub fn set_adam_step(&mut self, id: ParamId, step: u64) {
        self.params[id.0].step = step;
    }

    /// Overwrite a parameter's AdamW moment buffers (checkpoint restore).
    pub fn set_optimizer_state(&mut self, id: ParamId, m: Vec<f64>, v: Vec<f64>) {
        let p = &mut self.params[id.0];
        assert_eq!(m.len(), p.m.len());
        assert_eq!(v.len(), p.v.len());
        p.m = m;
        p.v = v;
    }

    /// Count of scalar entries with the given label.
    pub fn scalar_count(&self, label: ParamLabel) -> usize {
        self.params
            .iter()
            .filter(|p| p.label == label)
            .map(|p| p.rows * p.cols)
            .sum()
    }

    pub fn partition(&self) -> ParameterPartition {
        ParameterPartition { labels: self.params.iter().map(|p| p.label).collect() }
    }

    fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        let p = &mut self.params[id.0];
        debug_assert_eq!(grad.len(), p.grad.len());
        for (g, d) in p.grad.iter_mut().zip(grad) {
            *g += d;
        }
        p.grad_touched = true;
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
            p.grad_touched = false;
        }
    }

    /// AdamW update restricted to parameters whose label is in `active`.
    ///
    /// Every other parameter is left bit-identical. Clears all gradients
    /// and touch flags afterwards. Erroring if an active parameter was
    /// never touched by a backward pass since the last clear.
    pub fn optimizer_step(
        &mut self,
        active: &[ParamLabel],
        hyper: &AdamW,
    ) -> Result<(), TensorError> {
        for p in &mut self.params {
            if !active.contains(&p.label) {
                continue;
            }
            if !p.grad_touched {
                return Err(TensorError::MissingGrad(p.name.clone()));
            }
            let t = p.step + 1;
            let bc1 = 1.0 - hyper.beta1.powi(t as i32);
            let bc2 = 1.0 - hyper.beta2.powi(t as i32);
            let data = Arc::make_mut(&mut p.data);
            for i in 0..data.len() {
                let g = p.grad[i];
                p.m[i] = hyper.beta1 * p.m[i] + (1.0 - hyper.beta1) * g;
                p.v[i] = hyper.beta2 * p.v[i] + (1.0 - hyper.beta2) * g * g;
                let mhat = p.m[i] / bc1;
                let vhat = p.v[i] / bc2;
                data[i] -=
                    hyper.lr * (mhat / (vhat.sqrt() + hyper.eps) + hyper.weight_decay * data[i]);
            }
            p.step = t;
        }
        self.step += 1;
        self.zero_grads();
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param { id: ParamId },
    StopGrad,
    Add { a: usize, b: usize },
    AddRow { a: usize, row: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    Matmul { a: usize, b: usize },
    MatmulNT { a: usize, b: usize },
    Gelu { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize },
    Softmax { x: usize },
    Exp { x: usize },
    Minimum { a: usize, b: usize },
    Clamp { x: usize, lo: f64, hi: f64 },
    Sum { x: usize },
    Attention { q: usize, k: usize, v: usize, heads: usize, seq: usize, probs: Vec<Mat> },
    Embedding { table: usize, indices: Vec<usize> },
    IndexSelect { x: usize, rows: Vec<usize> },
    SliceBlock { x: usize, r0: usize, c0: usize },
    ConcatRows { xs: Vec<usize> },
    ConcatCols { xs: Vec<usize> },
    CrossEntropy { logits: usize, targets: Vec<usize>, weights: Vec<f64> },
    SelectLogProb { logits: usize, targets: Vec<usize> },
    KlVsRef { logits: usize, ref_log_probs: Mat },
}

struct Node {
    op: Op,
    value: Mat,
    needs_grad: bool,
}

const LN_EPS: f64 = 1e-5;

/// Define-by-run computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Mat, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant leaf.
    pub fn input(&mut self, m: Mat) -> Var {
        self.push(Op::Input, m, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.input(Mat::scalar(v))
    }

    /// Trainable leaf bound to a store parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(Op::Param { id }, store.value(id), true)
    }

    /// Read-only view of a parameter: identical values, no gradient flow.
    pub fn param_frozen(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(Op::Input, store.value(id), false)
    }

    /// Value-identical tensor that blocks all gradient flow to ancestors.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.push(Op::StopGrad, value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(TensorError::ShapeMismatch { op: "add", left: va.shape(), right: vb.shape() });
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Mat::new(va.rows, va.cols, data);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Add { a: a.0, b: b.0 }, value, ng))
    }

    /// Broadcast-add a 1-row matrix to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (va, vr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        if vr.rows != 1 || vr.cols != va.cols {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: va.shape(),
                right: vr.shape(),
            });
        }
        let mut data = Vec::with_capacity(va.len());
        for i in 0..va.rows {
            for (x, y) in va.row(i).iter().zip(vr.data()) {
                data.push(x + y);
            }
        }
        let value = Mat::new(va.rows, va.cols, data);
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(Op::AddRow { a: a.0, row: row.0 }, value, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(TensorError::ShapeMismatch { op: "mul", left: va.shape(), right: vb.shape() });
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Mat::new(va.rows, va.cols, data);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Mul { a: a.0, b: b.0 }, value, ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|x| x * c).collect();
        let value = Mat::new(va.rows, va.cols, data);
        let ng = self.ng(a);
        self.push(Op::Scale { a: a.0, c }, value, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.cols != vb.rows {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: va.shape(),
                right: vb.shape(),
            });
        }
        let data = mm_nn(va.data(), vb.data(), va.rows, va.cols, vb.cols);
        let value = Mat::new(va.rows, vb.cols, data);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Matmul { a: a.0, b: b.0 }, value, ng))
    }

    /// `a @ b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.cols != vb.cols {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                left: va.shape(),
                right: vb.shape(),
            });
        }
        let data = mm_nt(va.data(), vb.data(), va.rows, va.cols, vb.rows);
        let value = Mat::new(va.rows, vb.rows, data);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::MatmulNT { a: a.0, b: b.0 }, value, ng))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let data = vx.data().iter().map(|&v| gelu_fwd(v)).collect();
        let value = Mat::new(vx.rows, vx.cols, data);
        let ng = self.ng(x);
        self.push(Op::Gelu { x: x.0 }, value, ng)
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let (vx, vg, vb) =
            (&self.nodes[x.0].value, &self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        if vg.shape() != (1, vx.cols) || vb.shape() != (1, vx.cols) {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: vx.shape(),
                right: vg.shape(),
            });
        }
        let n = vx.cols as f64;
        let mut data = Vec::with_capacity(vx.len());
        for i in 0..vx.rows {
            let row = vx.row(i);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (j, &v) in row.iter().enumerate() {
                data.push((v - mean) * inv * vg.data()[j] + vb.data()[j]);
            }
        }
        let value = Mat::new(vx.rows, vx.cols, data);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0 }, value, ng))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let mut data = Vec::with_capacity(vx.len());
        for i in 0..vx.rows {
            data.extend_from_slice(&softmax_slice(vx.row(i)));
        }
        let value = Mat::new(vx.rows, vx.cols, data);
        let ng = self.ng(x);
        self.push(Op::Softmax { x: x.0 }, value, ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let data = vx.data().iter().map(|&v| v.exp()).collect();
        let value = Mat::new(vx.rows, vx.cols, data);
        let ng = self.ng(x);
        self.push(Op::Exp { x: x.0 }, value, ng)
    }

    /// Elementwise minimum; ties route gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "minimum",
                left: va.shape(),
                right: vb.shape(),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x.min(y)).collect();
        let value = Mat::new(va.rows, va.cols, data);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Minimum { a: a.0, b: b.0 }, value, ng))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let vx = &self.nodes[x.0].value;
        let data = vx.data().iter().map(|&v| v.clamp(lo, hi)).collect();
        let value = Mat::new(vx.rows, vx.cols, data);
        let ng = self.ng(x);
        self.push(Op::Clamp { x: x.0, lo, hi }, value, ng)
    }

    /// Sum of all elements, as a 1x1 matrix.
    pub fn sum(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let value = Mat::scalar(vx.data().iter().sum());
        let ng = self.ng(x);
        self.push(Op::Sum { x: x.0 }, value, ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Fused bidirectional multi-head attention over a batch of equal-length
    /// sequences stacked row-wise: softmax(QKᵀ/√dh)V per example and head.
    /// One tape node per call; work parallelizes across (example, head).
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq: usize,
    ) -> Result<Var, TensorError> {
        let (vq, vk, vv) =
            (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        if vq.shape() != vk.shape() || vq.shape() != vv.shape() {
            return Err(TensorError::ShapeMismatch { op: "attention", left: vq.shape(), right: vk.shape() });
        }
        let d = vq.cols;
        if d % heads != 0 || vq.rows % seq != 0 {
            return Err(TensorError::ShapeMismatch { op: "attention", left: vq.shape(), right: (seq, heads) });
        }
        let dh = d / heads;
        let batch = vq.rows / seq;
        let scale = 1.0 / (dh as f64).sqrt();

        let pairs: Vec<(Vec<f64>, Mat)> = (0..batch * heads)
            .into_par_iter()
            .map(|pair| {
                let (e, h) = (pair / heads, pair % heads);
                let block = |m: &Mat, r: usize, c: usize| m.data()[r * d + c];
                // scores = Q K^T * scale, row-wise softmax
                let mut probs = vec![0.0; seq * seq];
                for i in 0..seq {
                    let row = &mut probs[i * seq..(i + 1) * seq];
                    for (j, slot) in row.iter_mut().enumerate() {
                        let mut s = 0.0;
                        for c in 0..dh {
                            s += block(vq, e * seq + i, h * dh + c)
                                * block(vk, e * seq + j, h * dh + c);
                        }
                        *slot = s * scale;
                    }
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for x in row.iter_mut() {
                        *x = (*x - mx).exp();
                        z += *x;
                    }
                    for x in row.iter_mut() {
                        *x /= z;
                    }
                }
                // ctx = probs @ V_eh
                let mut ctx = vec![0.0; seq * dh];
                for i in 0..seq {
                    for j in 0..seq {
                        let p = probs[i * seq + j];
                        for c in 0..dh {
                            ctx[i * dh + c] += p * block(vv, e * seq + j, h * dh + c);
                        }
                    }
                }
                (ctx, Mat::new(seq, seq, probs))
            })
            .collect();

        let mut out = vec![0.0; vq.rows * d];
        let mut prob_mats = Vec::with_capacity(batch * heads);
        for (pair, (ctx, probs)) in pairs.into_iter().enumerate() {
            let (e, h) = (pair / heads, pair % heads);
            for i in 0..seq {
                out[(e * seq + i) * d + h * dh..(e * seq + i) * d + (h + 1) * dh]
                    .copy_from_slice(&ctx[i * dh..(i + 1) * dh]);
            }
            prob_mats.push(probs);
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            Op::Attention { q: q.0, k: k.0, v: v.0, heads, seq, probs: prob_mats },
            Mat::new(vq.rows, d, out),
            ng,
        ))
    }

    /// Gather rows of an embedding table.
    pub fn embedding_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let vt = &self.nodes[table.0].value;
        let mut data = Vec::with_capacity(indices.len() * vt.cols);
        for &ix in indices {
            if ix >= vt.rows {
                return Err(TensorError::IndexOutOfBounds {
                    what: "embedding row",
                    index: ix,
                    len: vt.rows,
                });
            }
            data.extend_from_slice(vt.row(ix));
        }
        let value = Mat::new(indices.len(), vt.cols, data);
        let ng = self.ng(table);
        Ok(self.push(Op::Embedding { table: table.0, indices: indices.to_vec() }, value, ng))
    }

    /// Select rows of `x` in the given order (rows may repeat).
    pub fn index_select(&mut self, x: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let vx = &self.nodes[x.0].value;
        let mut data = Vec::with_capacity(rows.len() * vx.cols);
        for &r in rows {
            if r >= vx.rows {
                return Err(TensorError::IndexOutOfBounds {
                    what: "row",
                    index: r,
                    len: vx.rows,
                });
            }
            data.extend_from_slice(vx.row(r));
        }
        let value = Mat::new(rows.len(), vx.cols, data);
        let ng = self.ng(x);
        Ok(self.push(Op::IndexSelect { x: x.0, rows: rows.to_vec() }, value, ng))
    }

    /// Contiguous sub-block starting at (r0, c0) with the given extent.
    pub fn slice_block(
        &mut self,
        x: Var,
        r0: usize,
        c0: usize,
        rows: usize,
        cols: usize,
    ) -> Result<Var, TensorError> {
        let vx = &self.nodes[x.0].value;
        if r0 + rows > vx.rows || c0 + cols > vx.cols {
            return Err(TensorError::ShapeMismatch {
                op: "slice_block",
                left: vx.shape(),
                right: (r0 + rows, c0 + cols),
            });
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in r0..r0 + rows {
            data.extend_from_slice(&vx.row(i)[c0..c0 + cols]);
        }
        let value = Mat::new(rows, cols, data);
        let ng = self.ng(x);
        Ok(self.push(Op::SliceBlock { x: x.0, r0, c0 }, value, ng))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        let cols = self.nodes[xs[0].0].value.cols;
        let mut rows = 0;
        let mut data = Vec::new();
        for v in xs {
            let m = &self.nodes[v.0].value;
            if m.cols != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: (rows, cols),
                    right: m.shape(),
                });
            }
            rows += m.rows;
            data.extend_from_slice(m.data());
        }
        let value = Mat::new(rows, cols, data);
        let ng = xs.iter().any(|&v| self.ng(v));
        Ok(self.push(Op::ConcatRows { xs: xs.iter().map(|v| v.0).collect() }, value, ng))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        let rows = self.nodes[xs[0].0].value.rows;
        let total_cols: usize = xs.iter().map(|v| self.nodes[v.0].value.cols).sum();
        let mut data = Vec::with_capacity(rows * total_cols);
        for i in 0..rows {
            for v in xs {
                let m = &self.nodes[v.0].value;
                if m.rows != rows {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat_cols",
                        left: (rows, total_cols),
                        right: m.shape(),
                    });
                }
                data.extend_from_slice(m.row(i));
            }
        }
        let value = Mat::new(rows, total_cols, data);
        let ng = xs.iter().any(|&v| self.ng(v));
        Ok(self.push(Op::ConcatCols { xs: xs.iter().map(|v| v.0).collect() }, value, ng))
    }

    /// Weighted sum of per-row cross-entropies: Σᵢ wᵢ·(−log softmax(zᵢ)[tᵢ]).
    pub fn cross_entropy_with_logits(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var, TensorError> {
        let vz = &self.nodes[logits.0].value;
        if targets.len() != vz.rows || weights.len() != vz.rows {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_with_logits",
                left: vz.shape(),
                right: (targets.len(), weights.len()),
            });
        }
        let mut total = 0.0;
        for i in 0..vz.rows {
            if targets[i] >= vz.cols {
                return Err(TensorError::IndexOutOfBounds {
                    what: "target class",
                    index: targets[i],
                    len: vz.cols,
                });
            }
            let row = vz.row(i);
            total += weights[i] * (log_sum_exp(row) - row[targets[i]]);
        }
        if !total.is_finite() {
            return Err(TensorError::NonFinite("cross_entropy_with_logits"));
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), weights: weights.to_vec() },
            Mat::scalar(total),
            ng,
        ))
    }

    /// Per-row log-probability of the target class: column vector [n,1].
    pub fn select_log_prob(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let vz = &self.nodes[logits.0].value;
        if targets.len() != vz.rows {
            return Err(TensorError::ShapeMismatch {
                op: "select_log_prob",
                left: vz.shape(),
                right: (targets.len(), 1),
            });
        }
        let mut data = Vec::with_capacity(vz.rows);
        for i in 0..vz.rows {
            if targets[i] >= vz.cols {
                return Err(TensorError::IndexOutOfBounds {
                    what: "target class",
                    index: targets[i],
                    len: vz.cols,
                });
            }
            let row = vz.row(i);
            data.push(row[targets[i]] - log_sum_exp(row));
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Op::SelectLogProb { logits: logits.0, targets: targets.to_vec() },
            Mat::new(targets.len(), 1, data),
            ng,
        ))
    }

    /// Per-row KL(softmax(logits) ‖ exp(ref_log_probs)), reference constant.
    pub fn kl_vs_ref(&mut self, logits: Var, ref_log_probs: Mat) -> Result<Var, TensorError> {
        let vz = &self.nodes[logits.0].value;
        if ref_log_probs.shape() != vz.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "kl_vs_ref",
                left: vz.shape(),
                right: ref_log_probs.shape(),
            });
        }
        let mut data = Vec::with_capacity(vz.rows);
        for i in 0..vz.rows {
            let row = vz.row(i);
            let lse = log_sum_exp(row);
            let mut kl = 0.0;
            for (j, &z) in row.iter().enumerate() {
                let lp = z - lse;
                kl += lp.exp() * (lp - ref_log_probs.get(i, j));
            }
            data.push(kl);
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Op::KlVsRef { logits: logits.0, ref_log_probs },
            Mat::new(vz.rows, 1, data),
            ng,
        ))
    }

    /// Reverse-mode sweep from a scalar loss; accumulates ∂loss/∂p into the
    /// store's gradient buffers for every reachable parameter leaf. Nodes
    /// behind a stop-gradient boundary are untouched.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<(), TensorError> {
        let lshape = self.nodes[loss.0].value.shape();
        if lshape != (1, 1) {
            return Err(TensorError::NonScalarLoss(lshape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input | Op::StopGrad { .. } => {}
                Op::Param { id } => store.accumulate_grad(*id, &g),
                Op::Add { a, b } => {
                    self.acc(&mut grads, *a, &g);
                    self.acc(&mut grads, *b, &g);
                }
                Op::AddRow { a, row } => {
                    self.acc(&mut grads, *a, &g);
                    if self.nodes[*row].needs_grad {
                        let cols = self.nodes[*row].value.cols;
                        let mut rg = vec![0.0; cols];
                        for chunk in g.chunks_exact(cols) {
                            for (o, &v) in rg.iter_mut().zip(chunk) {
                                *o += v;
                            }
                        }
                        self.acc(&mut grads, *row, &rg);
                    }
                }
                Op::Mul { a, b } => {
                    if self.nodes[*a].needs_grad {
                        let vb = self.nodes[*b].value.data();
                        let ga: Vec<f64> = g.iter().zip(vb).map(|(x, y)| x * y).collect();
                        self.acc(&mut grads, *a, &ga);
                    }
                    if self.nodes[*b].needs_grad {
                        let va = self.nodes[*a].value.data();
                        let gb: Vec<f64> = g.iter().zip(va).map(|(x, y)| x * y).collect();
                        self.acc(&mut grads, *b, &gb);
                    }
                }
                Op::Scale { a, c } => {
                    let ga: Vec<f64> = g.iter().map(|x| x * c).collect();
                    self.acc(&mut grads, *a, &ga);
                }
                Op::Matmul { a, b } => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    if self.nodes[*a].needs_grad {
                        let da = mm_nt(&g, vb.data(), va.rows, vb.cols, vb.rows);
                        self.acc(&mut grads, *a, &da);
                    }
                    if self.nodes[*b].needs_grad {
                        let db = mm_tn(va.data(), &g, va.rows, va.cols, vb.cols);
                        self.acc(&mut grads, *b, &db);
                    }
                }
                Op::MatmulNT { a, b } => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    if self.nodes[*a].needs_grad {
                        let da = mm_nn(&g, vb.data(), va.rows, vb.rows, vb.cols);
                        self.acc(&mut grads, *a, &da);
                    }
                    if self.nodes[*b].needs_grad {
                        // dB = G^T @ A, shapes [m,n]^T x [m,k] -> [n,k]
                        let db = mm_tn(&g, va.data(), va.rows, vb.rows, va.cols);
                        self.acc(&mut grads, *b, &db);
                    }
                }
                Op::Gelu { x } => {
                    let vx = self.nodes[*x].value.data();
                    let gx: Vec<f64> = g.iter().zip(vx).map(|(gy, &v)| gy * gelu_bwd(v)).collect();
                    self.acc(&mut grads, *x, &gx);
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let (vx, vg) = (&self.nodes[*x].value, &self.nodes[*gamma].value);
                    let cols = vx.cols;
                    let n = cols as f64;
                    let mut gx = vec![0.0; vx.len()];
                    let mut gg = vec![0.0; cols];
                    let mut gb = vec![0.0; cols];
                    for r in 0..vx.rows {
                        let row = vx.row(r);
                        let grow = &g[r * cols..(r + 1) * cols];
                        let mean = row.iter().sum::<f64>() / n;
                        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                        let dxhat: Vec<f64> =
                            grow.iter().zip(vg.data()).map(|(gy, gm)| gy * gm).collect();
                        let m1 = dxhat.iter().sum::<f64>() / n;
                        let m2 = dxhat.iter().zip(&xhat).map(|(d, h)| d * h).sum::<f64>() / n;
                        for j in 0..cols {
                            gx[r * cols + j] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                            gg[j] += grow[j] * xhat[j];
                            gb[j] += grow[j];
                        }
                    }
                    self.acc(&mut grads, *x, &gx);
                    if self.nodes[*gamma].needs_grad {
                        self.acc(&mut grads, *gamma, &gg);
                    }
                    if self.nodes[*beta].needs_grad {
                        self.acc(&mut grads, *beta, &gb);
                    }
                }
                Op::Softmax { x } => {
                    let y = &self.nodes[i].value;
                    let cols = y.cols;
                    let mut gx = vec![0.0; y.len()];
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            gx[r * cols + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    self.acc(&mut grads, *x, &gx);
                }
                Op::Exp { x } => {
                    let y = self.nodes[i].value.data();
                    let gx: Vec<f64> = g.iter().zip(y).map(|(gy, &v)| gy * v).collect();
                    self.acc(&mut grads, *x, &gx);
                }
                Op::Minimum { a, b } => {
                    let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                    if self.nodes[*a].needs_grad {
                        let ga: Vec<f64> = g
                            .iter()
                            .zip(va.iter().zip(vb))
                            .map(|(gy, (&x, &y))| if x <= y { *gy } else { 0.0 })
                            .collect();
                        self.acc(&mut grads, *a, &ga);
                    }
                    if self.nodes[*b].needs_grad {
                        let gb: Vec<f64> = g
                            .iter()
                            .zip(va.iter().zip(vb))
                            .map(|(gy, (&x, &y))| if y < x { *gy } else { 0.0 })
                            .collect();
                        self.acc(&mut grads, *b, &gb);
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    let vx = self.nodes[*x].value.data();
                    let gx: Vec<f64> = g
                        .iter()
                        .zip(vx)
                        .map(|(gy, &v)| if v >= *lo && v <= *hi { *gy } else { 0.0 })
                        .collect();
                    self.acc(&mut grads, *x, &gx);
                }
                Op::Sum { x } => {
                    let n = self.nodes[*x].value.len();
                    let gx = vec![g[0]; n];
                    self.acc(&mut grads, *x, &gx);
                }
                Op::Attention { q, k, v, heads, seq, probs } => {
                    let (vq, vk, vv) =
                        (&self.nodes[*q].value, &self.nodes[*k].value, &self.nodes[*v].value);
                    let d = vq.cols;
                    let dh = d / heads;
                    let batch = vq.rows / seq;
                    let seq = *seq;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let grads_per_pair: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..batch * heads)
                        .into_par_iter()
                        .map(|pair| {
                            let (e, h) = (pair / heads, pair % heads);
                            let a = probs[pair].data();
                            let block = |m: &Mat, r: usize, c: usize| m.data()[r * d + c];
                            let gout = |r: usize, c: usize| g[(e * seq + r) * d + h * dh + c];
                            // dA = dCtx @ V^T, then softmax backward rows
                            let mut dscore = vec![0.0; seq * seq];
                            for i in 0..seq {
                                let mut dot = 0.0;
                                for j in 0..seq {
                                    let mut s = 0.0;
                                    for c in 0..dh {
                                        s += gout(i, c) * block(vv, e * seq + j, h * dh + c);
                                    }
                                    dscore[i * seq + j] = s;
                                }
                                for j in 0..seq {
                                    dot += dscore[i * seq + j] * a[i * seq + j];
                                }
                                for j in 0..seq {
                                    dscore[i * seq + j] =
                                        a[i * seq + j] * (dscore[i * seq + j] - dot) * scale;
                                }
                            }
                            let mut dq = vec![0.0; seq * dh];
                            let mut dk = vec![0.0; seq * dh];
                            let mut dv = vec![0.0; seq * dh];
                            for i in 0..seq {
                                for j in 0..seq {
                                    let ds = dscore[i * seq + j];
                                    let aij = a[i * seq + j];
                                    for c in 0..dh {
                                        dq[i * dh + c] += ds * block(vk, e * seq + j, h * dh + c);
                                        dk[j * dh + c] += ds * block(vq, e * seq + i, h * dh + c);
                                        dv[j * dh + c] += aij * gout(i, c);
                                    }
                                }
                            }
                            (dq, dk, dv)
                        })
                        .collect();
                    let mut gq = vec![0.0; vq.len()];
                    let mut gk = vec![0.0; vk.len()];
                    let mut gv = vec![0.0; vv.len()];
                    for (pair, (dq, dk, dv)) in grads_per_pair.into_iter().enumerate() {
                        let (e, h) = (pair / heads, pair % heads);
                        for i in 0..seq {
                            let row = (e * seq + i) * d + h * dh;
                            for c in 0..dh {
                                gq[row + c] += dq[i * dh + c];
                                gk[row + c] += dk[i * dh + c];
                                gv[row + c] += dv[i * dh + c];
                            }
                        }
                    }
                    self.acc(&mut grads, *q, &gq);
                    self.acc(&mut grads, *k, &gk);
                    self.acc(&mut grads, *v, &gv);
                }
                Op::Embedding { table, indices } => {
                    if self.nodes[*table].needs_grad {
                        let vt = &self.nodes[*table].value;
                        let cols = vt.cols;
                        let mut gt = vec![0.0; vt.len()];
                        for (r, &ix) in indices.iter().enumerate() {
                            let src = &g[r * cols..(r + 1) * cols];
                            let dst = &mut gt[ix * cols..(ix + 1) * cols];
                            for (o, &v) in dst.iter_mut().zip(src) {
                                *o += v;
                            }
                        }
                        self.acc(&mut grads, *table, &gt);
                    }
                }
                Op::IndexSelect { x, rows } => {
                    let vx = &self.nodes[*x].value;
                    let cols = vx.cols;
                    let mut gx = vec![0.0; vx.len()];
                    for (r, &src_row) in rows.iter().enumerate() {
                        let src = &g[r * cols..(r + 1) * cols];
                        let dst = &mut gx[src_row * cols..(src_row + 1) * cols];
                        for (o, &v) in dst.iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                    self.acc(&mut grads, *x, &gx);
                }
                Op::SliceBlock { x, r0, c0 } => {
                    let vx = &self.nodes[*x].value;
                    let out = &self.nodes[i].value;
                    let mut gx = vec![0.0; vx.len()];
                    for r in 0..out.rows {
                        for c in 0..out.cols {
                            gx[(r0 + r) * vx.cols + c0 + c] += g[r * out.cols + c];
                        }
                    }
                    self.acc(&mut grads, *x, &gx);
                }
                Op::ConcatRows { xs } => {
                    let mut offset = 0;
                    for &xv in xs {
                        let m = &self.nodes[xv].value;
                        let span = m.len();
                        if self.nodes[xv].needs_grad {
                            self.acc(&mut grads, xv, &g[offset..offset + span]);
                        }
                        offset += span;
                    }
                }
                Op::ConcatCols { xs } => {
                    let rows = self.nodes[i].value.rows;
                    let total_cols = self.nodes[i].value.cols;
                    let mut col_off = 0;
                    for &xv in xs {
                        let m = &self.nodes[xv].value;
                        if self.nodes[xv].needs_grad {
                            let mut gx = vec![0.0; m.len()];
                            for r in 0..rows {
                                for c in 0..m.cols {
                                    gx[r * m.cols + c] = g[r * total_cols + col_off + c];
                                }
                            }
                            self.acc(&mut grads, xv, &gx);
                        }
                        col_off += m.cols;
                    }
                }
                Op::CrossEntropy { logits, targets, weights } => {
                    let vz = &self.nodes[*logits].value;
                    let cols = vz.cols;
                    let mut gz = vec![0.0; vz.len()];
                    for r in 0..vz.rows {
                        let p = softmax_slice(vz.row(r));
                        let w = weights[r] * g[0];
                        for j in 0..cols {
                            gz[r * cols + j] = w * p[j];
                        }
                        gz[r * cols + targets[r]] -= w;
                    }
                    self.acc(&mut grads, *logits, &gz);
                }
                Op::SelectLogProb { logits, targets } => {
                    let vz = &self.nodes[*logits].value;
                    let cols = vz.cols;
                    let mut gz = vec![0.0; vz.len()];
                    for r in 0..vz.rows {
                        let p = softmax_slice(vz.row(r));
                        let gr = g[r];
                        for j in 0..cols {
                            gz[r * cols + j] = -gr * p[j];
                        }
                        gz[r * cols + targets[r]] += gr;
                    }
                    self.acc(&mut grads, *logits, &gz);
                }
                Op::KlVsRef { logits, ref_log_probs } => {
                    let vz = &self.nodes[*logits].value;
                    let kl = &self.nodes[i].value;
                    let cols = vz.cols;
                    let mut gz = vec![0.0; vz.len()];
                    for r in 0..vz.rows {
                        let row = vz.row(r);
                        let lse = log_sum_exp(row);
                        let gr = g[r];
                        let klr = kl.get(r, 0);
                        for j in 0..cols {
                            let lp = row[j] - lse;
                            gz[r * cols + j] =
                                gr * lp.exp() * ((lp - ref_log_probs.get(r, j)) - klr);
                        }
                    }
                    self.acc(&mut grads, *logits, &gz);
                }
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], idx: usize, contribution: &[f64]) {
        if !self.nodes[idx].needs_grad {
            return;
        }
        match &mut grads[idx] {
            Some(existing) => {
                for (o, &v) in existing.iter_mut().zip(contribution) {
                    *o += v;
                }
            }
            slot => *slot = Some(contribution.to_vec()),
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, usize, usize, ParamLabel, Vec<f64>)]) -> (ParamStore, Vec<ParamId>) {
        let mut store = ParamStore::new();
        let ids = values
            .iter()
            .map(|(n, r, c, l, d)| store.add_param(*n, *r, *c, *l, d.clone()))
            .collect();
        (store, ids)
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::new();
        let x = t.input(Mat::new(1, 5, vec![0.7; 5]));
        let y = t.softmax(x);
        for &v in t.value(y).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_uniform_two_way_is_ln2() {
        let mut t = Tape::new();
        let z = t.input(Mat::new(1, 2, vec![0.0, 0.0]));
        let loss = t.cross_entropy_with_logits(z, &[0], &[1.0]).unwrap();
        assert!((t.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn matmul_identity_returns_input() {
        let mut t = Tape::new();
        let eye = Mat::from_fn(3, 3, |i, j| if i == j { 1.0 } else { 0.0 });
        let a = Mat::from_fn(3, 4, |i, j| (i * 4 + j) as f64);
        let i = t.input(eye);
        let av = t.input(a.clone());
        let out = t.matmul(i, av).unwrap();
        assert_eq!(t.value(out).data(), a.data());
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut t = Tape::new();
        let a = t.input(Mat::zeros(2, 3));
        let b = t.input(Mat::zeros(4, 2));
        match t.matmul(a, b) {
            Err(TensorError::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, (2, 3));
                assert_eq!(right, (4, 2));
            }
            other => panic!("expected shape error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn backward_of_sum_gives_ones() {
        let (mut store, ids) =
            store_with(&[("p", 2, 3, ParamLabel::Shared, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])]);
        let mut t = Tape::new();
        let p = t.param(&store, ids[0]);
        let loss = t.sum(p);
        t.backward(loss, &mut store).unwrap();
        assert_eq!(store.param(ids[0]).grad, vec![1.0; 6]);
        assert!(store.param(ids[0]).grad_touched);
    }

    #[test]
    fn non_scalar_loss_is_an_error() {
        let (mut store, ids) = store_with(&[("p", 2, 2, ParamLabel::Shared, vec![0.0; 4])]);
        let mut t = Tape::new();
        let p = t.param(&store, ids[0]);
        assert!(matches!(t.backward(p, &mut store), Err(TensorError::NonScalarLoss((2, 2)))));
    }

    #[test]
    fn stop_gradient_preserves_values_and_blocks_grads() {
        let (mut store, ids) = store_with(&[("p", 1, 3, ParamLabel::Shared, vec![1.0, -2.0, 3.0])]);
        let mut t = Tape::new();
        let p = t.param(&store, ids[0]);
        let sg = t.stop_gradient(p);
        assert_eq!(t.value(sg).data(), t.value(p).data());
        let loss = t.sum(sg);
        t.backward(loss, &mut store).unwrap();
        assert_eq!(store.param(ids[0]).grad, vec![0.0; 3]);
        assert!(!store.param(ids[0]).grad_touched);
    }

    #[test]
    fn mixed_stop_gradient_keeps_only_direct_path() {
        // loss = a*x + b*stop_gradient(x) -> dloss/dx = a
        let (mut store, ids) = store_with(&[("x", 1, 1, ParamLabel::Shared, vec![1.5])]);
        let (a, b) = (3.0, 7.0);
        let mut t = Tape::new();
        let x = t.param(&store, ids[0]);
        let sx = t.stop_gradient(x);
        let ax = t.scale(x, a);
        let bsx = t.scale(sx, b);
        let loss = t.add(ax, bsx).unwrap();
        t.backward(loss, &mut store).unwrap();
        assert_eq!(store.param(ids[0]).grad, vec![a]);
    }

    /// Central finite differences over a small random MLP.
    #[test]
    fn mlp_grads_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let dims = [5usize, 4, 3, 1];
        let mut spec: Vec<(String, usize, usize, Vec<f64>)> = Vec::new();
        for l in 0..3 {
            let (r, c) = (dims[l], dims[l + 1]);
            let w: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-0.8..0.8)).collect();
            let b: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.3..0.3)).collect();
            spec.push((format!("w{l}"), r, c, w));
            spec.push((format!("b{l}"), 1, c, b));
        }
        let x = Mat::new(2, 5, (0..10).map(|i| (i as f64) * 0.17 - 0.5).collect());

        let eval = |vals: &[Vec<f64>]| -> f64 {
            let mut store = ParamStore::new();
            let ids: Vec<ParamId> = spec
                .iter()
                .zip(vals)
                .map(|((n, r, c, _), v)| store.add_param(n.clone(), *r, *c, ParamLabel::Shared, v.clone()))
                .collect();
            let mut t = Tape::new();
            let mut h = t.input(x.clone());
            for l in 0..3 {
                let w = t.param(&store, ids[2 * l]);
                let b = t.param(&store, ids[2 * l + 1]);
                h = t.matmul(h, w).unwrap();
                h = t.add_row(h, b).unwrap();
                if l < 2 {
                    h = t.gelu(h);
                }
            }
            let s = t.sum(h);
            t.value(s).item()
        };

        // Analytic gradients.
        let base: Vec<Vec<f64>> = spec.iter().map(|(_, _, _, v)| v.clone()).collect();
        let mut store = ParamStore::new();
        let ids: Vec<ParamId> = spec
            .iter()
            .map(|(n, r, c, v)| store.add_param(n.clone(), *r, *c, ParamLabel::Shared, v.clone()))
            .collect();
        let mut t = Tape::new();
        let mut h = t.input(x.clone());
        for l in 0..3 {
            let w = t.param(&store, ids[2 * l]);
            let b = t.param(&store, ids[2 * l + 1]);
            h = t.matmul(h, w).unwrap();
            h = t.add_row(h, b).unwrap();
            if l < 2 {
                h = t.gelu(h);
            }
        }
        let loss = t.sum(h);
        t.backward(loss, &mut store).unwrap();

        let step = 1e-5;
        for (pi, id) in ids.iter().enumerate() {
            let analytic = store.param(*id).grad.clone();
            for k in 0..base[pi].len() {
                let mut plus = base.clone();
                plus[pi][k] += step;
                let mut minus = base.clone();
                minus[pi][k] -= step;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
                let denom = fd.abs().max(analytic[k].abs()).max(1e-8);
                assert!(
                    (fd - analytic[k]).abs() / denom <= 1e-4,
                    "param {pi} elem {k}: fd {fd} vs analytic {}",
                    analytic[k]
                );
            }
        }
    }

    #[test]
    fn optimizer_updates_only_active_labels() {
        let (mut store, ids) = store_with(&[
            ("shared", 1, 2, ParamLabel::Shared, vec![1.0, 2.0]),
            ("gen", 1, 2, ParamLabel::GenerationExpert, vec![3.0, 4.0]),
            ("refine", 1, 2, ParamLabel::RefinementExpert, vec![5.0, 6.0]),
        ]);
        let mut t = Tape::new();
        let s = t.param(&store, ids[0]);
        let g = t.param(&store, ids[1]);
        let r = t.param(&store, ids[2]);
        let all = t.concat_cols(&[s, g, r]).unwrap();
        let loss = t.sum(all);
        t.backward(loss, &mut store).unwrap();

        let before: Vec<Vec<f64>> = ids.iter().map(|&i| store.param(i).data.to_vec()).collect();
        store
            .optimizer_step(&[ParamLabel::RefinementExpert], &AdamW::default())
            .unwrap();
        assert_eq!(store.param(ids[0]).data.as_slice(), before[0].as_slice());
        assert_eq!(store.param(ids[1]).data.as_slice(), before[1].as_slice());
        assert_ne!(store.param(ids[2]).data.as_slice(), before[2].as_slice());
        // grads cleared afterwards
        assert!(!store.param(ids[0]).grad_touched);
    }

    #[test]
    fn sgd_degenerate_settings_step_by_lr() {
        let (mut store, ids) = store_with(&[("p", 1, 1, ParamLabel::Shared, vec![2.0])]);
        let mut t = Tape::new();
        let p = t.param(&store, ids[0]);
        let loss = t.sum(p); // grad = 1
        t.backward(loss, &mut store).unwrap();
        let hyper = AdamW { lr: 0.1, beta1: 0.0, beta2: 0.0, eps: 0.0, weight_decay: 0.0 };
        store.optimizer_step(&[ParamLabel::Shared], &hyper).unwrap();
        assert!((store.param(ids[0]).data[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn adamw_first_step_matches_hand_computation() {
        let g = 0.5;
        let p0 = 2.0;
        let hyper = AdamW { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 };
        let (mut store, ids) = store_with(&[("p", 1, 1, ParamLabel::Shared, vec![p0])]);
        let mut t = Tape::new();
        let p = t.param(&store, ids[0]);
        let half = t.scale(p, g);
        let loss = t.sum(half);
        t.backward(loss, &mut store).unwrap();
        store.optimizer_step(&[ParamLabel::Shared], &hyper).unwrap();

        let m = (1.0 - hyper.beta1) * g / (1.0 - hyper.beta1);
        let v = (1.0 - hyper.beta2) * g * g / (1.0 - hyper.beta2);
        let expect = p0 - hyper.lr * (m / (v.sqrt() + hyper.eps) + hyper.weight_decay * p0);
        assert!((store.param(ids[0]).data[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_on_active_param_is_an_error() {
        let (mut store, _ids) = store_with(&[("p", 1, 1, ParamLabel::Shared, vec![1.0])]);
        let err = store.optimizer_step(&[ParamLabel::Shared], &AdamW::default());
        assert!(matches!(err, Err(TensorError::MissingGrad(_))));
    }

    /// The fused attention must agree with the same computation composed
    /// from FD-validated primitives, in both values and gradients.
    #[test]
    fn fused_attention_matches_composed_primitives() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let (batch, seq, heads, d) = (2usize, 5usize, 2usize, 8usize);
        let dh = d / heads;
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            (0..batch * seq * d).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let (qd, kd, vd) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let weight: Vec<f64> = (0..batch * seq * d).map(|_| rng.gen_range(-0.5..0.5)).collect();

        let build = |fused: bool| -> (Vec<f64>, Vec<Vec<f64>>) {
            let mut store = ParamStore::new();
            let qid = store.add_param("q", batch * seq, d, ParamLabel::Shared, qd.clone());
            let kid = store.add_param("k", batch * seq, d, ParamLabel::Shared, kd.clone());
            let vid = store.add_param("v", batch * seq, d, ParamLabel::Shared, vd.clone());
            let mut t = Tape::new();
            let q = t.param(&store, qid);
            let k = t.param(&store, kid);
            let v = t.param(&store, vid);
            let out = if fused {
                t.attention(q, k, v, heads, seq).unwrap()
            } else {
                let scale = 1.0 / (dh as f64).sqrt();
                let mut ex = Vec::new();
                for e in 0..batch {
                    let mut hs = Vec::new();
                    for h in 0..heads {
                        let qh = t.slice_block(q, e * seq, h * dh, seq, dh).unwrap();
                        let kh = t.slice_block(k, e * seq, h * dh, seq, dh).unwrap();
                        let vh = t.slice_block(v, e * seq, h * dh, seq, dh).unwrap();
                        let s = t.matmul_nt(qh, kh).unwrap();
                        let s = t.scale(s, scale);
                        let a = t.softmax(s);
                        hs.push(t.matmul(a, vh).unwrap());
                    }
                    ex.push(t.concat_cols(&hs).unwrap());
                }
                t.concat_rows(&ex).unwrap()
            };
            let w = t.input(Mat::new(batch * seq, d, weight.clone()));
            let prod = t.mul(out, w).unwrap();
            let loss = t.sum(prod);
            t.backward(loss, &mut store).unwrap();
            let value = t.value(out).data().to_vec();
            let grads = vec![
                store.param(qid).grad.clone(),
                store.param(kid).grad.clone(),
                store.param(vid).grad.clone(),
            ];
            (value, grads)
        };

        let (fv, fg) = build(true);
        let (cv, cg) = build(false);
        for (a, b) in fv.iter().zip(&cv) {
            assert!((a - b).abs() < 1e-12);
        }
        for (ga, gb) in fg.iter().zip(&cg) {
            for (a, b) in ga.iter().zip(gb) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn select_log_prob_and_kl_agree_with_direct_computation() {
        let mut t = Tape::new();
        let z = t.input(Mat::new(2, 3, vec![0.1, -0.4, 0.9, 2.0, 0.0, -1.0]));
        let lp = t.select_log_prob(z, &[2, 0]).unwrap();
        let p0 = softmax_slice(&[0.1, -0.4, 0.9]);
        assert!((t.value(lp).get(0, 0) - p0[2].ln()).abs() < 1e-12);

        let refm = Mat::new(2, 3, vec![(1.0f64 / 3.0).ln(); 6]);
        let kl = t.kl_vs_ref(z, refm).unwrap();
        let expect: f64 = p0.iter().map(|&p| p * (p.ln() - (1.0f64 / 3.0).ln())).sum();
        assert!((t.value(kl).get(0, 0) - expect).abs() < 1e-12);
    }
}
