//! Reverse-mode automatic differentiation over a dynamically recorded tape.
//!
//! Every operation appends a node holding its forward value and enough
//! context to run its adjoint. [`Tape::backward`] walks the nodes in reverse
//! insertion order, which is a valid topological order because a node can
//! only reference nodes recorded before it.
//!
//! A tape built with [`Tape::inference`] records values only; no node
//! requires a gradient and `backward` returns nothing useful. This is the
//! mode used for decoding and evaluation.

use std::sync::Arc;

use super::kernels::{axpy, dot, gemm_nn, gemm_nt, gemm_tn, softmax_row};
use super::param::{ParamGrads, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Attention-style mask for [`Tape::softmax_rows`].
#[derive(Clone, Debug)]
pub enum Mask {
    /// Row `i` may attend to columns `0..=i + offset`.
    Causal { offset: usize },
    /// Row-major `[rows, cols]` flags; `true` means allowed.
    Explicit(Arc<Vec<bool>>),
}

impl Mask {
    fn allows(&self, row: usize, col: usize, cols: usize) -> bool {
        match self {
            Mask::Causal { offset } => col <= row + offset,
            Mask::Explicit(m) => m[row * cols + col],
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    OneMinus(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    ScatterRows {
        base: Var,
        idx: Vec<usize>,
        rows: Var,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    NormalizeRows(Var),
    SumRows(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    node_grads: Vec<Option<Vec<f64>>>,
    params: ParamGrads,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` required one.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.node_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn params(&self) -> &ParamGrads {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads {
        self.params
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::with_capacity(256),
            grad_enabled: true,
        }
    }

    /// A tape that never tracks gradients.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::with_capacity(256),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_arc(Arc::new(value), Op::Leaf, false)
    }

    /// A leaf that gradients flow into; used for checking input gradients.
    pub fn variable(&mut self, value: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.push_arc(Arc::new(value), Op::Leaf, rg)
    }

    /// Records a parameter. It requires a gradient only if it is trainable
    /// and the tape tracks gradients.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let rg = self.grad_enabled && store.is_trainable(id);
        self.push_arc(store.value_arc(id), Op::Param(id), rg)
    }

    /// Records a parameter as a constant regardless of its trainable flag.
    pub fn param_frozen(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push_arc(store.value_arc(id), Op::Param(id), false)
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape().len() != 2 || ta.cols() != tb.shape()[0] {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm_nn(ta.data(), tb.data(), &mut out, m, k, n);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Tensor::matrix(shape, out), Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(Error::shape("matmul_nt", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = vec![0.0; m * n];
        gemm_nt(ta.data(), tb.data(), &mut out, m, k, n);
        Ok(self.push(Tensor::matrix(vec![m, n], out), Op::MatMulNT(a, b), &[a, b]))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape().to_vec();
        Ok(self.push(Tensor::matrix(shape, data), op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a bias row `b: [n]` (or `[1,n]`) to every row of `a: [*, n]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.len() != ta.cols() {
            return Err(Error::shape("add_row", ta.shape(), tb.shape()));
        }
        let n = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(tb.data()).for_each(|(x, y)| *x += y);
        }
        let shape = ta.shape().to_vec();
        Ok(self.push(Tensor::matrix(shape, data), Op::AddRow(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::matrix(shape, data), Op::Scale(a, c), &[a])
    }

    /// Multiplies row `i` of `a: [m,n]` by `w[i]`, with `w` holding `m` values.
    pub fn scale_rows(&mut self, a: Var, w: Var) -> Result<Var> {
        let (ta, tw) = (self.value(a), self.value(w));
        if tw.len() != ta.rows() {
            return Err(Error::shape("scale_rows", ta.shape(), tw.shape()));
        }
        let n = ta.cols();
        let mut data = ta.data().to_vec();
        for (row, &s) in data.chunks_mut(n).zip(tw.data()) {
            row.iter_mut().for_each(|x| *x *= s);
        }
        let shape = ta.shape().to_vec();
        Ok(self.push(Tensor::matrix(shape, data), Op::ScaleRows(a, w), &[a, w]))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::matrix(shape, data), op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(
            a,
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            Op::Sigmoid(a),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        self.map(a, |x| 1.0 - x, Op::OneMinus(a))
    }

    /// Row-wise softmax over the last axis, with max subtraction.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&Mask>) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        if let Some(Mask::Explicit(mk)) = mask {
            if mk.len() != m * n {
                return Err(Error::shape("softmax mask", ta.shape(), &[mk.len()]));
            }
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let src = &ta.data()[i * n..(i + 1) * n];
            let dst = &mut out[i * n..(i + 1) * n];
            match mask {
                None => softmax_row(src, dst, |_| true),
                Some(mk) => softmax_row(src, dst, |j| mk.allows(i, j, n)),
            }
        }
        let shape = ta.shape().to_vec();
        Ok(self.push(Tensor::matrix(shape, out), Op::Softmax(a), &[a]))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let n = ta.cols();
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(n) {
            let lse = super::kernels::log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let shape = ta.shape().to_vec();
        self.push(Tensor::matrix(shape, out), Op::LogSoftmax(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let n = tx.cols();
        if tg.len() != n || tb.len() != n {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let m = tx.rows();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &tx.data()[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let shape = tx.shape().to_vec();
        Ok(self.push(
            Tensor::matrix(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Selects rows of `a: [N, d]`; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (rows, d) = (ta.rows(), ta.cols());
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= rows {
                return Err(Error::Range {
                    what: "row",
                    index: i,
                    limit: rows,
                });
            }
            data.extend_from_slice(ta.row(i));
        }
        Ok(self.push(
            Tensor::matrix(vec![idx.len(), d], data),
            Op::GatherRows(a, idx.to_vec()),
            &[a],
        ))
    }

    /// Copy of `base` with rows `idx` replaced by the rows of `rows`.
    /// Indices must be distinct.
    pub fn scatter_rows(&mut self, base: Var, idx: &[usize], rows: Var) -> Result<Var> {
        let (tb, tr) = (self.value(base), self.value(rows));
        let d = tb.cols();
        if tr.cols() != d || tr.rows() != idx.len() {
            return Err(Error::shape("scatter_rows", tb.shape(), tr.shape()));
        }
        let mut seen = std::collections::HashSet::with_capacity(idx.len());
        let mut data = tb.data().to_vec();
        for (k, &i) in idx.iter().enumerate() {
            if i >= tb.rows() {
                return Err(Error::Range {
                    what: "row",
                    index: i,
                    limit: tb.rows(),
                });
            }
            if !seen.insert(i) {
                return Err(Error::Contract(format!("scatter_rows index {i} repeated")));
            }
            data[i * d..(i + 1) * d].copy_from_slice(tr.row(k));
        }
        let shape = tb.shape().to_vec();
        Ok(self.push(
            Tensor::matrix(shape, data),
            Op::ScatterRows {
                base,
                idx: idx.to_vec(),
                rows,
            },
            &[base, rows],
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.rows_cols(parts[0]).0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if r != m {
                return Err(Error::shape("concat_cols", &[m], &[r]));
            }
            total += c;
        }
        let mut data = vec![0.0; m * total];
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for i in 0..m {
                data[i * total + off..i * total + off + c].copy_from_slice(t.row(i));
            }
            off += c;
        }
        Ok(self.push(
            Tensor::matrix(vec![m, total], data),
            Op::ConcatCols(parts.to_vec()),
            parts,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.rows_cols(parts[0]).1;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != n {
                return Err(Error::shape("concat_rows", &[n], &[t.cols()]));
            }
            data.extend_from_slice(t.data());
        }
        let m = data.len() / n;
        Ok(self.push(
            Tensor::matrix(vec![m, n], data),
            Op::ConcatRows(parts.to_vec()),
            parts,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        if start >= end || end > n {
            return Err(Error::Range {
                what: "column",
                index: end,
                limit: n,
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&ta.row(i)[start..end]);
        }
        Ok(self.push(
            Tensor::matrix(vec![m, w], data),
            Op::SliceCols(a, start, end),
            &[a],
        ))
    }

    /// Divides each row by its sum.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let n = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            let s: f64 = row.iter().sum();
            if s == 0.0 || !s.is_finite() {
                return Err(Error::Numerical(format!("cannot normalize row with sum {s}")));
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        let shape = ta.shape().to_vec();
        Ok(self.push(Tensor::matrix(shape, data), Op::NormalizeRows(a), &[a]))
    }

    /// Column sums of `a: [m, n]` as a `[1, n]` row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let n = ta.cols();
        let mut out = vec![0.0; n];
        for row in ta.data().chunks(n) {
            out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
        }
        self.push(Tensor::matrix(vec![1, n], out), Op::SumRows(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// `-Σ log softmax(logits[row])[class]` over `(row, class)` targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        let tl = self.value(logits);
        let (m, n) = (tl.rows(), tl.cols());
        let mut loss = 0.0;
        let mut probs = Vec::with_capacity(targets.len() * n);
        for &(r, c) in targets {
            if r >= m || c >= n {
                return Err(Error::Range {
                    what: "cross-entropy target",
                    index: if r >= m { r } else { c },
                    limit: if r >= m { m } else { n },
                });
            }
            let row = tl.row(r);
            let lse = super::kernels::log_sum_exp(row);
            loss -= row[c] - lse;
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        let mut params = ParamGrads::new();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients {
                node_grads: grads,
                params,
            });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            if let Op::Param(id) = node.op {
                params.accumulate(id, &g);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            node_grads: grads,
            params,
        })
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.rg(a) {
                    gemm_nt(g, tb.data(), acc(grads, a, m * k), m, n, k);
                }
                if self.rg(b) {
                    gemm_tn(ta.data(), g, acc(grads, b, k * n), m, k, n);
                }
            }
            &Op::MatMulNT(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if self.rg(a) {
                    gemm_nn(g, tb.data(), acc(grads, a, m * k), m, n, k);
                }
                if self.rg(b) {
                    gemm_tn(g, ta.data(), acc(grads, b, n * k), m, n, k);
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.rg(v) {
                        axpy(1.0, g, acc(grads, v, g.len()));
                    }
                }
            }
            &Op::Sub(a, b) => {
                if self.rg(a) {
                    axpy(1.0, g, acc(grads, a, g.len()));
                }
                if self.rg(b) {
                    axpy(-1.0, g, acc(grads, b, g.len()));
                }
            }
            &Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                if self.rg(a) {
                    let ga = acc(grads, a, g.len());
                    for ((x, gi), y) in ga.iter_mut().zip(g).zip(tb.data()) {
                        *x += gi * y;
                    }
                }
                if self.rg(b) {
                    let gb = acc(grads, b, g.len());
                    for ((x, gi), y) in gb.iter_mut().zip(g).zip(ta.data()) {
                        *x += gi * y;
                    }
                }
            }
            &Op::AddRow(a, b) => {
                if self.rg(a) {
                    axpy(1.0, g, acc(grads, a, g.len()));
                }
                if self.rg(b) {
                    let n = self.value(b).len();
                    let gb = acc(grads, b, n);
                    for row in g.chunks(n) {
                        axpy(1.0, row, gb);
                    }
                }
            }
            &Op::Scale(a, c) => {
                if self.rg(a) {
                    axpy(c, g, acc(grads, a, g.len()));
                }
            }
            &Op::ScaleRows(a, w) => {
                let (ta, tw) = (self.value(a), self.value(w));
                let n = ta.cols();
                if self.rg(a) {
                    let ga = acc(grads, a, g.len());
                    for (i, &s) in tw.data().iter().enumerate() {
                        axpy(s, &g[i * n..(i + 1) * n], &mut ga[i * n..(i + 1) * n]);
                    }
                }
                if self.rg(w) {
                    let gw = acc(grads, w, tw.len());
                    for (i, x) in gw.iter_mut().enumerate() {
                        *x += dot(&g[i * n..(i + 1) * n], ta.row(i));
                    }
                }
            }
            &Op::Relu(a) => {
                if self.rg(a) {
                    let ga = acc(grads, a, g.len());
                    for ((x, gi), y) in ga.iter_mut().zip(g).zip(out.data()) {
                        if *y > 0.0 {
                            *x += gi;
                        }
                    }
                }
            }
            &Op::Sigmoid(a) => {
                if self.rg(a) {
                    let ga = acc(grads, a, g.len());
                    for ((x, gi), y) in ga.iter_mut().zip(g).zip(out.data()) {
                        *x += gi * y * (1.0 - y);
                    }
                }
            }
            &Op::Tanh(a) => {
                if self.rg(a) {
                    let ga = acc(grads, a, g.len());
                    for ((x, gi), y) in ga.iter_mut().zip(g).zip(out.data()) {
                        *x += gi * (1.0 - y * y);
                    }
                }
            }
            &Op::OneMinus(a) => {
                if self.rg(a) {
                    axpy(-1.0, g, acc(grads, a, g.len()));
                }
            }
            &Op::Softmax(a) => {
                if self.rg(a) {
                    let n = out.cols();
                    let ga = acc(grads, a, g.len());
                    for ((gr, yr), xr) in g.chunks(n).zip(out.data().chunks(n)).zip(ga.chunks_mut(n)) {
                        let s = dot(gr, yr);
                        for j in 0..n {
                            xr[j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            &Op::LogSoftmax(a) => {
                if self.rg(a) {
                    let n = out.cols();
                    let ga = acc(grads, a, g.len());
                    for ((gr, yr), xr) in g.chunks(n).zip(out.data().chunks(n)).zip(ga.chunks_mut(n)) {
                        let s: f64 = gr.iter().sum();
                        for j in 0..n {
                            xr[j] += gr[j] - yr[j].exp() * s;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = out.cols();
                let tg = self.value(*gain);
                if self.rg(*gain) {
                    let gg = acc(grads, *gain, n);
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if self.rg(*bias) {
                    let gb = acc(grads, *bias, n);
                    for gr in g.chunks(n) {
                        axpy(1.0, gr, gb);
                    }
                }
                if self.rg(*x) {
                    let gx = acc(grads, *x, g.len());
                    let mut dh = vec![0.0; n];
                    for (i, (gr, hr)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        for j in 0..n {
                            dh[j] = gr[j] * tg.data()[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dh_h = dot(&dh, hr) / n as f64;
                        let xr = &mut gx[i * n..(i + 1) * n];
                        for j in 0..n {
                            xr[j] += inv_std[i] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                if self.rg(*a) {
                    let ta = self.value(*a);
                    let d = ta.cols();
                    let ga = acc(grads, *a, ta.len());
                    for (k, &i) in idx.iter().enumerate() {
                        axpy(1.0, &g[k * d..(k + 1) * d], &mut ga[i * d..(i + 1) * d]);
                    }
                }
            }
            Op::ScatterRows { base, idx, rows } => {
                let d = out.cols();
                if self.rg(*base) {
                    let gb = acc(grads, *base, g.len());
                    let mut replaced = vec![false; out.rows()];
                    idx.iter().for_each(|&i| replaced[i] = true);
                    for (i, r) in replaced.iter().enumerate() {
                        if !r {
                            axpy(1.0, &g[i * d..(i + 1) * d], &mut gb[i * d..(i + 1) * d]);
                        }
                    }
                }
                if self.rg(*rows) {
                    let gr = acc(grads, *rows, idx.len() * d);
                    for (k, &i) in idx.iter().enumerate() {
                        axpy(1.0, &g[i * d..(i + 1) * d], &mut gr[k * d..(k + 1) * d]);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let m = out.rows();
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.rg(p) {
                        let gp = acc(grads, p, m * c);
                        for i in 0..m {
                            axpy(
                                1.0,
                                &g[i * total + off..i * total + off + c],
                                &mut gp[i * c..(i + 1) * c],
                            );
                        }
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.rg(p) {
                        axpy(1.0, &g[off..off + len], acc(grads, p, len));
                    }
                    off += len;
                }
            }
            &Op::SliceCols(a, start, end) => {
                if self.rg(a) {
                    let ta = self.value(a);
                    let (m, n) = (ta.rows(), ta.cols());
                    let w = end - start;
                    let ga = acc(grads, a, m * n);
                    for i in 0..m {
                        axpy(1.0, &g[i * w..(i + 1) * w], &mut ga[i * n + start..i * n + end]);
                    }
                }
            }
            &Op::NormalizeRows(a) => {
                if self.rg(a) {
                    let ta = self.value(a);
                    let n = ta.cols();
                    let ga = acc(grads, a, g.len());
                    for i in 0..ta.rows() {
                        let s: f64 = ta.row(i).iter().sum();
                        let gr = &g[i * n..(i + 1) * n];
                        let yr = out.row(i);
                        let d = dot(gr, yr);
                        for j in 0..n {
                            ga[i * n + j] += (gr[j] - d) / s;
                        }
                    }
                }
            }
            &Op::SumRows(a) => {
                if self.rg(a) {
                    let ta = self.value(a);
                    let n = ta.cols();
                    let ga = acc(grads, a, ta.len());
                    for row in ga.chunks_mut(n) {
                        axpy(1.0, g, row);
                    }
                }
            }
            &Op::Sum(a) => {
                if self.rg(a) {
                    let len = self.value(a).len();
                    let ga = acc(grads, a, len);
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.rg(*logits) {
                    let tl = self.value(*logits);
                    let n = tl.cols();
                    let gl = acc(grads, *logits, tl.len());
                    for (k, &(r, c)) in targets.iter().enumerate() {
                        let p = &probs[k * n..(k + 1) * n];
                        let row = &mut gl[r * n..(r + 1) * n];
                        axpy(g[0], p, row);
                        row[c] -= g[0];
                    }
                }
            }
        }
    }
}
