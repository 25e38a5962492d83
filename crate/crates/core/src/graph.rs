//! Eager reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Graph`] is a define-by-run tape: each op computes its value
//! immediately and appends a node recording how to route gradients to its
//! parents. [`Graph::backward`] then walks the tape once in reverse. The op
//! set is exactly what the three-branch prompt-tuned transformer needs:
//! matmul, broadcast add, row softmax, layer norm, GELU, token-axis
//! concat/slice, head-axis concat/slice, flat gather/scatter (patchify and
//! visual-prompt placement), row L2 normalization, and a clamped
//! negative-log-likelihood readout.
//!
//! Because the tape is define-by-run, a `Var` is proof that its forward
//! value exists; "backward before forward" is unrepresentable. `backward`
//! still validates that the loss node is a scalar.

use std::sync::Arc;

use indexmap::IndexMap;

use crate::error::{MmptError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// `a[i, :] + b[0, :]` for every row i.
    AddRow(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    Gelu(Var),
    /// `out.data[k] = x.data[idx[k]]` over flattened storage.
    Gather { x: Var, idx: Arc<Vec<usize>> },
    /// `out.data[idx[k]] += x.data[k]` into a fresh zero tensor.
    ScatterAdd { x: Var, idx: Arc<Vec<usize>> },
    L2NormRows { x: Var, eps: f64 },
    MeanAll(Var),
    /// `sum_i -ln(max(probs[i, t_i], clamp))`.
    NllSum { probs: Var, targets: Arc<Vec<usize>>, clamp: f64 },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
    params: IndexMap<String, Var>,
    ran_backward: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), params: IndexMap::new(), ran_backward: false }
    }

    fn push(&mut self, value: Tensor<S>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input: participates in the forward pass, receives no gradient.
    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Gradient leaf. `trainable: false` makes this an input in disguise,
    /// which is how frozen parameters drop out of the gradient set.
    pub fn leaf(&mut self, value: Tensor<S>, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    /// Named gradient leaf; the name keys the entry in [`Graph::param_grads`].
    pub fn named_leaf(&mut self, name: &str, value: Tensor<S>, trainable: bool) -> Var {
        let v = self.leaf(value, trainable);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].value.rows()
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].value.cols()
    }

    // ── Ops ──────────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value);
        let rg = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "add shapes must match");
        let mut value = ta.clone();
        value.add_assign(tb);
        let rg = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(tb.rows(), 1, "add_row bias must be a single row");
        assert_eq!(ta.cols(), tb.cols(), "add_row widths must match");
        let mut value = ta.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            for (x, &b) in row.iter_mut().zip(tb.row(0)) {
                *x = *x + b;
            }
        }
        let rg = self.needs(a) || self.needs(b);
        self.push(value, Op::AddRow(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let mut value = self.nodes[a.0].value.clone();
        value.scale_assign(S::of_f64(k));
        let rg = self.needs(a);
        self.push(value, Op::Scale(a, k), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.transpose();
        let rg = self.needs(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let cols = self.cols(parts[0]);
        let rows: usize = parts.iter().map(|&p| self.rows(p)).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            let t = &self.nodes[p.0].value;
            assert_eq!(t.cols(), cols, "concat_rows widths must match");
            data.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = &self.nodes[a.0].value;
        assert!(start + len <= t.rows(), "slice_rows out of range");
        let cols = t.cols();
        let data = t.data()[start * cols..(start + len) * cols].to_vec();
        let rg = self.needs(a);
        self.push(Tensor::from_vec(len, cols, data), Op::SliceRows(a, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let rows = self.rows(parts[0]);
        let cols: usize = parts.iter().map(|&p| self.cols(p)).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            assert_eq!(t.rows(), rows, "concat_cols heights must match");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + t.cols()].copy_from_slice(t.row(r));
            }
            offset += t.cols();
        }
        let rg = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = &self.nodes[a.0].value;
        assert!(start + len <= t.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(t.rows(), len);
        for r in 0..t.rows() {
            out.row_mut(r).copy_from_slice(&t.row(r)[start..start + len]);
        }
        let rg = self.needs(a);
        self.push(out, Op::SliceCols(a, start), rg)
    }

    /// Row-wise softmax with max subtraction. Exact-zero underflow is floored
    /// to the smallest positive normal so downstream probabilities stay
    /// strictly positive even at saturating temperatures.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let mut out = t.clone();
        for r in 0..out.rows() {
            softmax_row_inplace(out.row_mut(r));
        }
        let rg = self.needs(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let t = &self.nodes[x.0].value;
        let d = t.cols();
        assert_eq!(self.nodes[gain.0].value.shape(), (1, d), "layer_norm gain shape");
        assert_eq!(self.nodes[bias.0].value.shape(), (1, d), "layer_norm bias shape");
        let mut out = Tensor::zeros(t.rows(), d);
        for r in 0..t.rows() {
            let (xhat, _) = normalize_row(t.row(r), eps);
            let g = self.nodes[gain.0].value.row(0);
            let b = self.nodes[bias.0].value.row(0);
            for c in 0..d {
                out.row_mut(r)[c] = xhat[c] * g[c] + b[c];
            }
        }
        let rg = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(out, Op::LayerNorm { x, gain, bias, eps }, rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let mut value = self.nodes[a.0].value.clone();
        for v in value.data_mut() {
            *v = gelu_scalar(*v);
        }
        let rg = self.needs(a);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn gather(&mut self, x: Var, idx: Arc<Vec<usize>>, rows: usize, cols: usize) -> Var {
        let t = &self.nodes[x.0].value;
        assert_eq!(idx.len(), rows * cols, "gather index count must match output size");
        let data: Vec<S> = idx.iter().map(|&i| t.data()[i]).collect();
        let rg = self.needs(x);
        self.push(Tensor::from_vec(rows, cols, data), Op::Gather { x, idx }, rg)
    }

    pub fn scatter_add(&mut self, x: Var, idx: Arc<Vec<usize>>, rows: usize, cols: usize) -> Var {
        let t = &self.nodes[x.0].value;
        assert_eq!(idx.len(), t.len(), "scatter_add needs one target index per element");
        let mut out = Tensor::zeros(rows, cols);
        for (k, &i) in idx.iter().enumerate() {
            out.data_mut()[i] = out.data_mut()[i] + t.data()[k];
        }
        let rg = self.needs(x);
        self.push(out, Op::ScatterAdd { x, idx }, rg)
    }

    /// Rows scaled to unit L2 norm, guarded as `x / (|x| + eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let t = &self.nodes[x.0].value;
        let mut out = t.clone();
        for r in 0..out.rows() {
            let norm = row_norm(out.row(r));
            let inv = S::one() / (norm + S::of_f64(eps));
            for v in out.row_mut(r) {
                *v = *v * inv;
            }
        }
        let rg = self.needs(x);
        self.push(out, Op::L2NormRows { x, eps }, rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let n = S::of_f64(t.len() as f64);
        let sum = t.data().iter().fold(S::zero(), |acc, &v| acc + v);
        let rg = self.needs(a);
        self.push(Tensor::scalar(sum / n), Op::MeanAll(a), rg)
    }

    /// Summed negative log-likelihood of one target class per row, clamping
    /// probabilities at `clamp` before the log. Returns the scalar node and
    /// the number of rows whose target probability needed clamping.
    pub fn nll_sum(&mut self, probs: Var, targets: &[usize], clamp: f64) -> (Var, usize) {
        let t = &self.nodes[probs.0].value;
        assert_eq!(targets.len(), t.rows(), "one target per probability row");
        let clamp_s = S::of_f64(clamp);
        let mut total = S::zero();
        let mut clamped = 0;
        for (r, &cls) in targets.iter().enumerate() {
            assert!(cls < t.cols(), "target class out of range");
            let mut p = t.at(r, cls);
            if p < clamp_s {
                p = clamp_s;
                clamped += 1;
            }
            total = total - p.ln();
        }
        let rg = self.needs(probs);
        let op = Op::NllSum { probs, targets: Arc::new(targets.to_vec()), clamp };
        (self.push(Tensor::scalar(total), op, rg), clamped)
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Gradients of all reachable
    /// grad-requiring nodes become available through [`Graph::grad`] and
    /// [`Graph::param_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let t = &self.nodes[loss.0].value;
        if t.shape() != (1, 1) {
            return Err(MmptError::shape(format!(
                "backward requires a scalar loss, got [{}, {}]",
                t.rows(),
                t.cols()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(Tensor::scalar(S::one()));
        self.ran_backward = true;

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else { continue };
            self.propagate(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    pub fn ran_backward(&self) -> bool {
        self.ran_backward
    }

    /// Gradients of trainable named leaves, in binding order. Parameters
    /// that do not influence the loss report zero gradients.
    pub fn param_grads(&self) -> IndexMap<String, Tensor<S>> {
        let mut out = IndexMap::new();
        for (name, &v) in &self.params {
            if !self.nodes[v.0].requires_grad {
                continue;
            }
            let g = match self.grad(v) {
                Some(g) => g.clone(),
                None => {
                    let val = &self.nodes[v.0].value;
                    Tensor::zeros(val.rows(), val.cols())
                }
            };
            out.insert(name.clone(), g);
        }
        out
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    /// Values of every row-softmax node, for normalization diagnostics.
    pub fn softmax_outputs(&self) -> Vec<&Tensor<S>> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::SoftmaxRows(_)))
            .map(|n| &n.value)
            .collect()
    }

    fn acc(&mut self, v: Var, delta: Tensor<S>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&mut self, id: usize, g: &Tensor<S>) {
        match self.nodes[id].op.clone() {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(a) {
                    let bt = self.nodes[b.0].value.transpose();
                    self.acc(a, g.matmul(&bt));
                }
                if self.needs(b) {
                    let at = self.nodes[a.0].value.transpose();
                    self.acc(b, at.matmul(g));
                }
            }
            Op::Add(a, b) => {
                if self.needs(a) {
                    self.acc(a, g.clone());
                }
                if self.needs(b) {
                    self.acc(b, g.clone());
                }
            }
            Op::AddRow(a, b) => {
                if self.needs(a) {
                    self.acc(a, g.clone());
                }
                if self.needs(b) {
                    let mut gb = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (s, &v) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                            *s = *s + v;
                        }
                    }
                    self.acc(b, gb);
                }
            }
            Op::Scale(a, k) => {
                let mut ga = g.clone();
                ga.scale_assign(S::of_f64(k));
                self.acc(a, ga);
            }
            Op::Transpose(a) => {
                self.acc(a, g.transpose());
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut start = 0;
                for p in parts {
                    let rows = self.rows(p);
                    if self.needs(p) {
                        let data = g.data()[start * cols..(start + rows) * cols].to_vec();
                        self.acc(p, Tensor::from_vec(rows, cols, data));
                    }
                    start += rows;
                }
            }
            Op::SliceRows(a, start) => {
                let src = &self.nodes[a.0].value;
                let mut ga = Tensor::zeros(src.rows(), src.cols());
                let cols = src.cols();
                ga.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                self.acc(a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let cols = self.cols(p);
                    if self.needs(p) {
                        let mut gp = Tensor::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        self.acc(p, gp);
                    }
                    offset += cols;
                }
            }
            Op::SliceCols(a, start) => {
                let src = &self.nodes[a.0].value;
                let mut ga = Tensor::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    ga.row_mut(r)[start..start + g.cols()].copy_from_slice(g.row(r));
                }
                self.acc(a, ga);
            }
            Op::SoftmaxRows(a) => {
                // dx = y * (dy - sum(dy * y)) per row, y = softmax output.
                let y = &self.nodes[id].value;
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot = y
                        .row(r)
                        .iter()
                        .zip(g.row(r))
                        .fold(S::zero(), |acc, (&yi, &gi)| acc + yi * gi);
                    for c in 0..y.cols() {
                        ga.row_mut(r)[c] = y.at(r, c) * (g.at(r, c) - dot);
                    }
                }
                self.acc(a, ga);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xt = self.nodes[x.0].value.clone();
                let gt = self.nodes[gain.0].value.clone();
                let d = xt.cols();
                let inv_d = S::one() / S::of_f64(d as f64);
                let mut gx = Tensor::zeros(xt.rows(), d);
                let mut gg = Tensor::zeros(1, d);
                let mut gb = Tensor::zeros(1, d);
                for r in 0..xt.rows() {
                    let (xhat, inv_std) = normalize_row(xt.row(r), eps);
                    // dL/dxhat = g ⊙ gain; dx = (dxhat - mean(dxhat)
                    //            - xhat ⊙ mean(dxhat ⊙ xhat)) * inv_std
                    let mut m1 = S::zero();
                    let mut m2 = S::zero();
                    let mut dxhat = vec![S::zero(); d];
                    for c in 0..d {
                        let dh = g.at(r, c) * gt.at(0, c);
                        dxhat[c] = dh;
                        m1 = m1 + dh;
                        m2 = m2 + dh * xhat[c];
                        gg.row_mut(0)[c] = gg.at(0, c) + g.at(r, c) * xhat[c];
                        gb.row_mut(0)[c] = gb.at(0, c) + g.at(r, c);
                    }
                    m1 = m1 * inv_d;
                    m2 = m2 * inv_d;
                    for c in 0..d {
                        gx.row_mut(r)[c] = (dxhat[c] - m1 - xhat[c] * m2) * inv_std;
                    }
                }
                if self.needs(x) {
                    self.acc(x, gx);
                }
                if self.needs(gain) {
                    self.acc(gain, gg);
                }
                if self.needs(bias) {
                    self.acc(bias, gb);
                }
            }
            Op::Gelu(a) => {
                let xt = &self.nodes[a.0].value;
                let mut ga = g.clone();
                for (gv, &xv) in ga.data_mut().iter_mut().zip(xt.data()) {
                    *gv = *gv * gelu_grad_scalar(xv);
                }
                self.acc(a, ga);
            }
            Op::Gather { x, idx } => {
                let src = &self.nodes[x.0].value;
                let mut gx = Tensor::zeros(src.rows(), src.cols());
                for (k, &i) in idx.iter().enumerate() {
                    gx.data_mut()[i] = gx.data_mut()[i] + g.data()[k];
                }
                self.acc(x, gx);
            }
            Op::ScatterAdd { x, idx } => {
                let src = &self.nodes[x.0].value;
                let mut gx = Tensor::zeros(src.rows(), src.cols());
                for (k, &i) in idx.iter().enumerate() {
                    gx.data_mut()[k] = g.data()[i];
                }
                self.acc(x, gx);
            }
            Op::L2NormRows { x, eps } => {
                let xt = self.nodes[x.0].value.clone();
                let mut gx = Tensor::zeros(xt.rows(), xt.cols());
                for r in 0..xt.rows() {
                    let norm = row_norm(xt.row(r));
                    let rr = norm + S::of_f64(eps);
                    let inv_r = S::one() / rr;
                    // y = x / r(|x|): dx = dy/r - x * (dy . x) / (r^2 |x|)
                    let dot = xt
                        .row(r)
                        .iter()
                        .zip(g.row(r))
                        .fold(S::zero(), |acc, (&xi, &gi)| acc + xi * gi);
                    let coef = if norm > S::zero() { dot * inv_r * inv_r / norm } else { S::zero() };
                    for c in 0..xt.cols() {
                        gx.row_mut(r)[c] = g.at(r, c) * inv_r - xt.at(r, c) * coef;
                    }
                }
                self.acc(x, gx);
            }
            Op::MeanAll(a) => {
                let src = &self.nodes[a.0].value;
                let k = g.item() / S::of_f64(src.len() as f64);
                let mut ga = Tensor::zeros(src.rows(), src.cols());
                for v in ga.data_mut() {
                    *v = k;
                }
                self.acc(a, ga);
            }
            Op::NllSum { probs, targets, clamp } => {
                let pt = &self.nodes[probs.0].value;
                let upstream = g.item();
                let clamp_s = S::of_f64(clamp);
                let mut gp = Tensor::zeros(pt.rows(), pt.cols());
                for (r, &cls) in targets.iter().enumerate() {
                    let p = pt.at(r, cls);
                    if p >= clamp_s {
                        *gp.at_mut(r, cls) = -upstream / p;
                    }
                }
                self.acc(probs, gp);
            }
        }
    }
}

/// Numerically stable in-place softmax with strict-positivity floor.
pub fn softmax_row_inplace<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    let floor = S::min_positive();
    for v in row.iter_mut() {
        *v = *v / sum;
        if *v < floor {
            *v = floor;
        }
    }
}

fn row_norm<S: Scalar>(row: &[S]) -> S {
    row.iter().fold(S::zero(), |acc, &v| acc + v * v).sqrt()
}

/// Returns (normalized row, 1/std) for layer norm.
fn normalize_row<S: Scalar>(row: &[S], eps: f64) -> (Vec<S>, S) {
    let n = S::of_f64(row.len() as f64);
    let mean = row.iter().fold(S::zero(), |acc, &v| acc + v) / n;
    let var = row.iter().fold(S::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / n;
    let inv_std = S::one() / (var + S::of_f64(eps)).sqrt();
    (row.iter().map(|&v| (v - mean) * inv_std).collect(), inv_std)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// tanh-approximated GELU.
fn gelu_scalar<S: Scalar>(x: S) -> S {
    let c = S::of_f64(GELU_C);
    let a = S::of_f64(GELU_A);
    let half = S::of_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_grad_scalar<S: Scalar>(x: S) -> S {
    let c = S::of_f64(GELU_C);
    let a = S::of_f64(GELU_A);
    let half = S::of_f64(0.5);
    let three = S::of_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * a * x * x)
}
