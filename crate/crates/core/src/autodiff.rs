//! Reverse-mode automatic differentiation over a linear tape of 2-D values.
//!
//! Every value on the tape is a row-major matrix; vectors are single rows and
//! scalars are 1×1. Operations are appended in execution order, so the tape is
//! topologically sorted by construction and `backward` is a single reverse sweep.
//! Nodes whose inputs carry no gradient are never visited by the sweep.

use std::borrow::Cow;

use crate::error::{contract_err, shape_err, Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax(Var, f64),
    LogSoftmax(Var, f64),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    L2NormalizeRows { x: Var, norms: Vec<f64>, eps: f64 },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    Sum(Var),
    DotConst(Var, Vec<f64>),
    CrossEntropy { logits: Var, label: usize, probs: Vec<f64> },
}

struct Node<'p> {
    value: Cow<'p, [f64]>,
    rows: usize,
    cols: usize,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Leaves may borrow parameter storage for `'p`.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

/// Gradients of a scalar with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn softmax_row(x: &[f64], tau: f64, out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = ((v - max) / tau).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_softmax_row(x: &[f64], tau: f64, out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = x.iter().map(|&v| ((v - max) / tau).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max) / tau - lse;
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("temperature must be positive, got {tau}")))
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, [f64]>, rows: usize, cols: usize, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { value, rows, cols, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf borrowing a tensor's storage, viewed as a matrix.
    pub fn leaf_ref(&mut self, t: &'p Tensor, requires_grad: bool) -> Var {
        let (rows, cols) = t.as_matrix_dims();
        self.push(Cow::Borrowed(t.data()), rows, cols, Op::Leaf, requires_grad)
    }

    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if rows == 0 || cols == 0 || rows * cols != data.len() {
            return Err(shape_err(format!("leaf [{rows}×{cols}] given {} values", data.len())));
        }
        Ok(self.push(Cow::Owned(data), rows, cols, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        self.leaf(rows, cols, data, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.dims(v);
        Tensor::matrix(r, c, self.value(v).to_vec()).expect("tape values are well formed")
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(shape_err(format!("matmul: [{m}×{k}] · [{k2}×{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, self.value(a), self.value(b), &mut out);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Cow::Owned(out), m, n, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`, the layout used by linear layers with [out×in] weights.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(shape_err(format!("matmul: [{m}×{k}] · [{n}×{k2}]ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(m, k, n, self.value(a), self.value(b), &mut out);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Cow::Owned(out), m, n, Op::MatMulNt(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(shape_err(format!("add: {:?} vs {:?}", self.dims(a), self.dims(b))));
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let (r, c) = self.dims(a);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Cow::Owned(out), r, c, Op::Add(a, b), ng))
    }

    /// Adds a 1×n row to every row of an m×n value.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.dims(row) != (1, n) {
            return Err(shape_err(format!("add_row: [{m}×{n}] + {:?}", self.dims(row))));
        }
        let bias = self.value(row);
        let mut out = self.value(a).to_vec();
        for r in out.chunks_exact_mut(n) {
            for (o, b) in r.iter_mut().zip(bias) {
                *o += b;
            }
        }
        let ng = self.ng(&[a, row]);
        Ok(self.push(Cow::Owned(out), m, n, Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * s).collect();
        let (r, c) = self.dims(a);
        let ng = self.ng(&[a]);
        self.push(Cow::Owned(out), r, c, Op::Scale(a, s), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu_scalar(x)).collect();
        let (r, c) = self.dims(a);
        let ng = self.ng(&[a]);
        self.push(Cow::Owned(out), r, c, Op::Gelu(a), ng)
    }

    /// Row-wise `softmax(x / tau)`.
    pub fn softmax(&mut self, a: Var, tau: f64) -> Result<Var> {
        check_tau(tau)?;
        let (r, c) = self.dims(a);
        let mut out = vec![0.0; r * c];
        for (o, x) in out.chunks_exact_mut(c).zip(self.value(a).chunks_exact(c)) {
            softmax_row(x, tau, o);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(Cow::Owned(out), r, c, Op::Softmax(a, tau), ng))
    }

    /// Row-wise `log_softmax(x / tau)`.
    pub fn log_softmax(&mut self, a: Var, tau: f64) -> Result<Var> {
        check_tau(tau)?;
        let (r, c) = self.dims(a);
        let mut out = vec![0.0; r * c];
        for (o, x) in out.chunks_exact_mut(c).zip(self.value(a).chunks_exact(c)) {
            log_softmax_row(x, tau, o);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(Cow::Owned(out), r, c, Op::LogSoftmax(a, tau), ng))
    }

    /// Row-wise normalization with population variance, then affine gain/bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.dims(gain) != (1, c) || self.dims(bias) != (1, c) {
            return Err(shape_err(format!(
                "layer_norm: input [{r}×{c}], gain {:?}, bias {:?}",
                self.dims(gain),
                self.dims(bias)
            )));
        }
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        let (g, b) = (self.value(gain), self.value(bias));
        for (row, xs) in self.value(x).chunks_exact(c).enumerate() {
            let mean = xs.iter().sum::<f64>() / c as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[row] = inv;
            for j in 0..c {
                let h = if var + eps > 0.0 { (xs[j] - mean) * inv } else { 0.0 };
                xhat[row * c + j] = h;
                out[row * c + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(Cow::Owned(out), r, c, Op::LayerNorm { x, gain, bias, xhat, inv_std }, ng))
    }

    /// Divides every row by its L2 norm (floored at `eps`).
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let (r, c) = self.dims(x);
        let mut norms = vec![0.0; r];
        let mut out = self.value(x).to_vec();
        for (row, o) in out.chunks_exact_mut(c).enumerate() {
            let n = o.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            norms[row] = n;
            for v in o.iter_mut() {
                *v /= n;
            }
        }
        let ng = self.ng(&[x]);
        self.push(Cow::Owned(out), r, c, Op::L2NormalizeRows { x, norms, eps }, ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if len == 0 || start + len > c {
            return Err(shape_err(format!("slice_cols {start}..{} of [{r}×{c}]", start + len)));
        }
        let mut out = Vec::with_capacity(r * len);
        for row in self.value(x).chunks_exact(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Cow::Owned(out), r, len, Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map(|&p| self.dims(p).0).ok_or_else(|| shape_err("concat_cols of nothing"))?;
        if parts.iter().any(|&p| self.dims(p).0 != r) {
            return Err(shape_err("concat_cols: row counts differ"));
        }
        let c: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(r * c);
        for row in 0..r {
            for &p in parts {
                let pc = self.dims(p).1;
                out.extend_from_slice(&self.value(p)[row * pc..(row + 1) * pc]);
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(Cow::Owned(out), r, c, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if len == 0 || start + len > r {
            return Err(shape_err(format!("slice_rows {start}..{} of [{r}×{c}]", start + len)));
        }
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(Cow::Owned(out), len, c, Op::SliceRows { x, start }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map(|&p| self.dims(p).1).ok_or_else(|| shape_err("concat_rows of nothing"))?;
        if parts.iter().any(|&p| self.dims(p).1 != c) {
            return Err(shape_err("concat_rows: column counts differ"));
        }
        let r: usize = parts.iter().map(|&p| self.dims(p).0).sum();
        let mut out = Vec::with_capacity(r * c);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let ng = self.ng(parts);
        Ok(self.push(Cow::Owned(out), r, c, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let ng = self.ng(&[x]);
        self.push(Cow::Owned(vec![s]), 1, 1, Op::Sum(x), ng)
    }

    /// `Σ x_i · c_i` against a constant of the same size.
    pub fn dot_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return Err(shape_err(format!(
                "dot_const: {} values against {}",
                self.value(x).len(),
                c.len()
            )));
        }
        let s = self.value(x).iter().zip(&c).map(|(a, b)| a * b).sum();
        let ng = self.ng(&[x]);
        Ok(self.push(Cow::Owned(vec![s]), 1, 1, Op::DotConst(x, c), ng))
    }

    /// `−log softmax(logits)[label]` for a single row of logits.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let (r, k) = self.dims(logits);
        if r != 1 {
            return Err(shape_err(format!("cross_entropy expects one row of logits, got [{r}×{k}]")));
        }
        if label >= k {
            return Err(Error::Index(format!("label {label} outside [0, {k})")));
        }
        let mut probs = vec![0.0; k];
        softmax_row(self.value(logits), 1.0, &mut probs);
        let mut logp = vec![0.0; k];
        log_softmax_row(self.value(logits), 1.0, &mut logp);
        let loss = -logp[label];
        let ng = self.ng(&[logits]);
        Ok(self.push(Cow::Owned(vec![loss]), 1, 1, Op::CrossEntropy { logits, label, probs }, ng))
    }

    /// Reverse sweep from a scalar. Gradients accumulate by summation in tape order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.dims(loss) != (1, 1) {
            return Err(contract_err(format!("backward needs a scalar loss, got {:?}", self.dims(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<'p>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &nodes[v.0];
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n.rows * n.cols]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].rows, nodes[a.0].cols);
                let n = nodes[b.0].cols;
                if wants(*a) {
                    acc(*a, &mut |da| gemm_nt(m, n, k, g, &nodes[b.0].value, da));
                }
                if wants(*b) {
                    acc(*b, &mut |db| gemm_tn(k, m, n, &nodes[a.0].value, g, db));
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (nodes[a.0].rows, nodes[a.0].cols);
                let n = nodes[b.0].rows;
                if wants(*a) {
                    acc(*a, &mut |da| gemm_nn(m, n, k, g, &nodes[b.0].value, da));
                }
                if wants(*b) {
                    acc(*b, &mut |db| gemm_tn(n, m, k, g, &nodes[a.0].value, db));
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(*v) {
                        acc(*v, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                    }
                }
            }
            Op::AddRow(a, row) => {
                if wants(*a) {
                    acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
                if wants(*row) {
                    let c = node.cols;
                    acc(*row, &mut |d| {
                        for gr in g.chunks_exact(c) {
                            d.iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                        }
                    });
                }
            }
            Op::Scale(a, s) => {
                if wants(*a) {
                    acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += s * y));
                }
            }
            Op::Gelu(a) => {
                if wants(*a) {
                    let xs = &nodes[a.0].value;
                    acc(*a, &mut |d| {
                        for ((dx, &x), gy) in d.iter_mut().zip(xs.iter()).zip(g) {
                            *dx += gy * gelu_derivative(x);
                        }
                    });
                }
            }
            Op::Softmax(a, tau) => {
                if wants(*a) {
                    let c = node.cols;
                    let y = &node.value;
                    acc(*a, &mut |d| {
                        for ((dr, yr), gr) in d.chunks_exact_mut(c).zip(y.chunks_exact(c)).zip(g.chunks_exact(c)) {
                            let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                            for j in 0..c {
                                dr[j] += yr[j] * (gr[j] - dot) / tau;
                            }
                        }
                    });
                }
            }
            Op::LogSoftmax(a, tau) => {
                if wants(*a) {
                    let c = node.cols;
                    let y = &node.value;
                    acc(*a, &mut |d| {
                        for ((dr, yr), gr) in d.chunks_exact_mut(c).zip(y.chunks_exact(c)).zip(g.chunks_exact(c)) {
                            let gsum: f64 = gr.iter().sum();
                            for j in 0..c {
                                dr[j] += (gr[j] - yr[j].exp() * gsum) / tau;
                            }
                        }
                    });
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let c = node.cols;
                let gv = &nodes[gain.0].value;
                if wants(*x) {
                    acc(*x, &mut |d| {
                        for (row, dr) in d.chunks_exact_mut(c).enumerate() {
                            let gr = &g[row * c..(row + 1) * c];
                            let hr = &xhat[row * c..(row + 1) * c];
                            let mut mean_dh = 0.0;
                            let mut mean_dh_h = 0.0;
                            for j in 0..c {
                                let dh = gr[j] * gv[j];
                                mean_dh += dh;
                                mean_dh_h += dh * hr[j];
                            }
                            mean_dh /= c as f64;
                            mean_dh_h /= c as f64;
                            for j in 0..c {
                                let dh = gr[j] * gv[j];
                                dr[j] += inv_std[row] * (dh - mean_dh - hr[j] * mean_dh_h);
                            }
                        }
                    });
                }
                if wants(*gain) {
                    acc(*gain, &mut |d| {
                        for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                            for j in 0..c {
                                d[j] += gr[j] * hr[j];
                            }
                        }
                    });
                }
                if wants(*bias) {
                    acc(*bias, &mut |d| {
                        for gr in g.chunks_exact(c) {
                            d.iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                        }
                    });
                }
            }
            Op::L2NormalizeRows { x, norms, eps } => {
                if wants(*x) {
                    let c = node.cols;
                    let y = &node.value;
                    acc(*x, &mut |d| {
                        for (row, dr) in d.chunks_exact_mut(c).enumerate() {
                            let n = norms[row];
                            let gr = &g[row * c..(row + 1) * c];
                            let yr = &y[row * c..(row + 1) * c];
                            if n > *eps {
                                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                                for j in 0..c {
                                    dr[j] += (gr[j] - yr[j] * dot) / n;
                                }
                            } else {
                                for j in 0..c {
                                    dr[j] += gr[j] / n;
                                }
                            }
                        }
                    });
                }
            }
            Op::SliceCols { x, start } => {
                if wants(*x) {
                    let (len, c) = (node.cols, nodes[x.0].cols);
                    acc(*x, &mut |d| {
                        for (dr, gr) in d.chunks_exact_mut(c).zip(g.chunks_exact(len)) {
                            dr[*start..start + len].iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                        }
                    });
                }
            }
            Op::ConcatCols(parts) => {
                let c = node.cols;
                let mut off = 0;
                for &p in parts {
                    let pc = nodes[p.0].cols;
                    if wants(p) {
                        acc(p, &mut |d| {
                            for (dr, gr) in d.chunks_exact_mut(pc).zip(g.chunks_exact(c)) {
                                dr.iter_mut().zip(&gr[off..off + pc]).for_each(|(a, b)| *a += b);
                            }
                        });
                    }
                    off += pc;
                }
            }
            Op::SliceRows { x, start } => {
                if wants(*x) {
                    let c = node.cols;
                    acc(*x, &mut |d| {
                        d[start * c..start * c + g.len()].iter_mut().zip(g).for_each(|(a, b)| *a += b);
                    });
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p.0].value.len();
                    if wants(p) {
                        acc(p, &mut |d| d.iter_mut().zip(&g[off..off + n]).for_each(|(a, b)| *a += b));
                    }
                    off += n;
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    acc(*x, &mut |d| d.iter_mut().for_each(|a| *a += g[0]));
                }
            }
            Op::DotConst(x, c) => {
                if wants(*x) {
                    acc(*x, &mut |d| d.iter_mut().zip(c).for_each(|(a, b)| *a += g[0] * b));
                }
            }
            Op::CrossEntropy { logits, label, probs } => {
                if wants(*logits) {
                    acc(*logits, &mut |d| {
                        for (j, (a, p)) in d.iter_mut().zip(probs).enumerate() {
                            let onehot = if j == *label { 1.0 } else { 0.0 };
                            *a += g[0] * (p - onehot);
                        }
                    });
                }
            }
        }
    }
}

fn unary<F>(x: &Tensor, f: F) -> Result<Tensor>
where
    F: for<'a> FnOnce(&mut Tape<'a>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.leaf_ref(x, false);
    let out = f(&mut tape, v)?;
    let mut t = tape.to_tensor(out);
    if x.rank() == 1 {
        t = Tensor::vector(t.into_data());
    }
    Ok(t)
}

/// `softmax(x / tau)` along the last axis.
pub fn softmax(x: &Tensor, tau: f64) -> Result<Tensor> {
    unary(x, |t, v| t.softmax(v, tau))
}

pub fn log_softmax(x: &Tensor, tau: f64) -> Result<Tensor> {
    unary(x, |t, v| t.log_softmax(v, tau))
}

pub fn gelu(x: &Tensor) -> Tensor {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| gelu_scalar(v)).collect())
        .expect("same shape")
}

/// Normalizes along the last axis; `gain` and `bias` are vectors of that length.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.leaf_ref(x, false);
    let g = tape.leaf_ref(gain, false);
    let b = tape.leaf_ref(bias, false);
    let out = tape.layer_norm(xv, g, b, eps)?;
    Tensor::new(x.shape().to_vec(), tape.value(out).to_vec())
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(shape_err(format!("matmul needs matrices, got {:?} and {:?}", a.shape(), b.shape())));
    }
    let mut tape = Tape::new();
    let av = tape.leaf_ref(a, false);
    let bv = tape.leaf_ref(b, false);
    let out = tape.matmul(av, bv)?;
    Ok(tape.to_tensor(out))
}

/// `−log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.leaf(1, logits.len(), logits.to_vec(), false)?;
    let l = tape.cross_entropy(v, label)?;
    Ok(tape.value(l)[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Central differences of `f` around `x`, one coordinate at a time.
    fn numeric_grad(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let mut x = x.to_vec();
        (0..x.len())
            .map(|i| {
                let orig = x[i];
                x[i] = orig + h;
                let up = f(&x);
                x[i] = orig - h;
                let down = f(&x);
                x[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    #[test]
    fn matmul_identity_and_known_product() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let eye = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        assert_eq!(matmul(&a, &eye).unwrap(), a);
        let b = Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2×3]") && err.contains("[2×3]"), "{err}");
    }

    #[test]
    fn matmul_sum_gradient_is_row_broadcast_of_b_column_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 12);
        let b = random(&mut rng, 8);
        let loss = |av: &[f64]| -> f64 {
            let mut t = Tape::new();
            let x = t.leaf(3, 4, av.to_vec(), false).unwrap();
            let y = t.leaf(4, 2, b.clone(), false).unwrap();
            let p = t.matmul(x, y).unwrap();
            let s = t.sum(p);
            t.value(s)[0]
        };
        let mut t = Tape::new();
        let x = t.leaf(3, 4, a.clone(), true).unwrap();
        let y = t.leaf(4, 2, b.clone(), false).unwrap();
        let p = t.matmul(x, y).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        let analytic = g.get(x).unwrap().to_vec();
        let row_sums: Vec<f64> = b.chunks(2).map(|r| r[0] + r[1]).collect();
        for r in 0..3 {
            for c in 0..4 {
                assert!((analytic[r * 4 + c] - row_sums[c]).abs() < 1e-15);
            }
        }
        let numeric = numeric_grad(&a, 1e-6, loss);
        assert!(max_rel_err(&analytic, &numeric) < 1e-6);
        assert!(g.get(y).is_none());
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&Tensor::vector(vec![3.0; 5]), 0.7).unwrap();
        assert!(u.data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
        assert_eq!(softmax(&Tensor::vector(vec![-4.0]), 2.0).unwrap().data(), &[1.0]);
        let p = softmax(&Tensor::vector(vec![0.0, 3f64.ln()]), 1.0).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-15 && (p.data()[1] - 0.75).abs() < 1e-15);
        assert!(matches!(softmax(&u, 0.0), Err(Error::Domain(_))));
        assert!(matches!(softmax(&u, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let one = Tensor::vector(vec![1.0, 1.0]);
        let zero = Tensor::vector(vec![0.0, 0.0]);
        let y = layer_norm(&Tensor::vector(vec![1.0, 3.0]), &one, &zero, 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
        let c = Tensor::matrix(2, 2, vec![5.0, 5.0, -2.0, -2.0]).unwrap();
        let y = layer_norm(&c, &one, &zero, 1e-6).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(layer_norm(&c, &Tensor::vector(vec![1.0; 3]), &zero, 1e-6).is_err());
    }

    #[test]
    fn gelu_and_cross_entropy_examples() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        let k = 7;
        for label in 0..k {
            let l = cross_entropy(&vec![0.3; k], label).unwrap();
            assert!((l - (k as f64).ln()).abs() < 1e-14);
        }
        assert!(matches!(cross_entropy(&[0.0, 1.0], 2), Err(Error::Index(_))));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = random(&mut rng, 6);
        let mut t = Tape::new();
        let v = t.leaf(1, 6, z.clone(), true).unwrap();
        let l = t.cross_entropy(v, 4).unwrap();
        let g = t.backward(l).unwrap();
        let numeric = numeric_grad(&z, 1e-6, |x| cross_entropy(x, 4).unwrap());
        assert!(max_rel_err(g.get(v).unwrap(), &numeric) < 1e-6);
        let p = softmax(&Tensor::vector(z), 1.0).unwrap();
        for (j, (&a, &pj)) in g.get(v).unwrap().iter().zip(p.data()).enumerate() {
            let expected = pj - if j == 4 { 1.0 } else { 0.0 };
            assert!((a - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn square_has_gradient_six_at_three() {
        let mut t = Tape::new();
        let x = t.leaf(1, 1, vec![3.0], true).unwrap();
        let x2 = t.matmul(x, x).unwrap();
        let g = t.backward(x2).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(1, 2, vec![1.0, 2.0], true).unwrap();
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    /// Composite of every primitive, checked against finite differences.
    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = random(&mut rng, 12);
        let w = random(&mut rng, 12);
        let gain = random(&mut rng, 4);
        let bias = random(&mut rng, 4);
        let target = random(&mut rng, 6);
        let build = |t: &mut Tape, xv: Vec<f64>, grad: bool| -> (Var, Var) {
            let x = t.leaf(3, 4, xv, grad).unwrap();
            let wv = t.leaf(3, 4, w.clone(), false).unwrap();
            let g = t.leaf(1, 4, gain.clone(), false).unwrap();
            let b = t.leaf(1, 4, bias.clone(), false).unwrap();
            let ln = t.layer_norm(x, g, b, 1e-5).unwrap();
            let ge = t.gelu(ln);
            let s = t.matmul_nt(ge, wv).unwrap(); // 3x3
            let sm = t.softmax(s, 0.7).unwrap();
            let h0 = t.slice_cols(ge, 0, 2).unwrap();
            let h1 = t.slice_cols(ge, 2, 2).unwrap();
            let cat = t.concat_cols(&[h1, h0]).unwrap();
            let mixed = t.matmul(sm, cat).unwrap(); // 3x4
            let r0 = t.slice_rows(mixed, 0, 1).unwrap();
            let r2 = t.slice_rows(mixed, 2, 1).unwrap();
            let rows = t.concat_rows(&[r2, r0]).unwrap();
            let nrm = t.l2_normalize_rows(rows, 1e-12);
            let add = t.add_row(nrm, b).unwrap();
            let sc = t.scale(add, 1.7);
            let ls = t.log_softmax(sc, 0.3).unwrap();
            let flat = t.slice_cols(ls, 0, 3).unwrap();
            let d = t.dot_const(flat, target.clone()).unwrap();
            let r1 = t.slice_rows(sc, 1, 1).unwrap();
            let ce = t.cross_entropy(r1, 1).unwrap();
            let both = t.add(d, ce).unwrap();
            (x, both)
        };
        let mut t = Tape::new();
        let (x, loss) = build(&mut t, x0.clone(), true);
        let g = t.backward(loss).unwrap();
        let numeric = numeric_grad(&x0, 1e-6, |xv| {
            let mut t = Tape::new();
            let (_, l) = build(&mut t, xv.to_vec(), false);
            t.value(l)[0]
        });
        let err = max_rel_err(g.get(x).unwrap(), &numeric);
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        let mut t = Tape::new();
        let x = t.leaf(1, 2, vec![1.0, -2.0], true).unwrap();
        let a = t.scale(x, 3.0);
        let b = t.add(a, x).unwrap();
        let s = t.sum(b);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[4.0, 4.0]);
    }
}
