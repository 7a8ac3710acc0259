//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! its value. [`Graph::backward`] walks the nodes in reverse and accumulates
//! vector-Jacobian products. Parameters enter the graph once per pass (the
//! node is cached), so a parameter reused in several places receives the sum
//! of all its contributions.

use std::sync::Arc;

use super::params::{ParamGrads, ParamId, ParamStore};
use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Probabilities are clamped to this floor before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    AddBias(Var, Var),
    MulRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Softmax(Var),
    MaskedSoftmax(Var),
    LayerNorm(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    SlidingMean(Var, usize),
    RowSum(Var),
    Unfold(Var, usize),
    Fold(Var, usize),
    LogPrior {
        mu: Var,
        theta: Var,
        points: Var,
        eps: f64,
    },
    PairGather(Var, Var, Arc<[(usize, usize)]>),
    SumAll(Var),
    PickNegLog(Var, Vec<Option<usize>>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulBT(..) => "matmul_bt",
            Op::AddBias(..) => "add_bias",
            Op::MulRow(..) => "mul_row",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::OneMinus(_) => "one_minus",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Gelu(_) => "gelu",
            Op::Softmax(_) => "softmax",
            Op::MaskedSoftmax(_) => "masked_softmax",
            Op::LayerNorm(..) => "layer_norm",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::MeanRows(_) => "mean_rows",
            Op::SlidingMean(..) => "sliding_mean",
            Op::RowSum(_) => "row_sum",
            Op::Unfold(..) => "unfold",
            Op::Fold(..) => "fold",
            Op::LogPrior { .. } => "log_prior",
            Op::PairGather(..) => "pair_gather",
            Op::SumAll(_) => "sum_all",
            Op::PickNegLog(..) => "pick_neg_log",
        }
    }
}

/// Every tape op name, as accepted by [`Graph::inject_fault`].
pub const OP_NAMES: &[&str] = &[
    "matmul",
    "matmul_bt",
    "add_bias",
    "mul_row",
    "add",
    "sub",
    "mul",
    "scale",
    "one_minus",
    "sigmoid",
    "tanh",
    "gelu",
    "softmax",
    "masked_softmax",
    "layer_norm",
    "concat_cols",
    "concat_rows",
    "slice_cols",
    "slice_rows",
    "gather_rows",
    "mean_rows",
    "sliding_mean",
    "row_sum",
    "unfold",
    "fold",
    "log_prior",
    "pair_gather",
    "sum_all",
    "pick_neg_log",
];

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of one backward pass, per node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    pub fn into_param_grads(self, n_params: usize) -> ParamGrads {
        let mut out = ParamGrads::new(n_params);
        let Gradients {
            mut grads,
            shapes,
            params,
        } = self;
        for (id, v) in params {
            if let Some(g) = grads[v.0].take() {
                out.accumulate(id, &Tensor::new(shapes[v.0].clone(), g).expect("gradient shape"));
            }
        }
        out
    }
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    fault: Option<&'static str>,
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(x: &Tensor, mask: Option<&[bool]>) -> Tensor {
    let c = x.cols();
    let mut out = x.clone();
    for (r, row) in out.data_mut().chunks_mut(c).enumerate() {
        let keep = |j: usize| mask.is_none_or(|m| m[r * c + j]);
        let max = (0..c)
            .filter(|&j| keep(j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            *v = if keep(j) { (*v - max).exp() } else { 0.0 };
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// `-(x-mu)^T Theta (x-mu)` with `Theta = L L^T + eps I`, `L = [[a,0],[b,c]]`.
pub fn log_prior_value(mu: [f64; 2], theta: [f64; 3], x: [f64; 2], eps: f64) -> f64 {
    let dx = x[0] - mu[0];
    let dy = x[1] - mu[1];
    let u = theta[0] * dx + theta[1] * dy;
    let v = theta[2] * dy;
    -(u * u + v * v + eps * (dx * dx + dy * dy))
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::with_capacity(1024),
            param_vars: vec![None; store.len()],
            fault: None,
        }
    }

    /// Corrupt the backward rule of the named op (test fixture for the
    /// gradient-check harness).
    pub fn inject_fault(&mut self, op: &'static str) {
        self.fault = Some(op);
    }

    pub fn store(&self) -> &ParamStore {
        self.store
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

    fn rc(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::matrix(rows, cols, data)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = self.push(p.tensor.clone(), Op::Param, p.trainable);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// A leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.rc(a);
        let (k2, m) = self.rc(b);
        assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", self.shape(a), self.shape(b));
        let mut out = vec![0.0; n * m];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let rg = self.rg(&[a, b]);
        self.push(Self::mat(n, m, out), Op::MatMul(a, b), rg)
    }

    /// `a b^T`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.rc(a);
        let (m, k2) = self.rc(b);
        assert_eq!(k, k2, "matmul_bt inner dims {:?} x {:?}", self.shape(a), self.shape(b));
        let mut out = vec![0.0; n * m];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let rg = self.rg(&[a, b]);
        self.push(Self::mat(n, m, out), Op::MatMulBT(a, b), rg)
    }

    /// Row-broadcast add of a bias vector.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (n, m) = self.rc(x);
        assert_eq!(self.value(b).len(), m, "add_bias");
        let mut out = self.value(x).clone();
        let bv = self.value(b).data();
        for row in out.data_mut().chunks_mut(m) {
            for (o, &bb) in row.iter_mut().zip(bv) {
                *o += bb;
            }
        }
        let rg = self.rg(&[x, b]);
        let out = out.reshape(&[n, m]).unwrap();
        self.push(out, Op::AddBias(x, b), rg)
    }

    /// Row-broadcast elementwise product with a vector.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Var {
        let (n, m) = self.rc(x);
        assert_eq!(self.value(g).len(), m, "mul_row");
        let mut out = self.value(x).clone();
        let gv = self.value(g).data();
        for row in out.data_mut().chunks_mut(m) {
            for (o, &gg) in row.iter_mut().zip(gv) {
                *o *= gg;
            }
        }
        let rg = self.rg(&[x, g]);
        let out = out.reshape(&[n, m]).unwrap();
        self.push(out, Op::MulRow(x, g), rg)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        assert_eq!(
            self.value(a).len(),
            self.value(b).len(),
            "{}: {:?} vs {:?}",
            op.name(),
            self.shape(a),
            self.shape(b)
        );
        let (n, m) = self.rc(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        self.push(Self::mat(n, m, data), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (n, m) = self.rc(x);
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let rg = self.rg(&[x]);
        self.push(Self::mat(n, m, data), op, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 - v, Op::OneMinus(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// Exact GELU, `x * Phi(x)` with the Gaussian CDF (no tanh approximation).
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    /// Softmax over the last axis, max-shifted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x), None);
        let (n, m) = self.rc(x);
        let rg = self.rg(&[x]);
        self.push(out.reshape(&[n, m]).unwrap(), Op::Softmax(x), rg)
    }

    /// Row softmax restricted to `mask`; masked entries get weight 0. Every
    /// row must keep at least one entry.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Var {
        assert_eq!(mask.len(), self.value(x).len(), "masked_softmax mask");
        let (n, m) = self.rc(x);
        for r in 0..n {
            assert!(mask[r * m..(r + 1) * m].iter().any(|&b| b), "row {r} fully masked");
        }
        let out = softmax_rows(self.value(x), Some(mask));
        let rg = self.rg(&[x]);
        self.push(out.reshape(&[n, m]).unwrap(), Op::MaskedSoftmax(x), rg)
    }

    /// Per-row standardisation (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let (n, m) = self.rc(x);
        let mut out = self.value(x).clone().into_data();
        let mut inv = Vec::with_capacity(n);
        for row in out.chunks_mut(m) {
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv.push(is);
        }
        let rg = self.rg(&[x]);
        self.push(Self::mat(n, m, out), Op::LayerNorm(x, inv), rg)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        let n = self.rc(xs[0]).0;
        let widths: Vec<usize> = xs.iter().map(|&v| self.rc(v).1).collect();
        let m: usize = widths.iter().sum();
        let mut out = vec![0.0; n * m];
        let mut off = 0;
        for (&v, &w) in xs.iter().zip(&widths) {
            assert_eq!(self.rc(v).0, n, "concat_cols rows");
            let src = self.value(v).data();
            for r in 0..n {
                out[r * m + off..r * m + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let rg = self.rg(xs);
        self.push(Self::mat(n, m, out), Op::ConcatCols(xs.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        let m = self.rc(xs[0]).1;
        let mut out = Vec::new();
        for &v in xs {
            assert_eq!(self.rc(v).1, m, "concat_rows cols");
            out.extend_from_slice(self.value(v).data());
        }
        let n = out.len() / m;
        let rg = self.rg(xs);
        self.push(Self::mat(n, m, out), Op::ConcatRows(xs.to_vec()), rg)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let (n, m) = self.rc(x);
        assert!(start < end && end <= m, "slice_cols {start}..{end} of {m}");
        let w = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * w);
        for r in 0..n {
            out.extend_from_slice(&src[r * m + start..r * m + end]);
        }
        let rg = self.rg(&[x]);
        self.push(Self::mat(n, w, out), Op::SliceCols(x, start), rg)
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let (n, m) = self.rc(x);
        assert!(start < end && end <= n, "slice_rows {start}..{end} of {n}");
        let out = self.value(x).data()[start * m..end * m].to_vec();
        let rg = self.rg(&[x]);
        self.push(Self::mat(end - start, m, out), Op::SliceRows(x, start), rg)
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let (n, m) = self.rc(x);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * m);
        for &i in &idx {
            assert!(i < n, "gather_rows index {i} of {n}");
            out.extend_from_slice(&src[i * m..(i + 1) * m]);
        }
        let rg = self.rg(&[x]);
        self.push(Self::mat(idx.len(), m, out), Op::GatherRows(x, idx), rg)
    }

    /// Mean over rows, giving `[1, m]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (n, m) = self.rc(x);
        let mut out = vec![0.0; m];
        for row in self.value(x).data().chunks(m) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        let rg = self.rg(&[x]);
        self.push(Self::mat(1, m, out), Op::MeanRows(x), rg)
    }

    /// Mean over every window of `w` consecutive rows: `[n, m] -> [n-w+1, m]`.
    pub fn sliding_mean(&mut self, x: Var, w: usize) -> Var {
        let (n, m) = self.rc(x);
        assert!(w >= 1 && w <= n, "sliding_mean window {w} of {n}");
        let rows = n - w + 1;
        let src = self.value(x).data();
        let mut out = vec![0.0; rows * m];
        for i in 0..rows {
            for o in 0..w {
                for c in 0..m {
                    out[i * m + c] += src[(i + o) * m + c];
                }
            }
        }
        for v in &mut out {
            *v /= w as f64;
        }
        let rg = self.rg(&[x]);
        self.push(Self::mat(rows, m, out), Op::SlidingMean(x, w), rg)
    }

    /// Sum of each row, giving `[n, 1]`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let (n, m) = self.rc(x);
        let out = self.value(x).data().chunks(m).map(|r| r.iter().sum()).collect();
        let rg = self.rg(&[x]);
        self.push(Self::mat(n, 1, out), Op::RowSum(x), rg)
    }

    /// Windows of `k` consecutive rows laid side by side: `[n, m] -> [n-k+1, k*m]`.
    pub fn unfold(&mut self, x: Var, k: usize) -> Var {
        let (n, m) = self.rc(x);
        assert!(k >= 1 && k <= n, "unfold kernel {k} of {n}");
        let rows = n - k + 1;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * k * m);
        for i in 0..rows {
            out.extend_from_slice(&src[i * m..(i + k) * m]);
        }
        let rg = self.rg(&[x]);
        self.push(Self::mat(rows, k * m, out), Op::Unfold(x, k), rg)
    }

    /// Adjoint of [`Graph::unfold`]: `[n, k*m] -> [n+k-1, m]`, overlapping windows summed.
    pub fn fold(&mut self, x: Var, k: usize) -> Var {
        let (n, km) = self.rc(x);
        assert!(k >= 1 && km % k == 0, "fold kernel {k} width {km}");
        let m = km / k;
        let rows = n + k - 1;
        let src = self.value(x).data();
        let mut out = vec![0.0; rows * m];
        for i in 0..n {
            for (j, v) in src[i * km..(i + 1) * km].iter().enumerate() {
                out[i * m + j] += v;
            }
        }
        let rg = self.rg(&[x]);
        self.push(Self::mat(rows, m, out), Op::Fold(x, k), rg)
    }

    /// Log of the Gaussian-like spatial weight for every (center, point) pair.
    ///
    /// `mu: [R, 2]`, `theta: [R, 3]` (lower-triangular factor entries a, b, c),
    /// `points: [P, 2]`; output `[R, P]` holds `-(x-mu)^T Theta (x-mu)` with
    /// `Theta = L L^T + eps I`.
    pub fn log_prior(&mut self, mu: Var, theta: Var, points: Var, eps: f64) -> Var {
        let (r, c) = self.rc(mu);
        assert_eq!(c, 2, "log_prior mu");
        assert_eq!(self.rc(theta), (r, 3), "log_prior theta");
        let (p, c2) = self.rc(points);
        assert_eq!(c2, 2, "log_prior points");
        let mv = self.value(mu).data();
        let tv = self.value(theta).data();
        let pv = self.value(points).data();
        let mut out = Vec::with_capacity(r * p);
        for i in 0..r {
            let m = [mv[2 * i], mv[2 * i + 1]];
            let t = [tv[3 * i], tv[3 * i + 1], tv[3 * i + 2]];
            for j in 0..p {
                out.push(log_prior_value(m, t, [pv[2 * j], pv[2 * j + 1]], eps));
            }
        }
        let rg = self.rg(&[mu, theta, points]);
        self.push(
            Self::mat(r, p, out),
            Op::LogPrior {
                mu,
                theta,
                points,
                eps,
            },
            rg,
        )
    }

    /// `out[i, p] = start[i, s_p] + end[i, e_p]` for each pair `(s_p, e_p)`.
    pub fn pair_gather(&mut self, start: Var, end: Var, pairs: Arc<[(usize, usize)]>) -> Var {
        let (r, l) = self.rc(start);
        assert_eq!(self.rc(end), (r, l), "pair_gather");
        let sv = self.value(start).data();
        let ev = self.value(end).data();
        let mut out = Vec::with_capacity(r * pairs.len());
        for i in 0..r {
            for &(s, e) in pairs.iter() {
                out.push(sv[i * l + s] + ev[i * l + e]);
            }
        }
        let rg = self.rg(&[start, end]);
        let np = pairs.len();
        self.push(Self::mat(r, np, out), Op::PairGather(start, end, pairs), rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    /// `sum_i -ln(max(p[i, t_i], PROB_FLOOR))` over rows with a target.
    pub fn pick_neg_log(&mut self, probs: Var, targets: Vec<Option<usize>>) -> Var {
        let (n, m) = self.rc(probs);
        assert_eq!(targets.len(), n, "pick_neg_log rows");
        let pv = self.value(probs).data();
        let mut s = 0.0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                assert!(t < m, "pick_neg_log target {t} of {m}");
                s -= pv[i * m + t].max(PROB_FLOOR).ln();
            }
        }
        let rg = self.rg(&[probs]);
        self.push(Tensor::scalar(s), Op::PickNegLog(probs, targets), rg)
    }

    /// Backpropagate from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let faulty = self.fault == Some(node.op.name());
            let g: std::borrow::Cow<[f64]> = if faulty {
                g.iter().map(|v| v * 1.5 + 1e-3).collect::<Vec<_>>().into()
            } else {
                g.as_slice().into()
            };
            self.backward_node(&node.op, &node.value, &g, lower);
        }

        let params = self
            .param_vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect();
        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params,
        }
    }

    fn slot<'g>(&self, lower: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(lower[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn backward_node(&self, op: &Op, y: &Tensor, g: &[f64], lower: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let add_to = |lower: &mut [Option<Vec<f64>>], v: Var, f: &dyn Fn(usize) -> f64| {
            if let Some(d) = self.slot(lower, v) {
                for (k, dv) in d.iter_mut().enumerate() {
                    *dv += f(k);
                }
            }
        };
        match op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.rc(*a);
                let m = self.rc(*b).1;
                if let Some(da) = self.slot(lower, *a) {
                    gemm_nt(g, val(*b).data(), da, n, m, k);
                }
                if let Some(db) = self.slot(lower, *b) {
                    gemm_tn(val(*a).data(), g, db, n, k, m);
                }
            }
            Op::MatMulBT(a, b) => {
                let (n, k) = self.rc(*a);
                let m = self.rc(*b).0;
                if let Some(da) = self.slot(lower, *a) {
                    gemm_nn(g, val(*b).data(), da, n, m, k);
                }
                if let Some(db) = self.slot(lower, *b) {
                    gemm_tn(g, val(*a).data(), db, n, m, k);
                }
            }
            Op::AddBias(x, b) => {
                add_to(lower, *x, &|k| g[k]);
                let m = y.cols();
                if let Some(db) = self.slot(lower, *b) {
                    for row in g.chunks(m) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
            }
            Op::MulRow(x, s) => {
                let m = y.cols();
                let sv = val(*s).data();
                let xv = val(*x).data();
                add_to(lower, *x, &|k| g[k] * sv[k % m]);
                if let Some(ds) = self.slot(lower, *s) {
                    for (k, gv) in g.iter().enumerate() {
                        ds[k % m] += gv * xv[k];
                    }
                }
            }
            Op::Add(a, b) => {
                add_to(lower, *a, &|k| g[k]);
                add_to(lower, *b, &|k| g[k]);
            }
            Op::Sub(a, b) => {
                add_to(lower, *a, &|k| g[k]);
                add_to(lower, *b, &|k| -g[k]);
            }
            Op::Mul(a, b) => {
                let av = val(*a).data();
                let bv = val(*b).data();
                add_to(lower, *a, &|k| g[k] * bv[k]);
                add_to(lower, *b, &|k| g[k] * av[k]);
            }
            Op::Scale(x, s) => add_to(lower, *x, &|k| g[k] * s),
            Op::OneMinus(x) => add_to(lower, *x, &|k| -g[k]),
            Op::Sigmoid(x) => {
                let yv = y.data();
                add_to(lower, *x, &|k| g[k] * yv[k] * (1.0 - yv[k]));
            }
            Op::Tanh(x) => {
                let yv = y.data();
                add_to(lower, *x, &|k| g[k] * (1.0 - yv[k] * yv[k]));
            }
            Op::Gelu(x) => {
                let xv = val(*x).data();
                add_to(lower, *x, &|k| g[k] * gelu_grad(xv[k]));
            }
            Op::Softmax(x) | Op::MaskedSoftmax(x) => {
                let m = y.cols();
                if let Some(dx) = self.slot(lower, *x) {
                    for ((yr, gr), dr) in y.data().chunks(m).zip(g.chunks(m)).zip(dx.chunks_mut(m)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm(x, inv) => {
                let m = y.cols();
                if let Some(dx) = self.slot(lower, *x) {
                    for (r, ((yr, gr), dr)) in y
                        .data()
                        .chunks(m)
                        .zip(g.chunks(m))
                        .zip(dx.chunks_mut(m))
                        .enumerate()
                    {
                        let mg = gr.iter().sum::<f64>() / m as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                        for j in 0..m {
                            dr[j] += inv[r] * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                }
            }
            Op::ConcatCols(xs) => {
                let m = y.cols();
                let mut off = 0;
                for &v in xs {
                    let w = self.rc(v).1;
                    if let Some(d) = self.slot(lower, v) {
                        for (r, dr) in d.chunks_mut(w).enumerate() {
                            for (dv, gv) in dr.iter_mut().zip(&g[r * m + off..r * m + off + w]) {
                                *dv += gv;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &v in xs {
                    let len = val(v).len();
                    if let Some(d) = self.slot(lower, v) {
                        for (dv, gv) in d.iter_mut().zip(&g[off..off + len]) {
                            *dv += gv;
                        }
                    }
                    off += len;
                }
            }
            Op::SliceCols(x, start) => {
                let w = y.cols();
                let m = self.rc(*x).1;
                if let Some(d) = self.slot(lower, *x) {
                    for (r, gr) in g.chunks(w).enumerate() {
                        for (dv, gv) in d[r * m + start..r * m + start + w].iter_mut().zip(gr) {
                            *dv += gv;
                        }
                    }
                }
            }
            Op::SliceRows(x, start) => {
                let m = y.cols();
                if let Some(d) = self.slot(lower, *x) {
                    for (dv, gv) in d[start * m..start * m + g.len()].iter_mut().zip(g) {
                        *dv += gv;
                    }
                }
            }
            Op::GatherRows(x, idx) => {
                let m = y.cols();
                if let Some(d) = self.slot(lower, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..m {
                            d[i * m + c] += g[r * m + c];
                        }
                    }
                }
            }
            Op::MeanRows(x) => {
                let (n, m) = self.rc(*x);
                add_to(lower, *x, &|k| g[k % m] / n as f64);
            }
            Op::SlidingMean(x, w) => {
                let m = y.cols();
                let rows = y.rows();
                if let Some(d) = self.slot(lower, *x) {
                    for i in 0..rows {
                        for o in 0..*w {
                            for c in 0..m {
                                d[(i + o) * m + c] += g[i * m + c] / *w as f64;
                            }
                        }
                    }
                }
            }
            Op::RowSum(x) => {
                let m = self.rc(*x).1;
                add_to(lower, *x, &|k| g[k / m]);
            }
            Op::Unfold(x, k) => {
                let m = self.rc(*x).1;
                let km = k * m;
                if let Some(d) = self.slot(lower, *x) {
                    for (i, gr) in g.chunks(km).enumerate() {
                        for (dv, gv) in d[i * m..i * m + km].iter_mut().zip(gr) {
                            *dv += gv;
                        }
                    }
                }
            }
            Op::Fold(x, k) => {
                let m = y.cols();
                let km = k * m;
                if let Some(d) = self.slot(lower, *x) {
                    for (i, dr) in d.chunks_mut(km).enumerate() {
                        for (dv, gv) in dr.iter_mut().zip(&g[i * m..i * m + km]) {
                            *dv += gv;
                        }
                    }
                }
            }
            Op::LogPrior {
                mu,
                theta,
                points,
                eps,
            } => {
                let r = self.rc(*mu).0;
                let p = self.rc(*points).0;
                let mv = val(*mu).data();
                let tv = val(*theta).data();
                let pv = val(*points).data();
                let mut dmu = vec![0.0; 2 * r];
                let mut dth = vec![0.0; 3 * r];
                let mut dpt = vec![0.0; 2 * p];
                for i in 0..r {
                    let (a, b, c) = (tv[3 * i], tv[3 * i + 1], tv[3 * i + 2]);
                    for j in 0..p {
                        let gv = g[i * p + j];
                        if gv == 0.0 {
                            continue;
                        }
                        let dx = pv[2 * j] - mv[2 * i];
                        let dy = pv[2 * j + 1] - mv[2 * i + 1];
                        let u = a * dx + b * dy;
                        let v = c * dy;
                        dth[3 * i] -= gv * 2.0 * u * dx;
                        dth[3 * i + 1] -= gv * 2.0 * u * dy;
                        dth[3 * i + 2] -= gv * 2.0 * v * dy;
                        let ddx = -(2.0 * u * a + 2.0 * eps * dx);
                        let ddy = -(2.0 * u * b + 2.0 * v * c + 2.0 * eps * dy);
                        dpt[2 * j] += gv * ddx;
                        dpt[2 * j + 1] += gv * ddy;
                        dmu[2 * i] -= gv * ddx;
                        dmu[2 * i + 1] -= gv * ddy;
                    }
                }
                add_to(lower, *mu, &|k| dmu[k]);
                add_to(lower, *theta, &|k| dth[k]);
                add_to(lower, *points, &|k| dpt[k]);
            }
            Op::PairGather(s, e, pairs) => {
                let l = self.rc(*s).1;
                let np = pairs.len();
                if let Some(ds) = self.slot(lower, *s) {
                    for (i, gr) in g.chunks(np).enumerate() {
                        for (&(sp, _), gv) in pairs.iter().zip(gr) {
                            ds[i * l + sp] += gv;
                        }
                    }
                }
                if let Some(de) = self.slot(lower, *e) {
                    for (i, gr) in g.chunks(np).enumerate() {
                        for (&(_, ep), gv) in pairs.iter().zip(gr) {
                            de[i * l + ep] += gv;
                        }
                    }
                }
            }
            Op::SumAll(x) => add_to(lower, *x, &|_| g[0]),
            Op::PickNegLog(p, targets) => {
                let m = self.rc(*p).1;
                let pv = val(*p).data();
                if let Some(d) = self.slot(lower, *p) {
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            let v = pv[i * m + t];
                            if v > PROB_FLOOR {
                                d[i * m + t] -= g[0] / v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward-only helpers shared with code that does not need a tape.
pub mod eval {
    pub use super::log_prior_value;

    pub fn gelu(x: f64) -> f64 {
        super::gelu(x)
    }

    pub fn sigmoid(x: f64) -> f64 {
        super::sigmoid(x)
    }

    pub fn softmax(xs: &[f64]) -> Vec<f64> {
        let t = super::Tensor::row(xs);
        super::softmax_rows(&t, None).into_data()
    }
}
