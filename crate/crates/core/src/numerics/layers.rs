//! Differentiable building blocks composed from [`Graph`] primitives.
//!
//! Free functions take already-materialised [`Var`]s and validate shapes;
//! the layer structs own [`ParamId`]s and forward to them.

use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `y = x W^T + b` over the last axis of `x`. `w: [d_out, d_in]`, `b: [d_out]`.
pub fn linear_affine(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let d_in = *g.shape(x).last().unwrap();
    let ws = g.shape(w).to_vec();
    if ws.len() != 2 || ws[1] != d_in || g.value(b).len() != ws[0] {
        return Err(Error::shape("linear_affine", g.shape(x), &ws));
    }
    let y = g.matmul_bt(x, w);
    Ok(g.add_bias(y, b))
}

/// Valid 1-D convolution with stride 1: `[L, d_in] -> [L-k+1, d_out]`.
///
/// `w: [d_out, k*d_in]`, the block `w[:, o*d_in..(o+1)*d_in]` multiplies input
/// row `i+o` for output row `i`.
pub fn conv1d_valid(g: &mut Graph, x: Var, k: usize, w: Var, b: Var) -> Result<Var> {
    let (len, d_in) = (g.value(x).rows(), g.value(x).cols());
    if k == 0 || len < k {
        return Err(Error::LevelTooShort { len, kernel: k });
    }
    let ws = g.shape(w).to_vec();
    if ws.len() != 2 || ws[1] != k * d_in || g.value(b).len() != ws[0] {
        return Err(Error::shape("conv1d_valid", g.shape(x), &ws));
    }
    let windows = g.unfold(x, k);
    let y = g.matmul_bt(windows, w);
    Ok(g.add_bias(y, b))
}

/// Transposed 1-D convolution: `[L, d_in] -> [L+k-1, d_out]`.
///
/// `w: [d_in, k*d_out]` is laid out like the weight of the convolution
/// `d_out -> d_in` it transposes, so with `b = 0` this is the exact adjoint of
/// [`conv1d_valid`] sharing the same `w`.
pub fn tconv1d(g: &mut Graph, x: Var, k: usize, w: Var, b: Var) -> Result<Var> {
    let d_in = g.value(x).cols();
    let ws = g.shape(w).to_vec();
    if k == 0 || ws.len() != 2 || ws[0] != d_in || ws[1] % k != 0 || g.value(b).len() != ws[1] / k {
        return Err(Error::shape("tconv1d", g.shape(x), &ws));
    }
    let z = g.matmul(x, w);
    let y = g.fold(z, k);
    Ok(g.add_bias(y, b))
}

pub fn layer_norm(g: &mut Graph, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    let d = g.value(x).cols();
    if g.value(gamma).len() != d || g.value(beta).len() != d {
        return Err(Error::shape("layer_norm", g.shape(x), g.shape(gamma)));
    }
    let n = g.layer_norm(x, eps);
    let s = g.mul_row(n, gamma);
    Ok(g.add_bias(s, beta))
}

pub fn softmax_lastdim(g: &mut Graph, x: Var) -> Var {
    g.softmax(x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Sigmoid,
    Tanh,
}

pub fn activate(g: &mut Graph, x: Var, act: Activation) -> Var {
    match act {
        Activation::Gelu => g.gelu(x),
        Activation::Sigmoid => g.sigmoid(x),
        Activation::Tanh => g.tanh(x),
    }
}

/// Whole-sequence mean (`window = None`, gives `[1, d]`) or sliding-window
/// mean (`[L, d] -> [L-w+1, d]`).
pub fn mean_pool(g: &mut Graph, x: Var, window: Option<usize>) -> Result<Var> {
    let len = g.value(x).rows();
    if len == 0 {
        return Err(Error::EmptyInput("mean_pool"));
    }
    match window {
        None => Ok(g.mean_rows(x)),
        Some(w) if w >= 1 && w <= len => Ok(g.sliding_mean(x, w)),
        Some(w) => Err(Error::LevelTooShort { len, kernel: w }),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Linear {
            weight: store.add_normal(format!("{name}.weight"), &[d_out, d_in], rng)?,
            bias: store.add_const(format!("{name}.bias"), &[d_out], 0.0)?,
            d_in,
            d_out,
        })
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        linear_affine(g, x, w, b)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add_const(format!("{name}.gamma"), &[d], 1.0)?,
            beta: store.add_const(format!("{name}.beta"), &[d], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        layer_norm(g, x, gamma, beta, self.eps)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

impl Conv1d {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, kernel: usize, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Conv1d {
            weight: store.add_normal(format!("{name}.weight"), &[d_out, kernel * d_in], rng)?,
            bias: store.add_const(format!("{name}.bias"), &[d_out], 0.0)?,
            kernel,
        })
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        conv1d_valid(g, x, self.kernel, w, b)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TConv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

impl TConv1d {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, kernel: usize, d_in: usize, d_out: usize) -> Result<Self> {
        let std = 1.0 / (d_in as f64).sqrt();
        Ok(TConv1d {
            weight: store.add_scaled_normal(format!("{name}.weight"), &[d_in, kernel * d_out], std, rng)?,
            bias: store.add_const(format!("{name}.bias"), &[d_out], 0.0)?,
            kernel,
        })
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        tconv1d(g, x, self.kernel, w, b)
    }
}

/// Stack of affine layers with an activation between consecutive layers and
/// none after the last.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `sizes = [d_in, h_1, ..., d_out]`, at least two entries.
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, sizes: &[usize], activation: Activation) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::config(name, "mlp needs at least an input and an output size"));
        }
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Mlp { layers, activation })
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().unwrap().d_out
    }

    /// Scale the last layer's weights and set its bias; used to start
    /// residual-style heads near a chosen output.
    pub fn init_output(&self, store: &mut ParamStore, weight_scale: f64, bias: &[f64]) {
        let last = self.layers.last().unwrap();
        for v in store.tensor_mut(last.weight).data_mut() {
            *v *= weight_scale;
        }
        store.tensor_mut(last.bias).data_mut().copy_from_slice(bias);
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        mlp_apply(g, x, &self.layers, self.activation)
    }
}

pub fn mlp_apply(g: &mut Graph, x: Var, layers: &[Linear], act: Activation) -> Result<Var> {
    if layers.is_empty() {
        return Err(Error::config("mlp", "empty layer list"));
    }
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        h = layer.apply(g, h)?;
        if i + 1 < layers.len() {
            h = activate(g, h, act);
        }
    }
    Ok(h)
}

/// GRU gate parameters. Columns of the stacked weights are ordered
/// reset, update, candidate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GruCell {
    pub w_x: ParamId,
    pub b_x: ParamId,
    pub w_h: ParamId,
    pub b_h: ParamId,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d_in: usize, hidden: usize) -> Result<Self> {
        Ok(GruCell {
            w_x: store.add_normal(format!("{name}.w_x"), &[3 * hidden, d_in], rng)?,
            b_x: store.add_const(format!("{name}.b_x"), &[3 * hidden], 0.0)?,
            w_h: store.add_normal(format!("{name}.w_h"), &[3 * hidden, hidden], rng)?,
            b_h: store.add_const(format!("{name}.b_h"), &[3 * hidden], 0.0)?,
            hidden,
        })
    }

    /// Input projection for all rows at once: `x W_x^T + b_x`.
    pub fn project_input(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w_x);
        let b = g.param(self.b_x);
        linear_affine(g, x, w, b)
    }

    /// One gate application given the projected input `xp: [n, 3h]` and the
    /// state `h: [n, h]`:
    ///
    /// ```text
    /// r = sigmoid(xp_r + W_hr h + b_hr)
    /// z = sigmoid(xp_z + W_hz h + b_hz)
    /// n = tanh(xp_n + r * (W_hn h + b_hn))
    /// o = (1 - z) * n + z * h
    /// ```
    pub fn step(&self, g: &mut Graph, xp: Var, h: Var) -> Result<Var> {
        let hs = self.hidden;
        let w = g.param(self.w_h);
        let b = g.param(self.b_h);
        let hp = linear_affine(g, h, w, b)?;
        let xr = g.slice_cols(xp, 0, hs);
        let xz = g.slice_cols(xp, hs, 2 * hs);
        let xn = g.slice_cols(xp, 2 * hs, 3 * hs);
        let hr = g.slice_cols(hp, 0, hs);
        let hz = g.slice_cols(hp, hs, 2 * hs);
        let hn = g.slice_cols(hp, 2 * hs, 3 * hs);
        let r = g.add(xr, hr);
        let r = g.sigmoid(r);
        let z = g.add(xz, hz);
        let z = g.sigmoid(z);
        let rn = g.mul(r, hn);
        let n = g.add(xn, rn);
        let n = g.tanh(n);
        let keep = g.one_minus(z);
        let a = g.mul(keep, n);
        let c = g.mul(z, h);
        Ok(g.add(a, c))
    }

    /// Run over rows in order (or reversed), zero initial state. Output rows
    /// stay aligned with input rows.
    pub fn run(&self, g: &mut Graph, x: Var, reverse: bool) -> Result<Var> {
        let len = g.value(x).rows();
        let xp = self.project_input(g, x)?;
        let mut h = g.constant(Tensor::zeros(&[1, self.hidden]));
        let mut outs = vec![h; len];
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..len).rev())
        } else {
            Box::new(0..len)
        };
        for t in order {
            let xt = g.slice_rows(xp, t, t + 1);
            h = self.step(g, xt, h)?;
            outs[t] = h;
        }
        Ok(g.concat_rows(&outs))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BiGru {
    pub forward: GruCell,
    pub backward: GruCell,
}

impl BiGru {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d_in: usize, hidden: usize) -> Result<Self> {
        Ok(BiGru {
            forward: GruCell::new(store, rng, &format!("{name}.fwd"), d_in, hidden)?,
            backward: GruCell::new(store, rng, &format!("{name}.bwd"), d_in, hidden)?,
        })
    }

    pub fn d_out(&self) -> usize {
        2 * self.forward.hidden
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        bigru_encode(g, x, self)
    }
}

/// `[L, d_in] -> [L, 2h]`: forward pass outputs then backward pass outputs.
pub fn bigru_encode(g: &mut Graph, x: Var, params: &BiGru) -> Result<Var> {
    if g.value(x).rows() == 0 {
        return Err(Error::EmptyInput("bigru_encode"));
    }
    let f = params.forward.run(g, x, false)?;
    let b = params.backward.run(g, x, true)?;
    Ok(g.concat_cols(&[f, b]))
}
