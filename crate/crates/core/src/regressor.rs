//! Stacked refinement layers over the proposals: category embedding,
//! spatially modulated multi-head attention, head-weighted location update,
//! query aggregation, gated query update and logits iteration.

use crate::config::{AblationConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{Activation, GruCell, Graph, Linear, Mlp, ParamId, ParamStore, Rng, Var};
use crate::proposer::Proposals;

/// Initial lower-triangular precision factor `(a, b, c)` of every spatial
/// prior; `Theta = L L^T + eps I` starts near `a^2 = c^2 = 0.25` on the
/// diagonal.
pub const THETA_INIT: [f64; 3] = [0.5, 0.0, 0.5];
const SPATIAL_OUT_SCALE: f64 = 0.1;

/// Spatial MLP whose 5 outputs are `(dn_start, dn_end, a, b, c)`.
#[derive(Clone, Debug)]
pub struct SpatialMlp {
    pub mlp: Mlp,
}

impl SpatialMlp {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d_in: usize, hidden: usize) -> Result<Self> {
        let mlp = Mlp::new(store, rng, name, &[d_in, hidden, 5], Activation::Gelu)?;
        let mut bias = [0.0; 5];
        bias[2..].copy_from_slice(&THETA_INIT);
        mlp.init_output(store, SPATIAL_OUT_SCALE, &bias);
        Ok(SpatialMlp { mlp })
    }

    /// Centers `mu = n + dn` (`[L, 2]`) and factors (`[L, 3]`).
    pub fn apply(&self, g: &mut Graph, hq: Var, n: Var) -> Result<(Var, Var)> {
        let out = self.mlp.apply(g, hq)?;
        let dn = g.slice_cols(out, 0, 2);
        let theta = g.slice_cols(out, 2, 5);
        Ok((g.add(n, dn), theta))
    }
}

/// Per-head tensors of one layer, kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct HeadTrace {
    /// Attention weights `[L, L]`.
    pub attn: Var,
    pub mu: Var,
    pub theta: Var,
    /// Head output `[L, d/M]`.
    pub o: Var,
}

#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub heads: Vec<HeadTrace>,
    /// Softmax weights over heads, `[L, M]`, for the start and end component.
    pub head_weights: [Var; 2],
    pub q: Var,
    pub c: Var,
    pub n: Var,
}

#[derive(Clone, Debug)]
pub struct RegressorLayer {
    /// Category embedding `[d, T+1]`.
    pub category: ParamId,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub spatial: Vec<SpatialMlp>,
    pub head_mlp: Mlp,
    pub aggregate: Linear,
    pub gate: GruCell,
    pub logits_mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct Regressor {
    pub layers: Vec<RegressorLayer>,
    pub dim: usize,
    pub heads: usize,
    pub eps: f64,
    pub ablation: AblationConfig,
}

impl RegressorLayer {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, cfg: &ModelConfig, num_classes: usize) -> Result<Self> {
        let d = cfg.dim;
        let dh = d / cfg.heads;
        let h = cfg.mlp_hidden;
        let layer = RegressorLayer {
            category: store.add_scaled_normal(format!("{name}.category"), &[d, num_classes], 0.1, rng)?,
            wq: Linear::new(store, rng, &format!("{name}.wq"), d, d)?,
            wk: Linear::new(store, rng, &format!("{name}.wk"), d, d)?,
            wv: Linear::new(store, rng, &format!("{name}.wv"), d, d)?,
            spatial: (0..cfg.heads)
                .map(|m| SpatialMlp::new(store, rng, &format!("{name}.spatial{m}"), dh, h))
                .collect::<Result<_>>()?,
            head_mlp: Mlp::new(store, rng, &format!("{name}.head_mlp"), &[dh, h, 2], Activation::Gelu)?,
            aggregate: Linear::new(store, rng, &format!("{name}.aggregate"), d, d)?,
            gate: GruCell::new(store, rng, &format!("{name}.gate"), d, d)?,
            logits_mlp: Mlp::new(store, rng, &format!("{name}.logits_mlp"), &[d, h, num_classes], Activation::Gelu)?,
        };
        layer.logits_mlp.init_output(store, 0.1, &vec![0.0; num_classes]);
        Ok(layer)
    }
}

/// `h' = q + softmax(c) Hc^T`.
pub fn category_embed(g: &mut Graph, q: Var, c: Var, category: Var) -> Var {
    let alpha = g.softmax(c);
    let mix = g.matmul_bt(alpha, category);
    g.add(q, mix)
}

/// Head locations from per-head scores: softmax over heads per component,
/// then the weighted average of the head centers. Returns `n` and the two
/// weight matrices.
pub fn fuse_heads_location(g: &mut Graph, scores: &[Var], mus: &[Var]) -> (Var, [Var; 2]) {
    let mut comps = Vec::with_capacity(2);
    let mut weights = Vec::with_capacity(2);
    for side in 0..2 {
        let r: Vec<Var> = scores.iter().map(|&s| g.slice_cols(s, side, side + 1)).collect();
        let r = g.concat_cols(&r);
        let alpha = g.softmax(r);
        let m: Vec<Var> = mus.iter().map(|&mu| g.slice_cols(mu, side, side + 1)).collect();
        let m = g.concat_cols(&m);
        let prod = g.mul(alpha, m);
        comps.push(g.row_sum(prod));
        weights.push(alpha);
    }
    (g.concat_cols(&comps), [weights[0], weights[1]])
}

/// `q_new = GRU(x = q', h = h')`.
pub fn gated_update(g: &mut Graph, gate: &GruCell, h_prime: Var, q_prime: Var) -> Result<Var> {
    let xp = gate.project_input(g, q_prime)?;
    gate.step(g, xp, h_prime)
}

impl Regressor {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, cfg: &ModelConfig, num_classes: usize, ablation: AblationConfig) -> Result<Self> {
        if cfg.dim % cfg.heads != 0 {
            return Err(Error::config(
                "model.heads",
                format!("model.dim {} is not divisible by {} heads", cfg.dim, cfg.heads),
            ));
        }
        let layers = (0..cfg.regressor_layers)
            .map(|i| RegressorLayer::new(store, rng, &format!("reg{i}"), cfg, num_classes))
            .collect::<Result<_>>()?;
        Ok(Regressor {
            layers,
            dim: cfg.dim,
            heads: cfg.heads,
            eps: cfg.epsilon_psd,
            ablation,
        })
    }

    /// Spatially modulated attention for every head. `h` holds the `h'`
    /// rows, `n` the current locations (which serve as key positions).
    pub fn sma_heads(&self, g: &mut Graph, layer: &RegressorLayer, h: Var, n: Var) -> Result<Vec<HeadTrace>> {
        let dh = self.dim / self.heads;
        let q_all = layer.wq.apply(g, h)?;
        let k_all = layer.wk.apply(g, h)?;
        let v_all = layer.wv.apply(g, h)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for m in 0..self.heads {
            let (a, b) = (m * dh, (m + 1) * dh);
            let q = g.slice_cols(q_all, a, b);
            let k = g.slice_cols(k_all, a, b);
            let v = g.slice_cols(v_all, a, b);
            let (mu, theta) = layer.spatial[m].apply(g, q, n)?;
            let dot = g.matmul_bt(q, k);
            let mut scores = g.scale(dot, scale);
            if self.ablation.spatial_modulation {
                let prior = g.log_prior(mu, theta, n, self.eps);
                scores = g.add(scores, prior);
            }
            let attn = g.softmax(scores);
            let o = g.matmul(attn, v);
            heads.push(HeadTrace { attn, mu, theta, o });
        }
        Ok(heads)
    }

    /// One refinement layer.
    pub fn layer(&self, g: &mut Graph, layer: &RegressorLayer, p: Proposals) -> Result<LayerTrace> {
        let h_prime = if self.ablation.category_embedding {
            let hc = g.param(layer.category);
            category_embed(g, p.q, p.c, hc)
        } else {
            p.q
        };
        let heads = self.sma_heads(g, layer, h_prime, p.n)?;
        let scores: Vec<Var> = heads
            .iter()
            .map(|h| layer.head_mlp.apply(g, h.o))
            .collect::<Result<_>>()?;
        let mus: Vec<Var> = heads.iter().map(|h| h.mu).collect();
        let (n_fused, head_weights) = fuse_heads_location(g, &scores, &mus);
        let n = if self.ablation.location_iteration { n_fused } else { p.n };
        let outs: Vec<Var> = heads.iter().map(|h| h.o).collect();
        let cat = g.concat_cols(&outs);
        let q_prime = layer.aggregate.apply(g, cat)?;
        let q = if self.ablation.gated_update {
            gated_update(g, &layer.gate, h_prime, q_prime)?
        } else {
            q_prime
        };
        let c = if self.ablation.logits_iteration {
            let delta = layer.logits_mlp.apply(g, q)?;
            g.add(p.c, delta)
        } else {
            p.c
        };
        Ok(LayerTrace {
            heads,
            head_weights,
            q,
            c,
            n,
        })
    }

    /// Run every layer; each reads the previous layer's proposals.
    pub fn regress(&self, g: &mut Graph, mut p: Proposals) -> Result<(Proposals, Vec<LayerTrace>)> {
        let mut trace = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let t = self.layer(g, layer, p)?;
            p = Proposals { q: t.q, c: t.c, n: t.n };
            trace.push(t);
        }
        Ok((p, trace))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn head_average_examples() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let zero = g.constant(Tensor::zeros(&[1, 2]));
        let mu1 = g.constant(Tensor::row(&[1.0, 2.0]));
        let mu2 = g.constant(Tensor::row(&[3.0, 4.0]));
        let (n, _) = fuse_heads_location(&mut g, &[zero, zero], &[mu1, mu2]);
        assert_eq!(g.value(n).data(), &[2.0, 3.0]);
        let (n, w) = fuse_heads_location(&mut g, &[mu2], &[mu1]);
        assert_eq!(g.value(n).data(), &[1.0, 2.0]);
        assert_eq!(g.value(w[0]).data(), &[1.0]);
    }
}
