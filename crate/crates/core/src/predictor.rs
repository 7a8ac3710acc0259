//! Prediction head: category and span distributions per proposal, and the
//! decoding rule that turns them into an entity set.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::Result;
use crate::numerics::{Activation, Graph, Linear, Mlp, ParamStore, Rng, Tensor, Var};
use crate::proposer::{span_pairs, Proposals};
use crate::regressor::SpatialMlp;

#[derive(Clone, Debug)]
pub struct Head {
    pub logits_mlp: Mlp,
    pub proj_start: Linear,
    pub proj_end: Linear,
    pub spatial: SpatialMlp,
    pub dim: usize,
    pub eps: f64,
}

/// Graph nodes of the head output for one sentence.
#[derive(Clone, Debug)]
pub struct HeadOutput {
    /// `[L, T+1]`.
    pub p_c: Var,
    /// `[L, L(L+1)/2]`, columns ordered like `pairs`.
    pub p_n: Var,
    pub pairs: Arc<[(usize, usize)]>,
}

/// Plain-value distributions of one proposal.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalDistributions {
    pub p_c: Vec<f64>,
    pub p_n: Vec<f64>,
    pub pairs: Arc<[(usize, usize)]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedEntity {
    pub start: usize,
    pub end: usize,
    pub type_id: usize,
    pub score: f64,
}

impl Head {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, cfg: &ModelConfig, num_classes: usize) -> Result<Self> {
        let d = cfg.dim;
        let logits_mlp = Mlp::new(store, rng, "head.logits_mlp", &[d, cfg.mlp_hidden, num_classes], Activation::Gelu)?;
        logits_mlp.init_output(store, 0.1, &vec![0.0; num_classes]);
        Ok(Head {
            logits_mlp,
            proj_start: Linear::new(store, rng, "head.proj_start", d, d)?,
            proj_end: Linear::new(store, rng, "head.proj_end", d, d)?,
            spatial: SpatialMlp::new(store, rng, "head.spatial", d, cfg.mlp_hidden)?,
            dim: d,
            eps: cfg.epsilon_psd,
        })
    }

    /// `p_c = softmax(c + mlp(q))`.
    pub fn category_distribution(&self, g: &mut Graph, q: Var, c: Var) -> Result<Var> {
        let delta = self.logits_mlp.apply(g, q)?;
        let logits = g.add(c, delta);
        Ok(g.softmax(logits))
    }

    /// Softmax over every `(s, e)` with `s <= e` of the spatial log-prior
    /// plus the scaled start/end compatibility with the token features `h`.
    pub fn span_distribution(&self, g: &mut Graph, q: Var, n: Var, h: Var) -> Result<(Var, Arc<[(usize, usize)]>)> {
        let len = g.value(h).rows();
        let pairs = span_pairs(len);
        let qs = self.proj_start.apply(g, q)?;
        let hs = self.proj_start.apply(g, h)?;
        let qe = self.proj_end.apply(g, q)?;
        let he = self.proj_end.apply(g, h)?;
        let a = g.matmul_bt(qs, hs);
        let b = g.matmul_bt(qe, he);
        let compat = g.pair_gather(a, b, pairs.clone());
        let compat = g.scale(compat, 1.0 / (self.dim as f64).sqrt());
        let (mu, theta) = self.spatial.apply(g, q, n)?;
        let points: Vec<f64> = pairs.iter().flat_map(|&(s, e)| [s as f64, e as f64]).collect();
        let points = g.constant(Tensor::matrix(pairs.len(), 2, points));
        let prior = g.log_prior(mu, theta, points, self.eps);
        let r = g.add(prior, compat);
        Ok((g.softmax(r), pairs))
    }

    pub fn apply(&self, g: &mut Graph, p: Proposals, h: Var) -> Result<HeadOutput> {
        let p_c = self.category_distribution(g, p.q, p.c)?;
        let (p_n, pairs) = self.span_distribution(g, p.q, p.n, h)?;
        Ok(HeadOutput { p_c, p_n, pairs })
    }
}

impl HeadOutput {
    /// Copy the distributions out of the graph, one entry per proposal.
    pub fn values(&self, g: &Graph) -> Vec<ProposalDistributions> {
        let pc = g.value(self.p_c);
        let pn = g.value(self.p_n);
        (0..pc.rows())
            .map(|i| ProposalDistributions {
                p_c: pc.row_slice(i).to_vec(),
                p_n: pn.row_slice(i).to_vec(),
                pairs: self.pairs.clone(),
            })
            .collect()
    }
}

/// Index of the first maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Per proposal: take the most likely category `t` and span `(s, e)`; keep
/// `(s, e, t)` when `t` is not None and `p_c(t) p_n(s, e) >= p_c(None)`.
/// Duplicates collapse, keeping the highest score. Output is sorted by
/// `(start, end, type)`.
pub fn decode(dists: &[ProposalDistributions], none_id: usize) -> Vec<PredictedEntity> {
    let mut kept: BTreeMap<(usize, usize, usize), f64> = BTreeMap::new();
    for d in dists {
        let t = argmax(&d.p_c);
        if t == none_id {
            continue;
        }
        let k = argmax(&d.p_n);
        let (s, e) = d.pairs[k];
        let score = d.p_c[t] * d.p_n[k];
        if score >= d.p_c[none_id] {
            let slot = kept.entry((s, e, t)).or_insert(score);
            *slot = slot.max(score);
        }
    }
    kept.into_iter()
        .map(|((start, end, type_id), score)| PredictedEntity {
            start,
            end,
            type_id,
            score,
        })
        .collect()
}
