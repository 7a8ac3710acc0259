//! Bidirectional feature pyramid over the encoder output and the fuse step
//! that turns it into one proposal per token.
//!
//! Level 0 has one feature per token. Level `l` is produced from level
//! `l - 1` by a valid convolution with kernel `k_l`, so each of its features
//! covers `v_l = 1 - l + (k_1 + ... + k_l)` tokens. Levels whose length would
//! fall below one are dropped for short sentences.

use std::sync::Arc;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Activation, BiGru, Conv1d, Graph, LayerNorm, Linear, Mlp, ParamStore, Rng, TConv1d, Tensor, Var};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PyramidConfig {
    pub kernel_sizes: Vec<usize>,
}

impl PyramidConfig {
    pub fn new(kernel_sizes: &[usize]) -> Self {
        PyramidConfig {
            kernel_sizes: kernel_sizes.to_vec(),
        }
    }

    /// Levels including level 0, ignoring sentence length.
    pub fn max_levels(&self) -> usize {
        self.kernel_sizes.len() + 1
    }

    /// Tokens covered by one feature of level `l`.
    pub fn span_length(&self, l: usize) -> Option<usize> {
        if l > self.kernel_sizes.len() {
            return None;
        }
        Some(1 + self.kernel_sizes[..l].iter().sum::<usize>() - l)
    }

    /// Sequence length of level `l` for a sentence of `len` tokens.
    pub fn level_len(&self, len: usize, l: usize) -> Option<usize> {
        let v = self.span_length(l)?;
        (v <= len).then(|| len - v + 1)
    }

    /// Levels that exist for a sentence of `len >= 1` tokens.
    pub fn num_levels(&self, len: usize) -> usize {
        (0..self.max_levels()).take_while(|&l| self.level_len(len, l).is_some()).count()
    }
}

/// Token span `(start, end)` (inclusive) covered by feature `i` of level `l`.
pub fn span_of_feature(i: usize, l: usize, cfg: &PyramidConfig, len: usize) -> Result<(usize, usize)> {
    let levels = cfg.num_levels(len);
    match cfg.level_len(len, l) {
        Some(n) if i < n => Ok((i, i + cfg.span_length(l).unwrap() - 1)),
        Some(n) => Err(Error::Data(format!("feature {i} out of range for level {l} of length {n}"))),
        None => Err(Error::NoSuchLevel { level: l, levels }),
    }
}

/// Proposal tensors for one sentence: queries `[L, d]`, category logits
/// `[L, T+1]` and continuous span locations `[L, 2]`.
#[derive(Clone, Copy, Debug)]
pub struct Proposals {
    pub q: Var,
    pub c: Var,
    pub n: Var,
}

#[derive(Clone, Debug)]
pub struct PyramidOutput {
    pub forwards: Vec<Var>,
    pub refined: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Proposer {
    pub cfg: PyramidConfig,
    pub dim: usize,
    pub backward_block: bool,
    fwd_norm: Vec<LayerNorm>,
    fwd_gru: Vec<BiGru>,
    fwd_lin: Vec<Linear>,
    /// `conv[l]` maps level `l` to level `l + 1`.
    conv: Vec<Conv1d>,
    /// `bwd_norm[l]`, `bwd_gru[l]` read the feedback arriving at level `l`.
    bwd_norm: Vec<LayerNorm>,
    bwd_gru: Vec<BiGru>,
    merge: Vec<Linear>,
    out_norm: Vec<LayerNorm>,
    /// `tconv[l - 1]` maps level `l` back to the length of level `l - 1`.
    tconv: Vec<TConv1d>,
    pub span_mlp: Mlp,
    pub class_mlp: Mlp,
}

impl Proposer {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, cfg: &ModelConfig, num_classes: usize, backward_block: bool) -> Result<Self> {
        let d = cfg.dim;
        let pyramid = PyramidConfig::new(&cfg.kernel_sizes);
        let levels = pyramid.max_levels();
        let mut p = Proposer {
            cfg: pyramid,
            dim: d,
            backward_block,
            fwd_norm: vec![],
            fwd_gru: vec![],
            fwd_lin: vec![],
            conv: vec![],
            bwd_norm: vec![],
            bwd_gru: vec![],
            merge: vec![],
            out_norm: vec![],
            tconv: vec![],
            span_mlp: Mlp::new(store, rng, "prop.span_mlp", &[d, cfg.mlp_hidden, 2], Activation::Gelu)?,
            class_mlp: Mlp::new(store, rng, "prop.class_mlp", &[d, cfg.mlp_hidden, num_classes], Activation::Gelu)?,
        };
        for l in 0..levels {
            p.fwd_norm.push(LayerNorm::new(store, &format!("prop.fwd{l}.norm"), d)?);
            p.fwd_gru.push(BiGru::new(store, rng, &format!("prop.fwd{l}.gru"), d, d / 2)?);
            p.fwd_lin.push(Linear::new(store, rng, &format!("prop.fwd{l}.lin"), d, d)?);
            if l + 1 < levels {
                let k = cfg.kernel_sizes[l];
                p.conv.push(Conv1d::new(store, rng, &format!("prop.conv{l}"), k, d, d)?);
                p.bwd_norm.push(LayerNorm::new(store, &format!("prop.bwd{l}.norm"), d)?);
                p.bwd_gru.push(BiGru::new(store, rng, &format!("prop.bwd{l}.gru"), d, d / 2)?);
            }
            p.merge.push(Linear::new(store, rng, &format!("prop.bwd{l}.merge"), 2 * d, d)?);
            p.out_norm.push(LayerNorm::new(store, &format!("prop.bwd{l}.out_norm"), d)?);
            if l > 0 {
                let k = cfg.kernel_sizes[l - 1];
                p.tconv.push(TConv1d::new(store, rng, &format!("prop.tconv{l}"), k, d, d)?);
            }
        }
        Ok(p)
    }

    /// Parameters of the backward block (zeroed by the residual-path check).
    pub fn backward_block_params(&self) -> Vec<crate::numerics::ParamId> {
        let mut ids = vec![];
        for gru in &self.bwd_gru {
            for c in [&gru.forward, &gru.backward] {
                ids.extend([c.w_x, c.b_x, c.w_h, c.b_h]);
            }
        }
        for m in &self.merge {
            ids.extend([m.weight, m.bias]);
        }
        for t in &self.tconv {
            ids.extend([t.weight, t.bias]);
        }
        ids
    }

    /// Forward features `H^f_l` for every level that fits the sentence.
    pub fn forward_pass(&self, g: &mut Graph, h: Var) -> Result<Vec<Var>> {
        let len = g.value(h).rows();
        let levels = self.cfg.num_levels(len);
        let mut out = Vec::with_capacity(levels);
        let mut x = h;
        for l in 0..levels {
            let z = self.fwd_norm[l].apply(g, x)?;
            let z = self.fwd_gru[l].apply(g, z)?;
            let hf = self.fwd_lin[l].apply(g, z)?;
            out.push(hf);
            if l + 1 < levels {
                let c = self.conv[l].apply(g, hf)?;
                x = g.gelu(c);
            }
        }
        Ok(out)
    }

    /// Refined features `H_l` for every level, top-down.
    pub fn backward_pass(&self, g: &mut Graph, h: Var, forwards: &[Var]) -> Result<Vec<Var>> {
        if forwards.is_empty() {
            return Err(Error::EmptyInput("backward_pass"));
        }
        if !self.backward_block {
            return Ok(forwards.to_vec());
        }
        let len = g.value(h).rows();
        let d = self.dim;
        let top = forwards.len() - 1;
        let mut refined = vec![None; forwards.len()];
        let mut feedback: Option<Var> = None;
        for l in (0..=top).rev() {
            let hf = forwards[l];
            let rows = g.value(hf).rows();
            let side = match feedback {
                Some(b) => {
                    let z = self.bwd_norm[l].apply(g, b)?;
                    self.bwd_gru[l].apply(g, z)?
                }
                None => g.constant(Tensor::zeros(&[rows, d])),
            };
            let cat = g.concat_cols(&[hf, side]);
            let merged = self.merge[l].apply(g, cat)?;
            let v = self.cfg.span_length(l).unwrap();
            let residual = g.sliding_mean(h, v);
            let sum = g.add(residual, merged);
            let hl = self.out_norm[l].apply(g, sum)?;
            refined[l] = Some(hl);
            if l > 0 {
                let t = self.tconv[l - 1].apply(g, hl)?;
                let b = g.gelu(t);
                let expect = self.cfg.level_len(len, l - 1).unwrap();
                if g.value(b).rows() != expect {
                    return Err(Error::shape("backward_pass", g.value(b).shape(), &[expect, d]));
                }
                feedback = Some(b);
            }
        }
        Ok(refined.into_iter().map(Option::unwrap).collect())
    }

    pub fn pyramid(&self, g: &mut Graph, h: Var) -> Result<PyramidOutput> {
        let forwards = self.forward_pass(g, h)?;
        let refined = self.backward_pass(g, h, &forwards)?;
        Ok(PyramidOutput { forwards, refined })
    }

    /// Spans of every feature in level order, and each token's membership
    /// mask over them (row-major `[L, R]`).
    pub fn memberships(&self, len: usize) -> (Vec<(usize, usize)>, Vec<bool>) {
        let mut spans = vec![];
        for l in 0..self.cfg.num_levels(len) {
            let n = self.cfg.level_len(len, l).unwrap();
            let v = self.cfg.span_length(l).unwrap();
            spans.extend((0..n).map(|i| (i, i + v - 1)));
        }
        let mask = (0..len)
            .flat_map(|j| spans.iter().map(move |&(s, e)| s <= j && j <= e))
            .collect();
        (spans, mask)
    }

    /// Location `n_j` of every token from per-feature start/end scores
    /// `[R, 2]`: a softmax over the token's member features, separately for
    /// the start and end component, averaging the member span endpoints.
    pub fn fuse_locations(&self, g: &mut Graph, scores: Var, len: usize) -> Var {
        let (spans, mask) = self.memberships(len);
        let r = spans.len();
        assert!((0..len).all(|j| mask[j * r..(j + 1) * r].iter().any(|&m| m)), "token with no member feature");
        let ones = g.constant(Tensor::full(&[len, 1], 1.0));
        let mut parts = Vec::with_capacity(2);
        for side in 0..2 {
            let col = g.slice_cols(scores, side, side + 1);
            let wide = g.matmul_bt(ones, col);
            let alpha = g.masked_softmax(wide, &mask);
            let ends: Vec<f64> = spans
                .iter()
                .map(|&(s, e)| if side == 0 { s as f64 } else { e as f64 })
                .collect();
            let ends = g.constant(Tensor::matrix(r, 1, ends));
            parts.push(g.matmul(alpha, ends));
        }
        g.concat_cols(&parts)
    }

    /// One proposal per token from the refined pyramid.
    pub fn fuse_proposals(&self, g: &mut Graph, refined: &[Var]) -> Result<Proposals> {
        let bottom = *refined.first().ok_or(Error::EmptyInput("fuse_proposals"))?;
        let len = g.value(bottom).rows();
        let feats = g.concat_rows(refined);
        let scores = self.span_mlp.apply(g, feats)?;
        let n = self.fuse_locations(g, scores, len);
        let c = self.class_mlp.apply(g, bottom)?;
        Ok(Proposals { q: bottom, c, n })
    }

    pub fn propose(&self, g: &mut Graph, h: Var) -> Result<Proposals> {
        let p = self.pyramid(g, h)?;
        self.fuse_proposals(g, &p.refined)
    }
}

/// Every `(start, end)` pair with `start <= end < len`, lexicographic.
pub fn span_pairs(len: usize) -> Arc<[(usize, usize)]> {
    (0..len).flat_map(|s| (s..len).map(move |e| (s, e))).collect()
}

/// Column of `(s, e)` in [`span_pairs`] order.
pub fn pair_index(len: usize, s: usize, e: usize) -> usize {
    debug_assert!(s <= e && e < len);
    s * len - s * s.saturating_sub(1) / 2 + (e - s)
}
