//! Named finite-difference checks over every primitive and every composite
//! of the model, run at 64-bit precision.

use serde::Serialize;
use std::fmt;
use std::time::{Duration, Instant};

use crate::config::{AblationConfig, EmbeddingConfig, ModelConfig};
use crate::data::{EntitySpan, SentenceExample};
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::numerics::*;
use crate::proposer::{Proposals, Proposer};
use crate::regressor::{category_embed, gated_update, Regressor};
use crate::trainer::{assign, bipartite_loss};
use crate::vocab::{IndexedSentence, Vocabularies};

pub const TOLERANCE: f64 = 1e-4;

/// Coordinates perturbed per parameter tensor in the model-level checks.
const MODEL_COORDS: usize = 6;

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub seed: u64,
    /// Max relative error between analytic and central-difference gradients.
    pub error: f64,
    /// Parameter (or "input") where the worst error occurred.
    pub worst: String,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub fault: Option<String>,
    pub checks: Vec<CheckOutcome>,
    #[serde(skip)]
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CheckOutcome> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(op) = &self.fault {
            writeln!(f, "fault injected into backward of op `{op}`")?;
        }
        for c in &self.checks {
            writeln!(
                f,
                "{:<18} seed {:>3}  max rel err {:.3e}  {}{}",
                c.name,
                c.seed,
                c.error,
                if c.passed { "ok" } else { "FAIL" },
                if c.passed { String::new() } else { format!(" (worst at {})", c.worst) }
            )?;
        }
        write!(
            f,
            "{} of {} checks passed in {:.1}s",
            self.checks.iter().filter(|c| c.passed).count(),
            self.checks.len(),
            self.elapsed.as_secs_f64()
        )
    }
}

type Check = fn(&GradCheck, u64) -> Result<(f64, String)>;

/// `(name, seed, check)` for every check in suite order.
pub const CHECKS: &[(&str, u64, Check)] = &[
    ("linear_affine", 7, linear_check),
    ("conv1d_valid", 11, conv_check),
    ("tconv1d", 13, tconv_check),
    ("bigru_encode", 17, bigru_check),
    ("layer_norm", 19, layer_norm_check),
    ("softmax", 3, softmax_check),
    ("activations", 5, activation_check),
    ("mean_pool", 23, mean_pool_check),
    ("mlp_apply", 29, mlp_check),
    ("linear_gelu_sum", 31, composed_check),
    ("tape_ops", 37, tape_check),
    ("encoder", 41, encoder_check),
    ("proposer", 43, proposer_check),
    ("category_embed", 47, category_check),
    ("sma_heads", 53, sma_check),
    ("aggregate", 59, aggregate_check),
    ("gated_update", 61, gate_check),
    ("regressor", 67, regressor_check),
    ("head", 71, head_check),
    ("loss", 79, loss_check),
    ("pipeline", 83, pipeline_check),
];

/// Run every check. `fault` names a tape op whose backward is deliberately
/// corrupted (see [`OP_NAMES`]).
pub fn run_suite(fault: Option<&str>) -> Result<SuiteReport> {
    let fault: Option<&'static str> = match fault {
        None => None,
        Some(op) => Some(
            OP_NAMES
                .iter()
                .copied()
                .find(|&n| n == op)
                .ok_or_else(|| Error::config("fault", format!("unknown op {op:?}; expected one of {OP_NAMES:?}")))?,
        ),
    };
    let start = Instant::now();
    let gc = GradCheck::default().with_fault(fault);
    let mut checks = Vec::with_capacity(CHECKS.len());
    for &(name, seed, check) in CHECKS {
        let (error, worst) = check(&gc.clone().with_seed(seed), seed)?;
        checks.push(CheckOutcome {
            name,
            seed,
            error,
            worst,
            passed: error <= TOLERANCE,
        });
    }
    Ok(SuiteReport {
        fault: fault.map(String::from),
        checks,
        elapsed: start.elapsed(),
    })
}

fn worst(a: (f64, String), b: (f64, String)) -> (f64, String) {
    if b.0 > a.0 {
        b
    } else {
        a
    }
}

/// Input and parameter check of `f` at `x`.
fn both<F>(gc: &GradCheck, store: &ParamStore, x: &Tensor, f: F) -> Result<(f64, String)>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let ex = gc.input(store, x, &f)?;
    let ep = gc.params(store, &[], |g| {
        let xv = g.constant(x.clone());
        f(g, xv)
    })?;
    Ok(worst((ex, "input".into()), ep))
}

/// Fixed random weights turning a tensor into a scalar that depends on
/// every entry.
fn probe(g: &mut Graph, x: Var, seed: u64) -> Var {
    let w = Rng::new(seed).normal_tensor(g.shape(x), 1.0);
    let w = g.constant(w);
    let p = g.mul(x, w);
    g.sum_all(p)
}

fn linear_check(gc: &GradCheck, seed: u64) -> Result<(f64, String)> {
    let mut rng = Rng::new(seed);
    let mut s = ParamStore::new();
    let lin = Linear::new(&mut s, &mut rng, "lin", 4, 3)?;
    *s.tensor_mut(lin.bias) = rng.normal_tensor(&[3], 1.0);
    let x = rng.normal_tensor(&[2, 4], 1.0);
    both(gc, &s, &x, |g, x| {
        let y = lin.apply(g, x)?;
        Ok(g.tanh(y))
    })
}

fn conv_check(gc: &GradCheck, seed: u64) -> Result<(f64, String)> {
    let mut rng = Rng::new(seed);
    let mut s = ParamStore::new();
    let conv = Conv1d::new(&mut s, &mut rng, "conv", 2, 3, 4)?;
    let x = rng.normal_tensor(&[5, 3], 1.0);
    both(gc, &s, &x, |g, x| {
        let y = conv.apply(g, x)?;
        Ok(probe(g, y, seed))
    })
}

fn tconv_check(gc: &GradCheck, seed: u64) -> Result<(f64, String)> {
    let mut rng = Rng::new(seed);
    let mut s = ParamStore::new();
    let tconv = TConv1d::new(&mut s, &mut rng, "tconv", 2, 3, 4)?;
    let x = rng.normal_tensor(&[3, 3], 1.0);
    both(gc, &s, &x, |g, x| {
        let y = tconv.apply(g, x)?;
        let y = g.gelu(y);
        Ok(probe(g, y, seed))
    })
}

fn bigru_check(gc: &GradCheck, seed: u64) -> Result<(f64, String)> {
    let mut rng = Rng::new(seed);
    let mut s = ParamStore::new();
    let gru = BiGru::new(&mut s, &mut rng, "gru", 3, 2)?;
    let x = rng.normal_tensor(&[4, 3], 1.0);
    both(gc, &s, &x, |g, x| {
        let y = bigru_encode(g, x, &gru)?;
        Ok(probe(g, y, seed))
    })
}

fn layer_norm_check(gc: &GradCheck, seed: u64) -> Result<(f64, String)> {
    let mut rng = Rng::new(seed);
    let mut s = ParamStore::new();
    let ln = LayerNorm::new(&mut s, "ln", 5)?;
    *s.tensor_mut(ln.gamma) = rng.normal_tensor(&[5], 1.0);
    *s.tensor_mut(ln.beta) = rng.normal_tensor(&[5], 1.0);
    let x = rng.normal_tensor(&[3, 5], 1.0);
    both(gc, &s, &x, |g, x| {
        let y = ln.apply(g, x)?;
        Ok(probe(g, y, seed))
    })
}

fn softmax_check(gc: &GradCheck, seed: u64) -> Result<(f64, String)> {
    let x = Rng::new(seed).normal_tensor(&[2, 5], 1.0);
    let s = ParamStore::new();
    let e = gc.input(&s, &x, |g, x| {
        let y = softmax_lastdim(g, x);
        Ok(probe(g, y, seed))
    })?;
    Ok((e, "input".into()))
}

fn activation_check(gc: &GradCheck, seed: u64) -> Result<(f64, String)> {
    let x = Rng::new(seed).normal_tensor(&[3, 4], 1.5);
    let s = ParamStore::new();
    let mut out = (0.0, String::new());
    for act in [Activation::Gelu, Activation::Sigmoid, Activation::Tanh] {
        let e = gc.input(&s, &x, |g, x| {
            let y = activate(g, x, act);
            Ok(probe(g, y, seed))
        })?;
        out = worst(out, (e, format!("{act:?}")));
    }
    Ok(out)
}

fn mean_pool_check(gc: &GradCheck, seed: u64) -> Result<(f64, String)> {
    let x = Rng::new(seed).normal_tensor(&[5, 3], 1.0);
    let s = ParamStore::new();
    let e = gc.input(&s, &x, |g, x| {
        let a = mean_pool(g, x, None)?;
        let b = mean_pool(g, x, Some(2))?;
        let pa = probe(g, a, seed);
        let pb = probe(g, b, seed + 1);
        Ok(g.add(pa, pb))
    })?;
    Ok((e, "input".into()))
}

fn mlp_check(gc: &GradCheck, seed: u64) -> Result<(f64, String)> {
    let mut rng = Rng::new(seed);
    let mut s = ParamStore::new();
    let mlp = Mlp::new(&mut s, &mut rng, "mlp", &[3, 5, 2], Activation::Gelu)?;
    let x = rng.normal_tensor(&[2, 3], 1.0);
    both(gc, &s, &x, |g, x| {
        let y = mlp.apply(g, x)?;
        Ok(g.mul(y, y))
    })
}

fn composed_check(gc: &GradCheck, seed: u64) -> Result<(f64, String)> {
    let mut rng = Rng::new(seed);
    let mut s = ParamStore::new();
    let lin = Linear::new(&mut s, &mut rng, "lin", 3, 4)?;
    let x = rng.normal_tensor(&[2, 3], 1.0);
    both(gc, &s, &x, |g, x| {
        let y = lin.apply(g, x)?;
        let y = g.gelu(y);
        Ok(g.sum_all(y))
    })
}

/// The ops not reached through the layers above, composed into one scalar.
fn tape_check(gc: &GradCheck, seed: u64) -> Result<(f64, String)> {
    let mut rng = Rng::new(seed);
    let s = ParamStore::new();
    let x = rng.normal_tensor(&[4, 6], 1.0);
    let mu = rng.normal_tensor(&[4, 2], 1.0);
    let th = rng.normal_tensor(&[4, 3], 1.0);
    let pairs: std::sync::Arc<[(usize, usize)]> = vec![(0, 0), (0, 2), (1, 3), (2, 2)].into();
    let mask: Vec<bool> = (0..16).map(|i| i % 3 != 1).collect();
    let e = gc.input(&s, &x, |g, x| {
        let a = g.slice_cols(x, 0, 2);
        let m = g.constant(mu.clone());
        let m = g.add(m, a);
        let t = g.constant(th.clone());
        let b = g.slice_cols(x, 2, 5);
        let t = g.mul(t, b);
        let pts = g.slice_cols(x, 4, 6);
        let lp = g.log_prior(m, t, pts, 1e-3);
        let sm = g.masked_softmax(lp, &mask);
        let gs = g.slice_cols(x, 0, 4);
        let ge = g.slice_cols(x, 2, 6);
        let pg = g.pair_gather(gs, ge, pairs.clone());
        let both = g.concat_cols(&[sm, pg]);
        let r = g.slice_rows(x, 1, 3);
        let r = g.gather_rows(r, vec![1, 0, 1]);
        let stacked = g.concat_rows(&[x, r]);
        let u = g.unfold(stacked, 3);
        let f = g.fold(u, 3);
        let ln = g.layer_norm(f, 1e-5);
        let ms = g.sliding_mean(ln, 4);
        let rs = g.row_sum(ms);
        let om = g.one_minus(rs);
        let sc = g.scale(om, 0.3);
        let sig = g.sigmoid(sc);
        let full = g.concat_cols(&[both, sig, sig]);
        let prod = probe_rows(g, full, seed);
        let sub = g.sub(prod, full);
        let mr = g.mean_rows(sub);
        let sm2 = g.softmax(mr);
        let probs = g.concat_rows(&[sm2, sm2]);
        let nl = g.pick_neg_log(probs, vec![Some(1), Some(7)]);
        let s1 = g.sum_all(sub);
        Ok(g.add(nl, s1))
    })?;
    Ok((e, "input".into()))
}

fn probe_rows(g: &mut Graph, x: Var, seed: u64) -> Var {
    let w = Rng::new(seed).normal_tensor(g.shape(x), 1.0);
    let w = g.constant(w);
    g.mul(x, w)
}

/// Small model on one sentence, with every input channel on.
fn toy(seed: u64, model: ModelConfig, len: usize) -> Result<(Model, IndexedSentence)> {
    let words = ["ab", "c", "de", "fgh", "i"];
    let ex = SentenceExample {
        id: "toy".into(),
        tokens: (0..len).map(|i| words[i % words.len()].to_string()).collect(),
        pos: Some((0..len).map(|i| ["N", "V"][i % 2].to_string()).collect()),
        entities: vec![EntitySpan::new(0, 1, "A"), EntitySpan::new(1, 1, "B")],
    };
    let vocab = Vocabularies::build(std::slice::from_ref(&ex), &[]);
    let spec = ModelSpec {
        model,
        embeddings: EmbeddingConfig {
            char_dim: 4,
            char_out: 4,
            word_dim: 6,
            pos_dim: 2,
            ..Default::default()
        },
        ablation: AblationConfig::default(),
        contextual_dim: 0,
    };
    let sentence = vocab.index(&ex)?;
    Ok((Model::new(spec, vocab, seed, None, None)?, sentence))
}

fn small_config(dim: usize, heads: usize, kernels: &[usize], layers: usize) -> ModelConfig {
    ModelConfig {
        dim,
        heads,
        kernel_sizes: kernels.to_vec(),
        regressor_layers: layers,
        mlp_hidden: 8,
        ..Default::default()
    }
}

fn proposal_probe(g: &mut Graph, p: Proposals, seed: u64) -> Var {
    let a = probe(g, p.q, seed);
    let b = probe(g, p.c, seed + 1);
    let c = probe(g, p.n, seed + 2);
    let ab = g.add(a, b);
    g.add(ab, c)
}

fn encoder_check(gc: &GradCheck, seed: u64) -> Result<(f64, String)> {
    let (m, s) = toy(seed, small_config(8, 2, &[2], 1), 3)?;
    let enc = &m.encoder;
    let ids: Vec<ParamId> = m
        .store
        .iter()
        .filter(|(_, p)| p.name.starts_with("enc."))
        .map(|(id, _)| id)
        .collect();
    gc.clone().with_max_coords(MODEL_COORDS * 2).params(&m.store, &ids, |g| {
        let h = enc.encode_sentence(g, &s)?;
        Ok(probe(g, h, seed))
    })
}

fn proposer_check(gc: &GradCheck, seed: u64) -> Result<(f64, String)> {
    let mut rng = Rng::new(seed);
    let mut s = ParamStore::new();
    let cfg = small_config(6, 2, &[2], 1);
    let p = Proposer::new(&mut s, &mut rng, &cfg, 3, true)?;
    let x = rng.normal_tensor(&[4, 6], 1.0);
    let ex = gc.input(&s, &x, |g, x| {
        let out = p.propose(g, x)?;
        Ok(proposal_probe(g, out, seed))
    })?;
    let ep = gc.clone().with_max_coords(MODEL_COORDS * 2).params(&s, &[], |g| {
        let x = g.constant(x.clone());
        let out = p.propose(g, x)?;
        Ok(proposal_probe(g, out, seed))
    })?;
    Ok(worst((ex, "input".into()), ep))
}

fn category_check(gc: &GradCheck, seed: u64) -> Result<(f64, String)> {
    let mut rng = Rng::new(seed);
    let mut s = ParamStore::new();
    let q = s.add("q", rng.normal_tensor(&[3, 4], 1.0), true)?;
    let c = s.add("c", rng.normal_tensor(&[3, 3], 1.0), true)?;
    let hc = s.add("category", rng.normal_tensor(&[4, 3], 0.1), true)?;
    gc.params(&s, &[], |g| {
        let (q, c, hc) = (g.param(q), g.param(c), g.param(hc));
        let h = category_embed(g, q, c, hc);
        Ok(probe(g, h, seed))
    })
}

fn regressor_fixture(seed: u64, layers: usize) -> Result<(ParamStore, Regressor, Tensor, Tensor, Tensor)> {
    let mut rng = Rng::new(seed);
    let mut s = ParamStore::new();
    let cfg = small_config(8, 2, &[2], layers);
    let r = Regressor::new(&mut s, &mut rng, &cfg, 3, AblationConfig::default())?;
    let q = rng.normal_tensor(&[3, 8], 1.0);
    let c = rng.normal_tensor(&[3, 3], 1.0);
    let n = rng.uniform_tensor(&[3, 2], 0.0, 2.0);
    Ok((s, r, q, c, n))
}

fn sma_check(gc: &GradCheck, seed: u64) -> Result<(f64, String)> {
    let (s, r, h, _, n) = regressor_fixture(seed, 1)?;
    let layer = &r.layers[0];
    let f = |g: &mut Graph, h: Var, n: Var| -> Result<Var> {
        let heads = r.sma_heads(g, layer, h, n)?;
        let mut acc = Vec::new();
        for (m, t) in heads.iter().enumerate() {
            let k = seed + 10 * m as u64;
            acc.push(probe(g, t.o, k));
            acc.push(probe(g, t.mu, k + 1));
            acc.push(probe(g, t.theta, k + 2));
            acc.push(probe(g, t.attn, k + 3));
        }
        let cat = g.concat_cols(&acc);
        Ok(g.sum_all(cat))
    };
    let eh = gc.input(&s, &h, |g, h| {
        let n = g.constant(n.clone());
        f(g, h, n)
    })?;
    let en = gc.input(&s, &n, |g, n| {
        let h = g.constant(h.clone());
        f(g, h, n)
    })?;
    let ids = layer_ids(&s, &["reg0.wq", "reg0.wk", "reg0.wv", "reg0.spatial"]);
    let ep = gc.params(&s, &ids, |g| {
        let (h, n) = (g.constant(h.clone()), g.constant(n.clone()));
        f(g, h, n)
    })?;
    Ok(worst(worst((eh, "input h".into()), (en, "input n".into())), ep))
}

fn layer_ids(s: &ParamStore, prefixes: &[&str]) -> Vec<ParamId> {
    s.iter()
        .filter(|(_, p)| prefixes.iter().any(|pre| p.name.starts_with(pre)))
        .map(|(id, _)| id)
        .collect()
}

fn aggregate_check(gc: &GradCheck, seed: u64) -> Result<(f64, String)> {
    let (s, r, _, _, _) = regressor_fixture(seed, 1)?;
    let layer = &r.layers[0];
    let mut rng = Rng::new(seed + 100);
    let o = rng.normal_tensor(&[3, 8], 1.0);
    let mus = [rng.normal_tensor(&[3, 2], 1.0), rng.normal_tensor(&[3, 2], 1.0)];
    let f = |g: &mut Graph, o: Var| -> Result<Var> {
        let q = layer.aggregate.apply(g, o)?;
        let heads: Vec<Var> = (0..2)
            .map(|m| {
                let om = g.slice_cols(o, 4 * m, 4 * m + 4);
                layer.head_mlp.apply(g, om)
            })
            .collect::<Result<_>>()?;
        let mus: Vec<Var> = mus.iter().map(|m| g.constant(m.clone())).collect();
        let (n, _) = crate::regressor::fuse_heads_location(g, &heads, &mus);
        let a = probe(g, q, seed);
        let b = probe(g, n, seed + 1);
        Ok(g.add(a, b))
    };
    let eo = gc.input(&s, &o, f)?;
    let ids = layer_ids(&s, &["reg0.aggregate", "reg0.head_mlp"]);
    let ep = gc.params(&s, &ids, |g| {
        let o = g.constant(o.clone());
        f(g, o)
    })?;
    Ok(worst((eo, "input".into()), ep))
}

fn gate_check(gc: &GradCheck, seed: u64) -> Result<(f64, String)> {
    let (s, r, h, _, _) = regressor_fixture(seed, 1)?;
    let layer = &r.layers[0];
    let qp = Rng::new(seed + 1).normal_tensor(&[3, 8], 1.0);
    let eh = gc.input(&s, &h, |g, h| {
        let qp = g.constant(qp.clone());
        let y = gated_update(g, &layer.gate, h, qp)?;
        let d = layer.logits_mlp.apply(g, y)?;
        let a = probe(g, y, seed);
        let b = probe(g, d, seed + 1);
        Ok(g.add(a, b))
    })?;
    let ids = layer_ids(&s, &["reg0.gate", "reg0.logits_mlp"]);
    let ep = gc.params(&s, &ids, |g| {
        let (h, qp) = (g.constant(h.clone()), g.constant(qp.clone()));
        let y = gated_update(g, &layer.gate, h, qp)?;
        let d = layer.logits_mlp.apply(g, y)?;
        let a = probe(g, y, seed);
        let b = probe(g, d, seed + 1);
        Ok(g.add(a, b))
    })?;
    Ok(worst((eh, "input".into()), ep))
}

fn regressor_check(gc: &GradCheck, seed: u64) -> Result<(f64, String)> {
    let (s, r, q, c, n) = regressor_fixture(seed, 2)?;
    let f = |g: &mut Graph, q: Var| -> Result<Var> {
        let c = g.constant(c.clone());
        let n = g.constant(n.clone());
        let (p, _) = r.regress(g, Proposals { q, c, n })?;
        Ok(proposal_probe(g, p, seed))
    };
    let eq = gc.input(&s, &q, f)?;
    let ep = gc.clone().with_max_coords(MODEL_COORDS * 2).params(&s, &[], |g| {
        let q = g.constant(q.clone());
        f(g, q)
    })?;
    Ok(worst((eq, "input".into()), ep))
}

fn head_check(gc: &GradCheck, seed: u64) -> Result<(f64, String)> {
    let (m, _) = toy(seed, small_config(8, 2, &[2], 1), 3)?;
    let mut rng = Rng::new(seed);
    let q = rng.normal_tensor(&[3, 8], 1.0);
    let c = rng.normal_tensor(&[3, m.vocab.types.num_classes()], 1.0);
    let n = rng.uniform_tensor(&[3, 2], 0.0, 2.0);
    let h = rng.normal_tensor(&[3, 8], 1.0);
    let f = |g: &mut Graph, q: Var| -> Result<Var> {
        let (c, n, h) = (g.constant(c.clone()), g.constant(n.clone()), g.constant(h.clone()));
        let out = m.head.apply(g, Proposals { q, c, n }, h)?;
        let a = g.pick_neg_log(out.p_c, vec![Some(0), Some(2), None]);
        let b = g.pick_neg_log(out.p_n, vec![Some(1), Some(5), Some(0)]);
        Ok(g.add(a, b))
    };
    let eq = gc.input(&m.store, &q, f)?;
    let ids = layer_ids(&m.store, &["head."]);
    let ep = gc.params(&m.store, &ids, |g| {
        let q = g.constant(q.clone());
        f(g, q)
    })?;
    Ok(worst((eq, "input".into()), ep))
}

/// Full forward pass plus the matching loss, with the assignment computed
/// once at the unperturbed parameters and then held fixed.
fn model_loss_check(gc: &GradCheck, seed: u64, cfg: ModelConfig) -> Result<(f64, String)> {
    let (m, s) = toy(seed, cfg, 3)?;
    let none = m.none_id();
    let dists = m.distributions(&s)?;
    let a = assign(&s.targets, &dists, none)?;
    gc.clone().with_max_coords(MODEL_COORDS).params(&m.store, &[], |g| {
        let out = m.forward(g, &s)?;
        Ok(bipartite_loss(g, &out.head, &a, &s.targets, none))
    })
}

fn loss_check(gc: &GradCheck, seed: u64) -> Result<(f64, String)> {
    model_loss_check(gc, seed, small_config(8, 2, &[2, 2], 1))
}

fn pipeline_check(gc: &GradCheck, seed: u64) -> Result<(f64, String)> {
    model_loss_check(gc, seed, small_config(16, 2, &[2], 2))
}
