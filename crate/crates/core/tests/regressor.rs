use nestor_core::config::{AblationConfig, ModelConfig};
use nestor_core::numerics::graph::log_prior_value;
use nestor_core::numerics::{GruCell, Graph, ParamStore, Rng, Tensor};
use nestor_core::proposer::Proposals;
use nestor_core::regressor::{category_embed, fuse_heads_location, gated_update, Regressor, THETA_INIT};
use proptest::prelude::*;

fn regressor(seed: u64, dim: usize, heads: usize, layers: usize, classes: usize, ablation: AblationConfig) -> (ParamStore, Regressor) {
    let mut s = ParamStore::new();
    let cfg = ModelConfig {
        dim,
        heads,
        regressor_layers: layers,
        mlp_hidden: 8,
        ..Default::default()
    };
    let r = Regressor::new(&mut s, &mut Rng::new(seed), &cfg, classes, ablation).unwrap();
    (s, r)
}

fn inputs(seed: u64, len: usize, dim: usize, classes: usize) -> (Tensor, Tensor, Tensor) {
    let mut rng = Rng::new(seed);
    (
        rng.normal_tensor(&[len, dim], 1.0),
        rng.normal_tensor(&[len, classes], 1.0),
        rng.uniform_tensor(&[len, 2], 0.0, len as f64),
    )
}

/// Precision matrix entries recovered from the quadratic form by polarization.
fn theta_matrix(theta: [f64; 3], eps: f64) -> [[f64; 2]; 2] {
    let q = |x: [f64; 2]| -log_prior_value([0.0, 0.0], theta, x, eps);
    let a = q([1.0, 0.0]);
    let d = q([0.0, 1.0]);
    let b = (q([1.0, 1.0]) - a - d) / 2.0;
    [[a, b], [b, d]]
}

fn min_eigenvalue(m: [[f64; 2]; 2]) -> f64 {
    let half_tr = (m[0][0] + m[1][1]) / 2.0;
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    half_tr - (half_tr * half_tr - det).max(0.0).sqrt()
}

#[test]
fn precision_eigenvalues_stay_above_eps() {
    let eps = 1e-4;
    let mut rng = Rng::new(1);
    for _ in 0..100 {
        let t = [rng.normal() * 2.0, rng.normal() * 2.0, rng.normal() * 2.0];
        let m = theta_matrix(t, eps);
        // direct construction: L L^T + eps I
        let l = [[t[0], 0.0], [t[1], t[2]]];
        let direct = [
            [l[0][0] * l[0][0] + eps, l[0][0] * l[1][0]],
            [l[1][0] * l[0][0], l[1][0] * l[1][0] + l[1][1] * l[1][1] + eps],
        ];
        // the form in use is x^T L L^T x read with L^T acting first
        let alt = [
            [t[0] * t[0] + eps, t[0] * t[1]],
            [t[0] * t[1], t[1] * t[1] + t[2] * t[2] + eps],
        ];
        for i in 0..2 {
            for j in 0..2 {
                assert!((m[i][j] - alt[i][j]).abs() < 1e-9 * (1.0 + alt[i][j].abs()));
            }
        }
        assert!(min_eigenvalue(m) >= eps - 1e-9, "{m:?}");
        assert!(min_eigenvalue(direct) >= eps - 1e-9);
        assert_eq!(m[0][1], m[1][0]);
    }
}

#[test]
fn log_prior_examples() {
    let id = [1.0, 0.0, 1.0];
    assert_eq!(log_prior_value([0.0, 0.0], id, [0.0, 0.0], 0.0), 0.0);
    assert_eq!(log_prior_value([0.0, 0.0], id, [1.0, 1.0], 0.0), -2.0);
    assert!(log_prior_value([0.0, 0.0], id, [2.0, 0.0], 0.0) < log_prior_value([0.0, 0.0], id, [1.0, 0.0], 0.0));
    // zero factor leaves eps I
    assert_eq!(log_prior_value([1.0, 2.0], [0.0; 3], [2.0, 4.0], 0.5), -2.5);
    assert_eq!(THETA_INIT, [0.5, 0.0, 0.5]);
}

#[test]
fn zero_spatial_output_means_mu_n_and_eps_identity() {
    let (mut s, r) = regressor(2, 8, 2, 1, 3, AblationConfig::default());
    let sp = &r.layers[0].spatial[0];
    let last = sp.mlp.layers.last().unwrap();
    *s.tensor_mut(last.weight) = Tensor::zeros(s.tensor(last.weight).shape());
    *s.tensor_mut(last.bias) = Tensor::zeros(s.tensor(last.bias).shape());
    let mut g = Graph::new(&s);
    let hq = g.constant(Rng::new(2).normal_tensor(&[3, 4], 1.0));
    let n = g.constant(Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 1.5], vec![2.0, 2.0]]).unwrap());
    let (mu, theta) = sp.apply(&mut g, hq, n).unwrap();
    assert_eq!(g.value(mu), g.value(n));
    assert!(g.value(theta).data().iter().all(|&v| v == 0.0));
}

#[test]
fn category_embed_examples() {
    let mut rng = Rng::new(3);
    let s = ParamStore::new();
    let mut g = Graph::new(&s);
    let qt = rng.normal_tensor(&[1, 4], 1.0);
    let hct = rng.normal_tensor(&[4, 2], 1.0);
    let q = g.constant(qt.clone());
    let hc = g.constant(hct.clone());
    let c = g.constant(Tensor::row(&[10.0, -10.0]));
    let h = category_embed(&mut g, q, c, hc);
    let norm = hct.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    for i in 0..4 {
        let want = qt.data()[i] + hct.data()[i * 2];
        assert!((g.value(h).data()[i] - want).abs() <= 1e-7 * norm);
    }
    let c = g.constant(Tensor::row(&[0.3, 0.3]));
    let h = category_embed(&mut g, q, c, hc);
    for i in 0..4 {
        let want = qt.data()[i] + (hct.data()[i * 2] + hct.data()[i * 2 + 1]) / 2.0;
        assert!((g.value(h).data()[i] - want).abs() < 1e-12);
    }
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn affine(x: &[Vec<f64>], w: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    let wr = w.to_rows();
    x.iter()
        .map(|row| {
            wr.iter()
                .zip(b.data())
                .map(|(wi, bi)| wi.iter().zip(row).map(|(a, c)| a * c).sum::<f64>() + bi)
                .collect()
        })
        .collect()
}

/// Plain scaled dot-product attention of every head, computed without the tape.
fn reference_attention(s: &ParamStore, r: &Regressor, h: &Tensor) -> Vec<Vec<Vec<f64>>> {
    let layer = &r.layers[0];
    let rows = h.to_rows();
    let q = affine(&rows, s.tensor(layer.wq.weight), s.tensor(layer.wq.bias));
    let k = affine(&rows, s.tensor(layer.wk.weight), s.tensor(layer.wk.bias));
    let dh = r.dim / r.heads;
    (0..r.heads)
        .map(|m| {
            q.iter()
                .map(|qi| {
                    let scores: Vec<f64> = k
                        .iter()
                        .map(|kj| (m * dh..(m + 1) * dh).map(|c| qi[c] * kj[c]).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    softmax(&scores)
                })
                .collect()
        })
        .collect()
}

fn assert_attention_matches(g: &Graph, heads: &[nestor_core::regressor::HeadTrace], want: &[Vec<Vec<f64>>]) {
    for (m, head) in heads.iter().enumerate() {
        let got = g.value(head.attn).to_rows();
        for (a, b) in got.iter().flatten().zip(want[m].iter().flatten()) {
            assert!((a - b).abs() <= 1e-6, "head {m}: {a} vs {b}");
        }
    }
}

#[test]
fn spatial_modulation_off_is_vanilla_attention() {
    let ablation = AblationConfig {
        spatial_modulation: false,
        ..Default::default()
    };
    let (s, r) = regressor(4, 8, 2, 1, 3, ablation);
    let (h, _, n) = inputs(4, 5, 8, 3);
    let mut g = Graph::new(&s);
    let hv = g.constant(h.clone());
    let nv = g.constant(n);
    let heads = r.sma_heads(&mut g, &r.layers[0], hv, nv).unwrap();
    assert_attention_matches(&g, &heads, &reference_attention(&s, &r, &h));
}

#[test]
fn zero_factor_and_eps_recover_vanilla_attention() {
    let (mut s, mut r) = regressor(5, 8, 2, 1, 3, AblationConfig::default());
    r.eps = 0.0;
    for sp in &r.layers[0].spatial {
        let last = sp.mlp.layers.last().unwrap();
        *s.tensor_mut(last.weight) = Tensor::zeros(s.tensor(last.weight).shape());
        *s.tensor_mut(last.bias) = Tensor::zeros(s.tensor(last.bias).shape());
    }
    let (h, _, n) = inputs(5, 4, 8, 3);
    let mut g = Graph::new(&s);
    let hv = g.constant(h.clone());
    let nv = g.constant(n);
    let heads = r.sma_heads(&mut g, &r.layers[0], hv, nv).unwrap();
    assert_attention_matches(&g, &heads, &reference_attention(&s, &r, &h));
}

#[test]
fn single_token_attends_to_itself() {
    let (s, r) = regressor(6, 8, 2, 1, 3, AblationConfig::default());
    let (h, _, n) = inputs(6, 1, 8, 3);
    let mut g = Graph::new(&s);
    let hv = g.constant(h);
    let nv = g.constant(n);
    for head in r.sma_heads(&mut g, &r.layers[0], hv, nv).unwrap() {
        assert_eq!(g.value(head.attn).data(), &[1.0]);
    }
}

#[test]
fn head_location_examples_and_hull() {
    let s = ParamStore::new();
    let mut g = Graph::new(&s);
    let zero = g.constant(Tensor::zeros(&[1, 2]));
    let m1 = g.constant(Tensor::row(&[1.0, 2.0]));
    let m2 = g.constant(Tensor::row(&[3.0, 4.0]));
    let (n, _) = fuse_heads_location(&mut g, &[zero, zero], &[m1, m2]);
    assert_eq!(g.value(n).data(), &[2.0, 3.0]);

    for seed in 0..20 {
        let mut rng = Rng::new(seed);
        let heads = 1 + (seed as usize % 4);
        let scores: Vec<_> = (0..heads).map(|_| g.constant(rng.normal_tensor(&[3, 2], 3.0))).collect();
        let mus: Vec<Tensor> = (0..heads).map(|_| rng.normal_tensor(&[3, 2], 5.0)).collect();
        let mv: Vec<_> = mus.iter().map(|m| g.constant(m.clone())).collect();
        let (n, w) = fuse_heads_location(&mut g, &scores, &mv);
        for i in 0..3 {
            for c in 0..2 {
                let vals: Vec<f64> = mus.iter().map(|m| m.row_slice(i)[c]).collect();
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let x = g.value(n).row_slice(i)[c];
                assert!(lo - 1e-12 <= x && x <= hi + 1e-12);
                let sum: f64 = g.value(w[c]).row_slice(i).iter().sum();
                assert!((sum - 1.0).abs() <= 1e-6);
            }
        }
    }
}

#[test]
fn zero_aggregate_weights_give_bias_rows() {
    let (mut s, r) = regressor(7, 8, 2, 1, 3, AblationConfig::default());
    let agg = &r.layers[0].aggregate;
    *s.tensor_mut(agg.weight) = Tensor::zeros(&[8, 8]);
    *s.tensor_mut(agg.bias) = Rng::new(7).normal_tensor(&[8], 1.0);
    let mut g = Graph::new(&s);
    let o = g.constant(Rng::new(8).normal_tensor(&[3, 8], 1.0));
    let q = agg.apply(&mut g, o).unwrap();
    for row in g.value(q).to_rows() {
        assert_eq!(row.as_slice(), s.tensor(agg.bias).data());
    }
}

fn gate_with_biases(seed: u64, z_bias: f64, r_bias: f64) -> (ParamStore, GruCell) {
    let mut s = ParamStore::new();
    let gate = GruCell::new(&mut s, &mut Rng::new(seed), "gate", 4, 4).unwrap();
    let mut b = vec![0.0; 12];
    b[..4].fill(r_bias);
    b[4..8].fill(z_bias);
    *s.tensor_mut(gate.b_x) = Tensor::new(vec![12], b).unwrap();
    (s, gate)
}

#[test]
fn carry_gate_keeps_h() {
    let (s, gate) = gate_with_biases(9, 60.0, 0.0);
    let mut rng = Rng::new(9);
    let (h, qp) = (rng.normal_tensor(&[2, 4], 1.0), rng.normal_tensor(&[2, 4], 1.0));
    let mut g = Graph::new(&s);
    let (hv, qv) = (g.constant(h.clone()), g.constant(qp));
    let out = gated_update(&mut g, &gate, hv, qv).unwrap();
    for (a, b) in g.value(out).data().iter().zip(h.data()) {
        assert!((a - b).abs() <= 1e-6);
    }
}

#[test]
fn overwrite_gate_gives_candidate() {
    let (s, gate) = gate_with_biases(10, -60.0, 60.0);
    let mut rng = Rng::new(10);
    let (h, qp) = (rng.normal_tensor(&[2, 4], 1.0), rng.normal_tensor(&[2, 4], 1.0));
    let mut g = Graph::new(&s);
    let (hv, qv) = (g.constant(h.clone()), g.constant(qp.clone()));
    let out = gated_update(&mut g, &gate, hv, qv).unwrap();
    let xp = affine(&qp.to_rows(), s.tensor(gate.w_x), s.tensor(gate.b_x));
    let hp = affine(&h.to_rows(), s.tensor(gate.w_h), s.tensor(gate.b_h));
    for i in 0..2 {
        for j in 0..4 {
            let want = (xp[i][8 + j] + hp[i][8 + j]).tanh();
            assert!((g.value(out).row_slice(i)[j] - want).abs() <= 1e-12);
        }
    }
}

#[test]
fn gated_output_lies_between_candidate_and_state() {
    for seed in 0..20 {
        let mut s = ParamStore::new();
        let gate = GruCell::new(&mut s, &mut Rng::new(seed), "gate", 4, 4).unwrap();
        let mut rng = Rng::new(seed + 50);
        let (h, qp) = (rng.normal_tensor(&[3, 4], 1.0), rng.normal_tensor(&[3, 4], 1.0));
        let mut g = Graph::new(&s);
        let (hv, qv) = (g.constant(h.clone()), g.constant(qp.clone()));
        let out = gated_update(&mut g, &gate, hv, qv).unwrap();
        let xp = affine(&qp.to_rows(), s.tensor(gate.w_x), s.tensor(gate.b_x));
        let hp = affine(&h.to_rows(), s.tensor(gate.w_h), s.tensor(gate.b_h));
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        for i in 0..3 {
            for j in 0..4 {
                let r = sig(xp[i][j] + hp[i][j]);
                let cand = (xp[i][8 + j] + r * hp[i][8 + j]).tanh();
                let hv = h.row_slice(i)[j];
                let o = g.value(out).row_slice(i)[j];
                assert!(cand.min(hv) - 1e-12 <= o && o <= cand.max(hv) + 1e-12);
            }
        }
    }
}

fn run(s: &ParamStore, r: &Regressor, seed: u64, len: usize, classes: usize) -> (Vec<Tensor>, Vec<Tensor>) {
    let (q, c, n) = inputs(seed, len, r.dim, classes);
    let mut g = Graph::new(s);
    let p = Proposals {
        q: g.constant(q),
        c: g.constant(c),
        n: g.constant(n),
    };
    let (out, trace) = r.regress(&mut g, p).unwrap();
    let io = vec![
        g.value(p.q).clone(),
        g.value(p.c).clone(),
        g.value(p.n).clone(),
        g.value(out.q).clone(),
        g.value(out.c).clone(),
        g.value(out.n).clone(),
    ];
    let deltas = trace
        .iter()
        .map(|t| {
            let layer_out = g.value(t.c).clone();
            layer_out
        })
        .collect();
    (io, deltas)
}

#[test]
fn empty_stack_passes_through() {
    let (s, r) = regressor(11, 8, 2, 0, 3, AblationConfig::default());
    let (io, trace) = run(&s, &r, 11, 4, 3);
    assert!(trace.is_empty());
    assert_eq!(io[0], io[3]);
    assert_eq!(io[1], io[4]);
    assert_eq!(io[2], io[5]);
}

#[test]
fn zero_logits_mlp_keeps_logits_and_deltas_accumulate() {
    let (mut s, r) = regressor(12, 8, 2, 2, 3, AblationConfig::default());
    let last = r.layers[0].logits_mlp.layers.last().unwrap();
    *s.tensor_mut(last.weight) = Tensor::zeros(s.tensor(last.weight).shape());
    *s.tensor_mut(last.bias) = Tensor::zeros(s.tensor(last.bias).shape());
    let (q, c, n) = inputs(12, 4, 8, 3);
    let mut g = Graph::new(&s);
    let p = Proposals {
        q: g.constant(q),
        c: g.constant(c.clone()),
        n: g.constant(n),
    };
    let (_, trace) = r.regress(&mut g, p).unwrap();
    assert_eq!(g.value(trace[0].c), &c);
    let d2 = r.layers[1].logits_mlp.apply(&mut g, trace[1].q).unwrap();
    let sum = g.add(trace[0].c, d2);
    let got = g.value(trace[1].c).data().to_vec();
    for (a, b) in got.iter().zip(g.value(sum).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn logits_update_reaches_c_and_q_seed_61() {
    let (s, r) = regressor(61, 8, 2, 1, 3, AblationConfig::default());
    let (q, c, n) = inputs(61, 3, 8, 3);
    let mut g = Graph::new(&s);
    let (qv, cv) = (g.input(q), g.input(c));
    let p = Proposals {
        q: qv,
        c: cv,
        n: g.constant(n),
    };
    let (out, _) = r.regress(&mut g, p).unwrap();
    let w = g.constant(Rng::new(61).normal_tensor(&[3, 3], 1.0));
    let m = g.mul(out.c, w);
    let loss = g.sum_all(m);
    let grads = g.backward(loss);
    for v in [qv, cv] {
        assert!(grads.wrt(v).unwrap().data().iter().any(|&x| x != 0.0));
    }
}

#[test]
fn shapes_hold_across_three_layers() {
    let (s, r) = regressor(13, 64, 4, 3, 4, AblationConfig::default());
    let (q, c, n) = inputs(13, 5, 64, 4);
    let mut g = Graph::new(&s);
    let p = Proposals {
        q: g.constant(q),
        c: g.constant(c),
        n: g.constant(n),
    };
    let (_, trace) = r.regress(&mut g, p).unwrap();
    assert_eq!(trace.len(), 3);
    for t in &trace {
        assert_eq!(g.shape(t.q), &[5, 64]);
        assert_eq!(g.shape(t.c), &[5, 4]);
        assert_eq!(g.shape(t.n), &[5, 2]);
        assert_eq!(t.heads.len(), 4);
        for h in &t.heads {
            assert_eq!(g.shape(h.attn), &[5, 5]);
            assert_eq!(g.shape(h.o), &[5, 16]);
        }
    }
}

#[test]
fn locations_stay_finite_through_ten_layers() {
    for seed in 0..5 {
        let (s, r) = regressor(seed, 16, 4, 10, 3, AblationConfig::default());
        let (io, _) = run(&s, &r, seed, 8, 3);
        assert!(io[3].is_finite() && io[4].is_finite() && io[5].is_finite());
    }
}

#[test]
fn every_ablation_keeps_shapes() {
    for name in AblationConfig::SWITCHES {
        let mut ab = AblationConfig::default();
        ab.set(name, false).unwrap();
        let (s, r) = regressor(14, 8, 2, 2, 3, ab);
        let (io, trace) = run(&s, &r, 14, 4, 3);
        assert_eq!(trace.len(), 2);
        assert!(io[3..].iter().all(Tensor::is_finite));
        if name == "location_iteration" {
            assert_eq!(io[2], io[5]);
        }
        if name == "logits_iteration" {
            assert_eq!(io[1], io[4]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quadratic_form_dominates_eps(a in -5.0..5.0f64, b in -5.0..5.0f64, c in -5.0..5.0f64,
                                    x in -10.0..10.0f64, y in -10.0..10.0f64) {
        let eps = 1e-4;
        let q = -log_prior_value([0.0, 0.0], [a, b, c], [x, y], eps);
        prop_assert!(q >= eps * (x * x + y * y) * (1.0 - 1e-12));
    }

    #[test]
    fn attention_rows_are_distributions(seed in 0u64..500, len in 1usize..7) {
        let (s, r) = regressor(seed, 8, 2, 1, 3, AblationConfig::default());
        let (h, _, n) = inputs(seed, len, 8, 3);
        let mut g = Graph::new(&s);
        let hv = g.constant(h);
        let nv = g.constant(n);
        for head in r.sma_heads(&mut g, &r.layers[0], hv, nv).unwrap() {
            for row in g.value(head.attn).to_rows() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            }
        }
    }
}
