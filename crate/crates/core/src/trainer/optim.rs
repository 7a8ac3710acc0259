//! Warmup-cosine learning-rate schedule and AdamW.

use crate::config::TrainConfig;
use crate::numerics::{ParamGrads, ParamStore};

/// Linear ramp from 0 to `peak` over `warmup` steps, then cosine decay to
/// `floor` at `total`.
pub fn lr_schedule(step: usize, warmup: usize, total: usize, peak: f64, floor: f64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return if step >= total && total > 0 && warmup == 0 { floor } else { peak };
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adaptive moments with decoupled weight decay. Decay applies to
/// parameters with more than one row; biases and norm gains (single rows)
/// are exempt.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect();
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. Parameters without a gradient are treated as having a
    /// zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let k = id.index();
            let decay = if p.tensor.rows() > 1 {
                lr * self.weight_decay
            } else {
                0.0
            };
            let g = grads.get(id).map(|t| t.data());
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *w -= decay * *w;
                *w -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
