//! Model, embedding, ablation and training settings. Every struct rejects
//! unknown keys and fills documented defaults for missing ones.

use serde::{Deserialize, Serialize};
use std::path::PathBuf;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Width of the encoder output and of every query vector.
    pub dim: usize,
    pub heads: usize,
    pub kernel_sizes: Vec<usize>,
    pub regressor_layers: usize,
    /// Floor added to every spatial precision matrix.
    pub epsilon_psd: f64,
    /// Sentences longer than this are rejected, never truncated.
    pub max_len: usize,
    /// Hidden width of every small MLP (span scores, head weights, logits deltas).
    pub mlp_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            heads: 8,
            kernel_sizes: vec![2, 2],
            regressor_layers: 3,
            epsilon_psd: 1e-4,
            max_len: 128,
            mlp_hidden: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingConfig {
    /// word2vec text file; when set its dimension overrides `word_dim`.
    pub word_path: Option<PathBuf>,
    /// Contextual vectors (JSON lines). The channel is on iff this is set.
    pub contextual_path: Option<PathBuf>,
    /// Width of the per-character table; 0 disables the character channel.
    pub char_dim: usize,
    /// Width of the pooled character feature (the character BiGRU output).
    pub char_out: usize,
    /// 0 disables the word channel.
    pub word_dim: usize,
    /// 0 disables the POS channel.
    pub pos_dim: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            word_path: None,
            contextual_path: None,
            char_dim: 16,
            char_out: 16,
            word_dim: 50,
            pos_dim: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub backward_block: bool,
    pub spatial_modulation: bool,
    pub gated_update: bool,
    pub category_embedding: bool,
    pub location_iteration: bool,
    pub logits_iteration: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            backward_block: true,
            spatial_modulation: true,
            gated_update: true,
            category_embedding: true,
            location_iteration: true,
            logits_iteration: true,
        }
    }
}

impl AblationConfig {
    pub const SWITCHES: [&'static str; 6] = [
        "backward_block",
        "spatial_modulation",
        "gated_update",
        "category_embedding",
        "location_iteration",
        "logits_iteration",
    ];

    /// Set a switch by name.
    pub fn set(&mut self, name: &str, on: bool) -> Result<()> {
        let slot = match name {
            "backward_block" => &mut self.backward_block,
            "spatial_modulation" => &mut self.spatial_modulation,
            "gated_update" => &mut self.gated_update,
            "category_embedding" => &mut self.category_embedding,
            "location_iteration" => &mut self.location_iteration,
            "logits_iteration" => &mut self.logits_iteration,
            _ => return Err(Error::config(format!("ablation.{name}"), "unknown switch")),
        };
        *slot = on;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Peak learning rate.
    pub lr: f64,
    pub min_lr: f64,
    pub epochs: usize,
    pub clip_norm: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// `f32` keeps parameters rounded to single precision after every update
    /// so checkpoints reload bit-identically.
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            min_lr: 0.0,
            epochs: 300,
            clip_norm: 1.0,
            warmup_steps: 100,
            seed: 1,
            batch_size: 8,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            precision: Precision::F32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % 2 != 0 {
            return Err(Error::config("model.dim", format!("must be a positive even number, got {}", self.dim)));
        }
        if self.heads == 0 {
            return Err(Error::config("model.heads", "must be at least 1"));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::config(
                "model.heads",
                format!("model.dim {} is not divisible by {} heads", self.dim, self.heads),
            ));
        }
        if let Some(k) = self.kernel_sizes.iter().find(|&&k| k == 0) {
            return Err(Error::config("model.kernel_sizes", format!("kernel size {k} must be >= 1")));
        }
        if !(self.epsilon_psd > 0.0 && self.epsilon_psd.is_finite()) {
            return Err(Error::config("model.epsilon_psd", "must be positive and finite"));
        }
        if self.max_len == 0 {
            return Err(Error::config("model.max_len", "must be at least 1"));
        }
        if self.mlp_hidden == 0 {
            return Err(Error::config("model.mlp_hidden", "must be at least 1"));
        }
        Ok(())
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.char_dim > 0 && (self.char_out == 0 || self.char_out % 2 != 0) {
            return Err(Error::config("embeddings.char_out", "must be a positive even number when characters are on"));
        }
        Ok(())
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return Err(Error::config("train.min_lr", "must lie in [0, train.lr]"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("train.clip_norm", "must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("train.beta1", "betas must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("train.adam_eps", "must be > 0"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("train.weight_decay", "must be >= 0"));
        }
        Ok(())
    }

    /// Number of optimizer steps for a training set of `n` sentences.
    pub fn total_steps(&self, n: usize) -> usize {
        self.epochs * n.div_ceil(self.batch_size).max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        EmbeddingConfig::default().validate().unwrap();
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn heads_must_divide_dim() {
        let cfg = ModelConfig {
            dim: 10,
            heads: 4,
            ..Default::default()
        };
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("model.heads"));
    }

    #[test]
    fn ablation_set_by_name() {
        let mut a = AblationConfig::default();
        for name in AblationConfig::SWITCHES {
            a.set(name, false).unwrap();
        }
        assert_eq!(
            a,
            AblationConfig {
                backward_block: false,
                spatial_modulation: false,
                gated_update: false,
                category_embedding: false,
                location_iteration: false,
                logits_iteration: false,
            }
        );
        assert!(a.set("dropout", true).is_err());
    }
}
