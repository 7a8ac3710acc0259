//! Run configuration: one TOML document with `model`, `embeddings`, `train`,
//! `data` and `ablation` tables, plus `--set key=value` overrides.

use std::path::{Path, PathBuf};

use nestor_core::config::{AblationConfig, EmbeddingConfig, ModelConfig, TrainConfig};
use nestor_core::data::SynthConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    #[default]
    Jsonl,
    Conll,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub format: DataFormat,
    /// Generate train and dev splits instead of reading files.
    pub synthetic: Option<SynthConfig>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub embeddings: EmbeddingConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub ablation: AblationConfig,
}

/// Parse the right-hand side of an override as a TOML value; anything that
/// does not parse is taken as a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::config(spec, "override must look like key=value"))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(key, "empty key segment"));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let slot = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = slot
            .as_table_mut()
            .ok_or_else(|| CliError::config(key, format!("`{p}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    log::info!("override {key} = {}", raw.trim());
    Ok(())
}

impl RunConfig {
    /// Read `path` (or start from defaults), apply overrides in order and
    /// validate. Unknown keys are rejected with their full path.
    pub fn resolve(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self, CliError> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::config("--config", format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::config("--config", format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        if let Some(s) = seed {
            apply_override(&mut doc, &format!("train.seed={s}"))?;
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(doc)).map_err(|e| {
            let key = e.path().to_string();
            CliError::config(key, e.into_inner().to_string())
        })?;
        cfg.model.validate()?;
        cfg.embeddings.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
