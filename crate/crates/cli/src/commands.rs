use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nestor_core::data::{load_conll_bio, load_jsonl_spans, save_jsonl_spans, synth_nested_corpus, SentenceExample};
use nestor_core::encoder::{load_contextual, load_word2vec, ContextualStore};
use nestor_core::gradsuite::run_suite;
use nestor_core::model::{Model, ModelSpec};
use nestor_core::trainer::{checkpoint, evaluate, predict_all, train, TrainOptions};
use nestor_core::vocab::Vocabularies;
use serde::Serialize;

use crate::config::{DataFormat, RunConfig};
use crate::error::{CliError, EXIT_NUMERIC};

fn load_examples(path: &Path, format: DataFormat) -> Result<Vec<SentenceExample>, CliError> {
    match format {
        DataFormat::Jsonl => Ok(load_jsonl_spans(path)?),
        DataFormat::Conll => {
            let load = load_conll_bio(path)?;
            if load.warnings > 0 {
                log::warn!("{}: {} stray I- tags read as B-", path.display(), load.warnings);
            }
            Ok(load.examples)
        }
    }
}

fn contextual(cfg: &RunConfig) -> Result<Option<Arc<ContextualStore>>, CliError> {
    match &cfg.embeddings.contextual_path {
        Some(p) => Ok(Some(Arc::new(load_contextual(p)?))),
        None => Ok(None),
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::from(nestor_core::Error::file(path, e)))
}

pub fn train_cmd(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::from(nestor_core::Error::file(out, e)))?;
    let (train_ex, dev_ex) = match (&cfg.data.synthetic, &cfg.data.train) {
        (Some(s), _) => {
            let corpus = synth_nested_corpus(s);
            log::info!(
                "synthetic corpus: {} train, {} dev, nesting rate {:.3}",
                corpus.train.len(),
                corpus.dev.len(),
                corpus.stats.nesting_rate
            );
            save_jsonl_spans(out.join("train.jsonl"), &corpus.train)?;
            save_jsonl_spans(out.join("dev.jsonl"), &corpus.dev)?;
            (corpus.train, corpus.dev)
        }
        (None, Some(path)) => {
            let train_ex = load_examples(path, cfg.data.format)?;
            let dev_ex = match &cfg.data.dev {
                Some(p) => load_examples(p, cfg.data.format)?,
                None => vec![],
            };
            (train_ex, dev_ex)
        }
        (None, None) => return Err(CliError::config("data.train", "a training file (or data.synthetic) is required")),
    };
    let word_vectors = match &cfg.embeddings.word_path {
        Some(p) => Some(load_word2vec(p)?),
        None => None,
    };
    let extra: Vec<String> = word_vectors.as_ref().map(|w| w.words.clone()).unwrap_or_default();
    let vocab = Vocabularies::build(&train_ex, &extra);
    vocab.check_labels(&dev_ex)?;
    let train_set = vocab.index_all(&train_ex)?;
    let dev_set = vocab.index_all(&dev_ex)?;
    let spec = ModelSpec {
        model: cfg.model.clone(),
        embeddings: cfg.embeddings.clone(),
        ablation: cfg.ablation,
        contextual_dim: 0,
    };
    let mut model = Model::new(spec, vocab, cfg.train.seed, word_vectors.as_ref(), contextual(cfg)?)?;
    write_file(&out.join("config.toml"), &cfg.to_toml())?;
    log::info!(
        "{} parameters, {} train / {} dev sentences",
        model.store.num_values(),
        train_set.len(),
        dev_set.len()
    );
    let opts = TrainOptions {
        out_dir: Some(out.to_path_buf()),
    };
    let report = train(&mut model, &train_set, &dev_set, &cfg.train, &opts, |e| {
        log::info!(
            "epoch {} loss {:.4} grad norm {:.3} lr {:.3e}{}{}",
            e.epoch,
            e.loss,
            e.mean_grad_norm,
            e.lr,
            e.dev.map(|d| format!(" dev f1 {:.4}", d.f1)).unwrap_or_default(),
            if e.best { " *" } else { "" }
        )
    })?;
    checkpoint::save(out.join("last.ckpt"), &model, report.steps as u64, cfg.train.precision)?;
    match (report.best_epoch, &report.best_dev) {
        (Some(epoch), Some(dev)) => {
            println!("best epoch {epoch}, dev f1 {:.4}", dev.overall.f1);
            println!("{dev}");
        }
        _ => println!("trained {} epochs ({} steps); no dev set", report.epochs.len(), report.steps),
    }
    Ok(())
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<Model, CliError> {
    let (mut model, _) = checkpoint::load(path)?;
    if model.spec.contextual_dim > 0 {
        match contextual(cfg)? {
            Some(store) => model.set_contextual(Some(store))?,
            None => {
                return Err(CliError::config(
                    "embeddings.contextual_path",
                    "the checkpoint uses contextual vectors; point this at the vector file",
                ))
            }
        }
    }
    Ok(model)
}

pub fn eval_cmd(cfg: &RunConfig, ckpt: &Path, data: Option<&Path>, out: Option<&Path>) -> Result<(), CliError> {
    let data: PathBuf = match data.map(Path::to_path_buf).or_else(|| cfg.data.test.clone()).or_else(|| cfg.data.dev.clone()) {
        Some(p) => p,
        None => return Err(CliError::config("data.test", "no evaluation file given (--data, data.test or data.dev)")),
    };
    let model = load_model(cfg, ckpt)?;
    let examples = load_examples(&data, cfg.data.format)?;
    model.vocab.check_labels(&examples)?;
    let sentences = model.vocab.index_all(&examples)?;
    let report = evaluate(&model, &sentences)?;
    print!("{report}");
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => ckpt.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    std::fs::create_dir_all(&dir).map_err(|e| CliError::from(nestor_core::Error::file(&dir, e)))?;
    let json = serde_json::to_string_pretty(&report).map_err(nestor_core::Error::from)?;
    write_file(&dir.join("eval.json"), &(json + "\n"))?;
    Ok(())
}

#[derive(Serialize)]
struct OutEntity<'a> {
    start: usize,
    end: usize,
    #[serde(rename = "type")]
    label: &'a str,
    score: f64,
}

#[derive(Serialize)]
struct OutLine<'a> {
    id: &'a str,
    entities: Vec<OutEntity<'a>>,
}

pub fn predict_cmd(cfg: &RunConfig, ckpt: &Path, input: &Path, output: Option<&Path>) -> Result<(), CliError> {
    let model = load_model(cfg, ckpt)?;
    let examples = load_jsonl_spans(input)?;
    model.vocab.check_labels(&examples)?;
    let mut sentences = model.vocab.index_all(&examples)?;
    sentences.sort_by(|a, b| a.id.cmp(&b.id));
    let preds = predict_all(&model, &sentences)?;
    let mut text = String::new();
    for (s, p) in sentences.iter().zip(&preds) {
        let mut entities: Vec<OutEntity> = p
            .iter()
            .map(|e| OutEntity {
                start: e.start,
                end: e.end,
                label: model.vocab.types.label(e.type_id),
                score: e.score,
            })
            .collect();
        entities.sort_by(|a, b| (a.start, a.end, a.label).cmp(&(b.start, b.end, b.label)));
        let line = OutLine { id: &s.id, entities };
        text.push_str(&serde_json::to_string(&line).map_err(nestor_core::Error::from)?);
        text.push('\n');
    }
    match output {
        Some(p) => write_file(p, &text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

pub fn gradcheck_cmd(fault: Option<&str>) -> Result<(), CliError> {
    let report = run_suite(fault)?;
    print!("{report}");
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().iter().map(|c| c.name).collect();
        Err(CliError::new(EXIT_NUMERIC, format!("gradient check failed: {}", names.join(", "))))
    }
}
