//! Training: per-sentence assignment and loss, gradient accumulation across
//! a batch, clipping, AdamW under a warmup-cosine schedule, and evaluation.

pub mod assign;
pub mod checkpoint;
pub mod optim;

pub use assign::{assign, assign_costs, bipartite_loss, cost_matrix, hungarian, match_cost, Assignment, Target};
pub use optim::{lr_schedule, AdamW};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::PathBuf;

use crate::config::{Precision, TrainConfig};
use crate::data::EntitySpan;
use crate::error::{Error, Result};
use crate::metrics::{score, MetricsReport, Prf};
use crate::model::Model;
use crate::numerics::{Graph, ParamGrads, Rng};
use crate::parallel::par_map;
use crate::predictor::PredictedEntity;
use crate::vocab::IndexedSentence;

/// Loss and parameter gradients of one sentence.
pub fn sentence_grads(model: &Model, s: &IndexedSentence) -> Result<(f64, ParamGrads)> {
    let mut g = Graph::new(&model.store);
    let out = model.forward(&mut g, s)?;
    let none = model.none_id();
    if !g.value(out.head.p_c).is_finite() || !g.value(out.head.p_n).is_finite() {
        return Err(Error::NonFinite(format!("distributions for sentence {:?}", s.id)));
    }
    let dists = out.head.values(&g);
    let a = assign(&s.targets, &dists, none)?;
    let loss = bipartite_loss(&mut g, &out.head, &a, &s.targets, none);
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss for sentence {:?} is {value}", s.id)));
    }
    let grads = g.backward(loss).into_param_grads(model.store.len());
    Ok((value, grads))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub opt: AdamW,
    /// Updates applied so far.
    pub step: usize,
    pub total_steps: usize,
}

impl Trainer {
    /// Prepare `model` for training on `n_train` sentences. In `f32` mode the
    /// parameters are rounded to single precision here and after every update.
    pub fn new(model: &mut Model, cfg: &TrainConfig, n_train: usize) -> Result<Self> {
        cfg.validate()?;
        let total_steps = cfg.total_steps(n_train);
        if cfg.warmup_steps > total_steps {
            return Err(Error::config(
                "train.warmup_steps",
                format!("{} exceeds the {total_steps} total steps", cfg.warmup_steps),
            ));
        }
        if cfg.precision == Precision::F32 {
            model.store.round_to_f32();
        }
        Ok(Trainer {
            cfg: cfg.clone(),
            opt: AdamW::new(&model.store, cfg),
            step: 0,
            total_steps,
        })
    }

    /// Forward and backward every sentence of the batch, sum losses and
    /// gradients in batch order, clip, and apply one AdamW update.
    pub fn train_step(&mut self, model: &mut Model, batch: &[&IndexedSentence]) -> Result<StepStats> {
        let results = par_map(batch, |s| sentence_grads(model, s));
        let mut grads = ParamGrads::new(model.store.len());
        let mut loss = 0.0;
        for r in results {
            let (l, g) = r?;
            loss += l;
            grads.merge(&g);
        }
        let grad_norm = grads.clip_global_norm(self.cfg.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient norm {grad_norm} at step {} (batch starting with sentence {:?})",
                self.step + 1,
                batch.first().map(|s| s.id.as_str()).unwrap_or("")
            )));
        }
        self.step += 1;
        let lr = lr_schedule(self.step, self.cfg.warmup_steps, self.total_steps, self.cfg.lr, self.cfg.min_lr);
        self.opt.step(&mut model.store, &grads, lr);
        if self.cfg.precision == Precision::F32 {
            model.store.round_to_f32();
        }
        Ok(StepStats { loss, grad_norm, lr })
    }
}

/// Decoded entities of every sentence, in input order.
pub fn predict_all(model: &Model, sentences: &[IndexedSentence]) -> Result<Vec<Vec<PredictedEntity>>> {
    par_map(sentences, |s| model.predict(s)).into_iter().collect()
}

pub fn to_spans(model: &Model, preds: &[PredictedEntity]) -> Vec<EntitySpan> {
    preds
        .iter()
        .map(|p| EntitySpan::new(p.start, p.end, model.vocab.types.label(p.type_id)))
        .collect()
}

pub fn gold_spans(model: &Model, s: &IndexedSentence) -> Vec<EntitySpan> {
    s.targets
        .iter()
        .map(|&(a, b, t)| EntitySpan::new(a, b, model.vocab.types.label(t)))
        .collect()
}

/// Decode every sentence and score against its gold targets.
pub fn evaluate(model: &Model, sentences: &[IndexedSentence]) -> Result<MetricsReport> {
    let preds = predict_all(model, sentences)?;
    let pred: Vec<Vec<EntitySpan>> = preds.iter().map(|p| to_spans(model, p)).collect();
    let gold: Vec<Vec<EntitySpan>> = sentences.iter().map(|s| gold_spans(model, s)).collect();
    Ok(score(&pred, &gold))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    /// Sum of sentence losses over the epoch.
    pub loss: f64,
    pub mean_grad_norm: f64,
    pub lr: f64,
    pub dev: Option<Prf>,
    pub best: bool,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Receives `best.ckpt` and `metrics.jsonl` when set.
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_dev: Option<MetricsReport>,
    pub steps: usize,
}

/// Full training run. Sentences are reshuffled every epoch from the
/// configured seed. When a dev set is given, it is scored after every epoch
/// and the best epoch (highest F1, earliest on ties) is checkpointed.
pub fn train(
    model: &mut Model,
    train_set: &[IndexedSentence],
    dev_set: &[IndexedSentence],
    cfg: &TrainConfig,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut trainer = Trainer::new(model, cfg, train_set.len())?;
    let mut log_file = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
            let p = dir.join("metrics.jsonl");
            Some(std::fs::File::create(&p).map_err(|e| Error::file(&p, e))?)
        }
        None => None,
    };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rng = Rng::new(cfg.seed);
    let mut report = TrainReport {
        epochs: vec![],
        best_epoch: None,
        best_dev: None,
        steps: 0,
    };
    for epoch in 1..=cfg.epochs {
        order.shuffle(rng.inner());
        let mut loss = 0.0;
        let mut norm_sum = 0.0;
        let mut batches = 0;
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&IndexedSentence> = chunk.iter().map(|&i| &train_set[i]).collect();
            let stats = trainer.train_step(model, &batch)?;
            loss += stats.loss;
            norm_sum += stats.grad_norm;
            lr = stats.lr;
            batches += 1;
        }
        let dev = if dev_set.is_empty() {
            None
        } else {
            Some(evaluate(model, dev_set)?)
        };
        let best = match (&dev, &report.best_dev) {
            (Some(_), None) => true,
            (Some(d), Some(b)) => d.overall.f1 > b.overall.f1,
            _ => false,
        };
        if best {
            report.best_epoch = Some(epoch);
            report.best_dev = dev.clone();
            if let Some(dir) = &opts.out_dir {
                checkpoint::save(dir.join("best.ckpt"), model, trainer.step as u64, cfg.precision)?;
            }
        }
        let entry = EpochLog {
            epoch,
            step: trainer.step,
            loss,
            mean_grad_norm: norm_sum / batches as f64,
            lr,
            dev: dev.map(|d| d.overall),
            best,
        };
        if let Some(f) = &mut log_file {
            serde_json::to_writer(&mut *f, &entry)?;
            f.write_all(b"\n")?;
        }
        on_epoch(&entry);
        report.epochs.push(entry);
    }
    report.steps = trainer.step;
    Ok(report)
}
