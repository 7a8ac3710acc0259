//! Train on the synthetic nested corpus and print per-epoch progress.
//!
//! cargo run --release --example learning_check -- [epochs] [key=value ...]
//!
//! Keys: lr, wd, hidden, char_dim, char_out, word_dim, seed, batch, warmup.

use std::time::Instant;

use nestor_core::config::{AblationConfig, EmbeddingConfig, ModelConfig, TrainConfig};
use nestor_core::data::{synth_nested_corpus, SynthConfig};
use nestor_core::model::{Model, ModelSpec};
use nestor_core::trainer::{evaluate, gold_spans, predict_all, to_spans, train, TrainOptions};
use nestor_core::vocab::Vocabularies;

fn main() -> nestor_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(300, |s| s.parse().expect("epochs"));
    let mut model_cfg = ModelConfig {
        heads: 4,
        ..Default::default()
    };
    let mut emb = EmbeddingConfig {
        char_dim: 16,
        char_out: 16,
        word_dim: 0,
        ..Default::default()
    };
    let mut cfg = TrainConfig {
        epochs,
        ..Default::default()
    };
    let mut seed = 1;
    for kv in args {
        let (k, v) = kv.split_once('=').expect("key=value");
        match k {
            "lr" => cfg.lr = v.parse().unwrap(),
            "wd" => cfg.weight_decay = v.parse().unwrap(),
            "batch" => cfg.batch_size = v.parse().unwrap(),
            "warmup" => cfg.warmup_steps = v.parse().unwrap(),
            "hidden" => model_cfg.mlp_hidden = v.parse().unwrap(),
            "char_dim" => emb.char_dim = v.parse().unwrap(),
            "char_out" => emb.char_out = v.parse().unwrap(),
            "word_dim" => emb.word_dim = v.parse().unwrap(),
            "seed" => seed = v.parse().unwrap(),
            _ => panic!("unknown key {k}"),
        }
    }
    nestor_core::parallel::configure_threads().expect("threads");
    let corpus = synth_nested_corpus(&SynthConfig::learning_check());
    println!("{:?}", corpus.stats);
    let vocab = Vocabularies::build(&corpus.train, &[]);
    let train_set = vocab.index_all(&corpus.train)?;
    let dev_set = vocab.index_all(&corpus.dev)?;
    let spec = ModelSpec {
        model: model_cfg,
        embeddings: emb,
        ablation: AblationConfig::default(),
        contextual_dim: 0,
    };
    let mut model = Model::new(spec, vocab, seed, None, None)?;
    println!("{} parameters", model.store.num_values());
    let start = Instant::now();
    let report = train(&mut model, &train_set, &dev_set, &cfg, &TrainOptions::default(), |e| {
        println!(
            "epoch {:3} loss {:10.4} gnorm {:8.3} lr {:.2e} dev f1 {:.4} [{:.1}s]",
            e.epoch,
            e.loss,
            e.mean_grad_norm,
            e.lr,
            e.dev.map_or(0.0, |d| d.f1),
            start.elapsed().as_secs_f64()
        )
    })?;
    println!("best epoch {:?}", report.best_epoch);
    println!("train\n{}", evaluate(&model, &train_set)?);
    println!("dev\n{}", evaluate(&model, &dev_set)?);
    let preds = predict_all(&model, &dev_set)?;
    for (s, p) in dev_set.iter().zip(&preds) {
        let pred = to_spans(&model, p);
        let gold = gold_spans(&model, s);
        if pred != gold {
            let toks: Vec<&str> = s.words.iter().map(|&w| model.vocab.words.symbol(w)).collect();
            println!("{} {:?}\n  gold {:?}\n  pred {:?}", s.id, toks, gold, pred);
        }
    }
    Ok(())
}
