use criterion::{criterion_group, criterion_main, Criterion};

use nestor_core::config::{AblationConfig, EmbeddingConfig, ModelConfig, TrainConfig};
use nestor_core::data::{synth_nested_corpus, SynthConfig};
use nestor_core::model::{Model, ModelSpec};
use nestor_core::parallel;
use nestor_core::trainer::{predict_all, Trainer};
use nestor_core::vocab::Vocabularies;

fn setup() -> (Model, Vec<nestor_core::vocab::IndexedSentence>) {
    let corpus = synth_nested_corpus(&SynthConfig::learning_check());
    let vocab = Vocabularies::build(&corpus.train, &[]);
    let sentences = vocab.index_all(&corpus.train).unwrap();
    let spec = ModelSpec {
        model: ModelConfig {
            heads: 4,
            ..Default::default()
        },
        embeddings: EmbeddingConfig {
            word_dim: 0,
            pos_dim: 0,
            ..Default::default()
        },
        ablation: AblationConfig::default(),
        contextual_dim: 0,
    };
    (Model::new(spec, vocab, 1, None, None).unwrap(), sentences)
}

fn bench(c: &mut Criterion) {
    parallel::configure_threads().unwrap();
    let (model, sentences) = setup();
    let batch: Vec<_> = sentences.iter().take(8).collect();
    let mut group = c.benchmark_group("sentences");
    group.sample_size(10);
    for (label, on) in [("parallel", true), ("sequential", false)] {
        parallel::set_enabled(on);
        group.bench_function(format!("predict_48/{label}"), |b| b.iter(|| predict_all(&model, &sentences).unwrap()));
        group.bench_function(format!("train_step_8/{label}"), |b| {
            b.iter_batched(
                || {
                    let mut m = model.clone();
                    let t = Trainer::new(&mut m, &TrainConfig::default(), sentences.len()).unwrap();
                    (m, t)
                },
                |(mut m, mut t)| t.train_step(&mut m, &batch).unwrap(),
                criterion::BatchSize::LargeInput,
            )
        });
    }
    parallel::set_enabled(true);
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
