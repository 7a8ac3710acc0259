#![allow(dead_code)]

use nestor_core::config::{AblationConfig, EmbeddingConfig, ModelConfig};
use nestor_core::data::{EntitySpan, SentenceExample};
use nestor_core::model::{Model, ModelSpec};
use nestor_core::vocab::{IndexedSentence, Vocabularies};

pub const WORDS: [&str; 6] = ["ab", "c", "de", "fgh", "i", "jk"];

pub fn example(id: &str, len: usize, entities: Vec<EntitySpan>) -> SentenceExample {
    SentenceExample {
        id: id.into(),
        tokens: (0..len).map(|i| WORDS[i % WORDS.len()].to_string()).collect(),
        pos: Some((0..len).map(|i| ["N", "V"][i % 2].to_string()).collect()),
        entities,
    }
}

pub fn small_config(dim: usize, heads: usize, kernels: &[usize], layers: usize) -> ModelConfig {
    ModelConfig {
        dim,
        heads,
        kernel_sizes: kernels.to_vec(),
        regressor_layers: layers,
        mlp_hidden: 8,
        ..Default::default()
    }
}

/// A small model over a vocabulary holding `WORDS` and the types A, B.
pub fn toy_model(seed: u64, model: ModelConfig, ablation: AblationConfig) -> Model {
    let ex = example("vocab", WORDS.len(), vec![EntitySpan::new(0, 1, "A"), EntitySpan::new(1, 1, "B")]);
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
        ablation,
        contextual_dim: 0,
    };
    Model::new(spec, vocab, seed, None, None).unwrap()
}

pub fn toy_sentence(model: &Model, id: &str, len: usize, entities: Vec<EntitySpan>) -> IndexedSentence {
    model.vocab.index(&example(id, len, entities)).unwrap()
}
