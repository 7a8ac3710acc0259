//! Deterministic synthetic corpus with nested entities.
//!
//! Every type owns three small lexicons: span-initial words, continuation
//! words and suffix words. A flat entity is an initial word followed by up to
//! two continuation words. A nested construct is an inner entity followed by
//! a suffix word of the outer type, so the outer span strictly contains the
//! inner one. Entities are always separated by filler words, which makes
//! every boundary and type decidable from the surface tokens.

use serde::{Deserialize, Serialize};

use super::{EntitySpan, SentenceExample};
use crate::numerics::Rng;

const TYPE_NAMES: [&str; 6] = ["PER", "ORG", "LOC", "GENE", "CELL", "DRUG"];
const INITIAL_WORDS: usize = 6;
const CONTINUATION_WORDS: usize = 4;
const SUFFIX_WORDS: usize = 3;
const FILLER_WORDS: usize = 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_sentences: usize,
    pub max_len: usize,
    pub n_types: usize,
    /// Target fraction of entities that strictly contain another entity.
    pub nest_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig::learning_check()
    }
}

impl SynthConfig {
    /// The corpus used by the learning check.
    pub fn learning_check() -> Self {
        SynthConfig {
            seed: 1,
            n_sentences: 64,
            max_len: 12,
            n_types: 3,
            nest_prob: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub sentences: usize,
    pub tokens: usize,
    pub entities: usize,
    /// Entities that strictly contain at least one other entity.
    pub nested_entities: usize,
    pub nesting_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub train: Vec<SentenceExample>,
    pub dev: Vec<SentenceExample>,
    pub stats: CorpusStats,
}

pub fn type_name(t: usize) -> String {
    TYPE_NAMES.get(t).map_or_else(|| format!("T{t}"), |s| s.to_string())
}

fn prefix(t: usize) -> String {
    type_name(t).to_lowercase()
}

/// Containment scan over every sentence.
pub fn nesting_stats(examples: &[SentenceExample]) -> CorpusStats {
    let mut entities = 0;
    let mut nested = 0;
    for ex in examples {
        entities += ex.entities.len();
        nested += ex
            .entities
            .iter()
            .filter(|a| ex.entities.iter().any(|b| a.contains(b)))
            .count();
    }
    CorpusStats {
        sentences: examples.len(),
        tokens: examples.iter().map(|e| e.tokens.len()).sum(),
        entities,
        nested_entities: nested,
        nesting_rate: if entities == 0 {
            0.0
        } else {
            nested as f64 / entities as f64
        },
    }
}

struct Slot {
    tokens: Vec<String>,
    entities: Vec<EntitySpan>,
}

fn flat_entity(rng: &mut Rng, t: usize, max_len: usize) -> Slot {
    let p = prefix(t);
    let extra = rng.below(3).min(max_len.saturating_sub(1));
    let mut tokens = vec![format!("{p}{}", rng.below(INITIAL_WORDS))];
    for _ in 0..extra {
        tokens.push(format!("{p}x{}", rng.below(CONTINUATION_WORDS)));
    }
    let n = tokens.len();
    Slot {
        tokens,
        entities: vec![EntitySpan::new(0, n - 1, type_name(t))],
    }
}

fn nested_entity(rng: &mut Rng, outer: usize, n_types: usize) -> Slot {
    let inner = rng.below(n_types);
    let mut slot = flat_entity(rng, inner, 2);
    slot.tokens.push(format!("{}s{}", prefix(outer), rng.below(SUFFIX_WORDS)));
    let n = slot.tokens.len();
    slot.entities.push(EntitySpan::new(0, n - 1, type_name(outer)));
    slot
}

fn filler(rng: &mut Rng) -> String {
    format!("w{}", rng.below(FILLER_WORDS))
}

fn sentence(rng: &mut Rng, id: usize, max_len: usize, n_types: usize, nested_slot_prob: f64) -> SentenceExample {
    let target = if max_len <= 4 { max_len } else { 4 + rng.below(max_len - 3) };
    let mut tokens: Vec<String> = Vec::with_capacity(target);
    let mut entities = Vec::new();
    for _ in 0..rng.below(2).min(target.saturating_sub(1)) {
        tokens.push(filler(rng));
    }
    loop {
        let t = rng.below(n_types);
        let slot = if rng.bernoulli(nested_slot_prob) {
            nested_entity(rng, t, n_types)
        } else {
            flat_entity(rng, t, target - tokens.len().min(target))
        };
        if tokens.len() + slot.tokens.len() > target {
            break;
        }
        let off = tokens.len();
        tokens.extend(slot.tokens);
        entities.extend(
            slot.entities
                .into_iter()
                .map(|e| EntitySpan::new(e.start + off, e.end + off, e.label)),
        );
        for _ in 0..1 + rng.below(2) {
            if tokens.len() < target {
                tokens.push(filler(rng));
            }
        }
        if tokens.len() >= target {
            break;
        }
    }
    while tokens.len() < target.max(1) {
        tokens.push(filler(rng));
    }
    entities.sort();
    SentenceExample {
        id: format!("s{id:04}"),
        tokens,
        pos: None,
        entities,
    }
}

/// Generate `n_sentences` sentences and split them 75/25 into train/dev.
///
/// A slot is nested with probability `q = p / (1 - p)`; a nested slot holds
/// two entities, so the expected share of containing entities is
/// `q / (1 + q) = p`. `nest_prob` is capped at 0.5.
pub fn synth_nested_corpus(cfg: &SynthConfig) -> SynthCorpus {
    let mut rng = Rng::new(cfg.seed);
    let n_types = cfg.n_types.max(1);
    let p = cfg.nest_prob.clamp(0.0, 0.5);
    let nested_slot_prob = p / (1.0 - p);
    let all: Vec<SentenceExample> = (0..cfg.n_sentences)
        .map(|i| sentence(&mut rng, i, cfg.max_len.max(1), n_types, nested_slot_prob))
        .collect();
    let stats = nesting_stats(&all);
    let n_train = (cfg.n_sentences * 3).div_ceil(4).min(cfg.n_sentences);
    let mut all = all;
    let dev = all.split_off(n_train);
    SynthCorpus {
        train: all,
        dev,
        stats,
    }
}
