use std::sync::Arc;

use nestor_core::config::{AblationConfig, EmbeddingConfig, ModelConfig};
use nestor_core::data::{EntitySpan, SentenceExample};
use nestor_core::encoder::{load_contextual, load_word2vec, ContextualStore};
use nestor_core::model::{Model, ModelSpec};
use nestor_core::numerics::{GradCheck, Graph, Rng, Tensor};
use nestor_core::vocab::{Vocab, Vocabularies};
use nestor_core::Error;

fn example(id: &str, tokens: &[&str]) -> SentenceExample {
    SentenceExample {
        id: id.into(),
        tokens: tokens.iter().map(|t| t.to_string()).collect(),
        pos: Some(tokens.iter().map(|t| if t.len() > 2 { "N" } else { "V" }.to_string()).collect()),
        entities: vec![EntitySpan::new(0, 0, "A")],
    }
}

fn corpus() -> Vec<SentenceExample> {
    vec![
        example("a", &["the", "cat", "sat"]),
        example("b", &["a", "dog", "ran", "off"]),
    ]
}

fn contextual(dim: usize, exs: &[SentenceExample]) -> Arc<ContextualStore> {
    let mut rng = Rng::new(99);
    let mut s = ContextualStore::default();
    for ex in exs {
        s.insert(ex.id.clone(), rng.normal_tensor(&[ex.tokens.len(), dim], 1.0)).unwrap();
    }
    Arc::new(s)
}

fn build(emb: EmbeddingConfig, ctx: Option<Arc<ContextualStore>>, seed: u64) -> Model {
    let exs = corpus();
    let spec = ModelSpec {
        model: ModelConfig {
            dim: 8,
            heads: 2,
            kernel_sizes: vec![2],
            regressor_layers: 1,
            mlp_hidden: 8,
            ..Default::default()
        },
        embeddings: emb,
        ablation: AblationConfig::default(),
        contextual_dim: 0,
    };
    Model::new(spec, Vocabularies::build(&exs, &[]), seed, None, ctx).unwrap()
}

fn full_channels() -> EmbeddingConfig {
    EmbeddingConfig {
        char_dim: 12,
        char_out: 16,
        word_dim: 50,
        pos_dim: 8,
        ..Default::default()
    }
}

#[test]
fn token_width_is_sum_of_channels() {
    let exs = corpus();
    let m = build(full_channels(), Some(contextual(32, &exs)), 1);
    let s = m.vocab.index(&exs[0]).unwrap();
    let mut g = Graph::new(&m.store);
    let row = m.encoder.embed_token(&mut g, &s, 1).unwrap();
    assert_eq!(g.shape(row), &[1, 106]);
    assert_eq!(m.encoder.emb.width(), 106);
    let all = m.encoder.embed_sentence(&mut g, &s).unwrap();
    assert_eq!(g.shape(all), &[3, 106]);
}

#[test]
fn disabling_pos_drops_exactly_its_width() {
    let exs = corpus();
    let m = build(
        EmbeddingConfig {
            pos_dim: 0,
            ..full_channels()
        },
        Some(contextual(32, &exs)),
        1,
    );
    let s = m.vocab.index(&exs[0]).unwrap();
    let mut g = Graph::new(&m.store);
    let row = m.encoder.embed_token(&mut g, &s, 0).unwrap();
    assert_eq!(g.shape(row), &[1, 98]);
    let h = m.encoder.encode_sentence(&mut g, &s).unwrap();
    assert_eq!(g.shape(h), &[3, 8]);
}

#[test]
fn every_single_channel_still_encodes() {
    let exs = corpus();
    let configs = [
        EmbeddingConfig {
            char_dim: 4,
            char_out: 4,
            word_dim: 0,
            pos_dim: 0,
            ..Default::default()
        },
        EmbeddingConfig {
            char_dim: 0,
            word_dim: 5,
            pos_dim: 0,
            ..Default::default()
        },
        EmbeddingConfig {
            char_dim: 0,
            word_dim: 0,
            pos_dim: 3,
            ..Default::default()
        },
    ];
    for emb in configs {
        let m = build(emb, None, 2);
        let s = m.vocab.index(&exs[1]).unwrap();
        let mut g = Graph::new(&m.store);
        let h = m.encoder.encode_sentence(&mut g, &s).unwrap();
        assert_eq!(g.shape(h), &[4, 8]);
        assert!(g.value(h).is_finite());
    }
}

#[test]
fn unknown_word_reads_the_unknown_row() {
    let m = build(
        EmbeddingConfig {
            char_dim: 0,
            word_dim: 5,
            pos_dim: 0,
            ..Default::default()
        },
        None,
        3,
    );
    let s = m.vocab.index(&example("u", &["zebra"])).unwrap();
    assert_eq!(s.words, vec![Vocab::UNK_ID]);
    let mut g = Graph::new(&m.store);
    let row = m.encoder.embed_token(&mut g, &s, 0).unwrap();
    let table = m.store.tensor(m.encoder.emb.words.unwrap());
    assert_eq!(g.value(row).data(), table.row_slice(Vocab::UNK_ID));
}

#[test]
fn single_character_pools_to_its_own_state() {
    let m = build(full_channels(), None, 4);
    let enc = &m.encoder;
    let id = m.vocab.chars.id("a");
    let mut g = Graph::new(&m.store);
    let pooled = enc.embed_chars(&mut g, &[id]).unwrap();
    let t = g.param(enc.emb.chars.unwrap());
    let x = g.gather_rows(t, vec![id]);
    let states = enc.char_gru.as_ref().unwrap().apply(&mut g, x).unwrap();
    assert_eq!(g.value(pooled).data(), g.value(states).data());
}

#[test]
fn same_characters_same_vector() {
    let m = build(full_channels(), None, 5);
    let ids: Vec<usize> = "cat".chars().map(|c| m.vocab.chars.id(&c.to_string())).collect();
    let mut g = Graph::new(&m.store);
    let a = m.encoder.embed_chars(&mut g, &ids).unwrap();
    let b = m.encoder.embed_chars(&mut g, &ids).unwrap();
    assert_eq!(g.value(a).data(), g.value(b).data());
    let e = m.encoder.embed_chars(&mut g, &[]).unwrap();
    let u = m.encoder.embed_chars(&mut g, &[Vocab::UNK_ID]).unwrap();
    assert_eq!(g.value(e).data(), g.value(u).data());
}

#[test]
fn char_table_receives_gradient_seed_37() {
    let m = build(full_channels(), None, 37);
    let s = m.vocab.index(&corpus()[0]).unwrap();
    let mut g = Graph::new(&m.store);
    let h = m.encoder.encode_sentence(&mut g, &s).unwrap();
    let w = g.constant(Rng::new(37).normal_tensor(&[3, 8], 1.0));
    let p = g.mul(h, w);
    let loss = g.sum_all(p);
    let grads = g.backward(loss).into_param_grads(m.store.len());
    let table = grads.get(m.encoder.emb.chars.unwrap()).expect("char table gradient");
    assert!(table.data().iter().any(|&v| v != 0.0));
}

#[test]
fn encode_gradient_seed_41() {
    let m = build(
        EmbeddingConfig {
            char_dim: 4,
            char_out: 4,
            word_dim: 6,
            pos_dim: 2,
            ..Default::default()
        },
        None,
        41,
    );
    let s = m.vocab.index(&corpus()[0]).unwrap();
    let ids: Vec<_> = m
        .store
        .iter()
        .filter(|(_, p)| p.name.starts_with("enc."))
        .map(|(id, _)| id)
        .collect();
    let (err, at) = GradCheck::default()
        .with_seed(41)
        .params(&m.store, &ids, |g| {
            let h = m.encoder.encode_sentence(g, &s)?;
            Ok(g.sum_all(h))
        })
        .unwrap();
    assert!(err <= 1e-4, "{err} at {at}");
}

#[test]
fn one_token_sentence_has_one_row() {
    let m = build(full_channels(), None, 6);
    let s = m.vocab.index(&example("one", &["cat"])).unwrap();
    let mut g = Graph::new(&m.store);
    let h = m.encoder.encode_sentence(&mut g, &s).unwrap();
    assert_eq!(g.shape(h), &[1, 8]);
}

#[test]
fn empty_and_overlong_sentences_are_errors() {
    let m = build(full_channels(), None, 7);
    let mut s = m.vocab.index(&corpus()[0]).unwrap();
    s.words.clear();
    s.chars.clear();
    s.pos.clear();
    let mut g = Graph::new(&m.store);
    assert!(matches!(m.encoder.encode_sentence(&mut g, &s), Err(Error::Data(_))));

    let long: Vec<String> = (0..m.encoder.max_len + 1).map(|i| format!("t{i}")).collect();
    let refs: Vec<&str> = long.iter().map(String::as_str).collect();
    let s = m.vocab.index(&example("long", &refs)).unwrap();
    let err = m.encoder.encode_sentence(&mut g, &s).unwrap_err();
    assert!(err.to_string().contains("max_len"), "{err}");
}

#[test]
fn missing_contextual_entry_names_the_sentence() {
    let exs = corpus();
    let m = build(full_channels(), Some(contextual(4, &exs[..1])), 8);
    let s = m.vocab.index(&exs[1]).unwrap();
    let mut g = Graph::new(&m.store);
    let err = m.encoder.encode_sentence(&mut g, &s).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
    assert!(err.to_string().contains("\"b\""), "{err}");
}

#[test]
fn contextual_row_count_must_match_tokens() {
    let exs = corpus();
    let mut store = ContextualStore::default();
    store.insert("a", Tensor::zeros(&[2, 4])).unwrap();
    let m = build(full_channels(), Some(Arc::new(store)), 9);
    let s = m.vocab.index(&exs[0]).unwrap();
    let mut g = Graph::new(&m.store);
    assert!(matches!(m.encoder.encode_sentence(&mut g, &s), Err(Error::Data(_))));
}

#[test]
fn sentences_are_encoded_independently() {
    let m = build(full_channels(), None, 10);
    let [a, b] = [0, 1].map(|i| m.vocab.index(&corpus()[i]).unwrap());
    let run = |first: &nestor_core::vocab::IndexedSentence, second: &nestor_core::vocab::IndexedSentence| {
        let mut g = Graph::new(&m.store);
        let x = m.encoder.encode_sentence(&mut g, first).unwrap();
        let y = m.encoder.encode_sentence(&mut g, second).unwrap();
        (g.value(x).clone(), g.value(y).clone())
    };
    let (ha, hb) = run(&a, &b);
    let (hb2, ha2) = run(&b, &a);
    assert_eq!(ha, ha2);
    assert_eq!(hb, hb2);
}

#[test]
fn word_vectors_seed_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vec.txt");
    std::fs::write(&path, "2 3\ncat 1 2 3\nemu 4 5 6\n").unwrap();
    let wv = load_word2vec(&path).unwrap();
    let exs = corpus();
    let extra = wv.words.clone();
    let vocab = Vocabularies::build(&exs, &extra);
    let spec = ModelSpec {
        model: ModelConfig {
            dim: 8,
            heads: 2,
            ..Default::default()
        },
        embeddings: EmbeddingConfig {
            word_dim: 50,
            ..Default::default()
        },
        ablation: AblationConfig::default(),
        contextual_dim: 0,
    };
    let m = Model::new(spec, vocab, 1, Some(&wv), None).unwrap();
    assert_eq!(m.spec.embeddings.word_dim, 3);
    let table = m.store.tensor(m.encoder.emb.words.unwrap());
    assert_eq!(table.row_slice(m.vocab.words.id("cat")), &[1.0, 2.0, 3.0]);
    assert_eq!(table.row_slice(m.vocab.words.id("emu")), &[4.0, 5.0, 6.0]);
}

#[test]
fn contextual_file_loads() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ctx.jsonl");
    std::fs::write(
        &path,
        "{\"id\": \"a\", \"vectors\": [[1, 2], [3, 4], [5, 6]]}\n{\"id\": \"b\", \"vectors\": [[0, 0]]}\n",
    )
    .unwrap();
    let s = load_contextual(&path).unwrap();
    assert_eq!(s.dim(), 2);
    assert_eq!(s.get("a").unwrap().row_slice(2), &[5.0, 6.0]);
    assert!(matches!(load_contextual(dir.path().join("missing")), Err(Error::File { .. })));
}
