//! Sentence encoder: character, contextual, word and POS channels
//! concatenated per token, run through a BiGRU and projected to the model
//! width.

use serde::Deserialize;
use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use crate::config::{EmbeddingConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{mean_pool, BiGru, Graph, Linear, ParamId, ParamStore, Rng, Tensor, Var};
use crate::vocab::{IndexedSentence, Vocab, Vocabularies};

/// Static vectors read from a word2vec text file.
#[derive(Clone, Debug, PartialEq)]
pub struct WordVectors {
    pub dim: usize,
    pub words: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
}

impl WordVectors {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Parse the word2vec text format: a `<count> <dim>` header, then one
/// `<token> <v1> ... <vdim>` line per word.
pub fn parse_word2vec(text: &str, path: &Path) -> Result<WordVectors> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| err(1, "missing \"<count> <dim>\" header".into()))?;
    let head: Vec<&str> = header.split_whitespace().collect();
    let parse_usize = |s: &str| s.parse::<usize>().ok();
    let (count, dim) = match head.as_slice() {
        [c, d] => match (parse_usize(c), parse_usize(d)) {
            (Some(c), Some(d)) => (c, d),
            _ => return Err(err(1, format!("malformed header {header:?}"))),
        },
        _ => return Err(err(1, format!("malformed header {header:?}"))),
    };
    let mut words = Vec::with_capacity(count);
    let mut vectors = Vec::with_capacity(count);
    let mut seen = HashMap::new();
    for (i, line) in lines {
        let mut cols = line.split(' ').filter(|c| !c.is_empty());
        let word = cols.next().unwrap().to_string();
        let vec: Vec<f64> = cols
            .map(|c| c.parse::<f64>().map_err(|_| err(i + 1, format!("bad number {c:?}"))))
            .collect::<Result<_>>()?;
        if vec.len() != dim {
            return Err(err(i + 1, format!("expected {dim} values for {word:?}, found {}", vec.len())));
        }
        if vec.iter().any(|v| !v.is_finite()) {
            return Err(err(i + 1, format!("non-finite value in vector for {word:?}")));
        }
        if let Some(first) = seen.insert(word.clone(), i + 1) {
            return Err(err(i + 1, format!("duplicate word {word:?} (first on line {first})")));
        }
        words.push(word);
        vectors.push(vec);
    }
    if words.len() != count {
        return Err(err(1, format!("header announces {count} vectors, file has {}", words.len())));
    }
    Ok(WordVectors { dim, words, vectors })
}

pub fn load_word2vec(path: impl AsRef<Path>) -> Result<WordVectors> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_word2vec(&text, path)
}

/// Precomputed per-token contextual vectors keyed by sentence id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContextualStore {
    dim: usize,
    vectors: HashMap<String, Tensor>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ContextualLine {
    id: String,
    vectors: Vec<Vec<f64>>,
}

impl ContextualStore {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Tensor> {
        self.vectors.get(id)
    }

    /// Add one sentence's vectors (`[tokens, dim]`).
    pub fn insert(&mut self, id: impl Into<String>, vectors: Tensor) -> Result<()> {
        let id = id.into();
        if self.vectors.is_empty() {
            self.dim = vectors.cols();
        } else if vectors.cols() != self.dim {
            return Err(Error::Data(format!(
                "contextual vectors for {id:?} have width {}, expected {}",
                vectors.cols(),
                self.dim
            )));
        }
        if self.vectors.contains_key(&id) {
            return Err(Error::Data(format!("duplicate contextual entry for {id:?}")));
        }
        self.vectors.insert(id, vectors);
        Ok(())
    }
}

/// Parse contextual JSON lines: `{"id": string, "vectors": [[real, ...], ...]}`.
pub fn parse_contextual(text: &str, path: &Path) -> Result<ContextualStore> {
    let mut store = ContextualStore::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let rec: ContextualLine = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let rows = rec.vectors.len();
        if rows == 0 {
            return Err(err(format!("sentence {:?} has no vectors", rec.id)));
        }
        let dim = rec.vectors[0].len();
        if dim == 0 || rec.vectors.iter().any(|v| v.len() != dim) {
            return Err(err(format!("sentence {:?}: vectors must share one non-zero width", rec.id)));
        }
        let flat: Vec<f64> = rec.vectors.into_iter().flatten().collect();
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(err(format!("sentence {:?}: non-finite value", rec.id)));
        }
        store
            .insert(rec.id, Tensor::matrix(rows, dim, flat))
            .map_err(|e| err(e.to_string()))?;
    }
    Ok(store)
}

pub fn load_contextual(path: impl AsRef<Path>) -> Result<ContextualStore> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_contextual(&text, path)
}

/// Lookup tables and the optional contextual store. A channel whose width
/// is zero is disabled.
#[derive(Clone, Debug)]
pub struct EmbeddingStore {
    pub chars: Option<ParamId>,
    pub words: Option<ParamId>,
    pub pos: Option<ParamId>,
    pub contextual: Option<Arc<ContextualStore>>,
    pub char_dim: usize,
    pub char_out: usize,
    pub contextual_dim: usize,
    pub word_dim: usize,
    pub pos_dim: usize,
}

impl EmbeddingStore {
    /// Concatenated per-token width.
    pub fn width(&self) -> usize {
        self.char_out + self.contextual_dim + self.word_dim + self.pos_dim
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub emb: EmbeddingStore,
    pub char_gru: Option<BiGru>,
    pub gru: BiGru,
    pub proj: Linear,
    pub dim: usize,
    pub max_len: usize,
}

impl Encoder {
    /// `contextual_dim` fixes the contextual width even when no store is
    /// attached (e.g. a checkpoint loaded without its vectors).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        model: &ModelConfig,
        cfg: &EmbeddingConfig,
        vocab: &Vocabularies,
        word_vectors: Option<&WordVectors>,
        contextual_dim: usize,
        contextual: Option<Arc<ContextualStore>>,
    ) -> Result<Self> {
        let word_dim = word_vectors.map_or(cfg.word_dim, |w| w.dim);
        let char_out = if cfg.char_dim > 0 { cfg.char_out } else { 0 };
        let emb_width = char_out + contextual_dim + word_dim + cfg.pos_dim;
        if emb_width == 0 {
            return Err(Error::config("embeddings", "every input channel is disabled"));
        }
        if let Some(c) = &contextual {
            if c.dim() != contextual_dim && !c.is_empty() {
                return Err(Error::Data(format!(
                    "contextual vectors have width {}, model expects {contextual_dim}",
                    c.dim()
                )));
            }
        }
        let chars = (cfg.char_dim > 0)
            .then(|| store.add_normal("enc.char_table", &[vocab.chars.len(), cfg.char_dim], rng))
            .transpose()?;
        let char_gru = (cfg.char_dim > 0)
            .then(|| BiGru::new(store, rng, "enc.char_gru", cfg.char_dim, cfg.char_out / 2))
            .transpose()?;
        let words = if word_dim > 0 {
            let id = store.add_normal("enc.word_table", &[vocab.words.len(), word_dim], rng)?;
            if let Some(wv) = word_vectors {
                let t = store.tensor_mut(id);
                for (w, v) in wv.words.iter().zip(&wv.vectors) {
                    if vocab.words.contains(w) {
                        let r = vocab.words.id(w);
                        t.data_mut()[r * word_dim..(r + 1) * word_dim].copy_from_slice(v);
                    }
                }
            }
            Some(id)
        } else {
            None
        };
        let pos = (cfg.pos_dim > 0)
            .then(|| store.add_normal("enc.pos_table", &[vocab.pos.len(), cfg.pos_dim], rng))
            .transpose()?;
        let gru = BiGru::new(store, rng, "enc.gru", emb_width, model.dim / 2)?;
        let proj = Linear::new(store, rng, "enc.proj", model.dim, model.dim)?;
        Ok(Encoder {
            emb: EmbeddingStore {
                chars,
                words,
                pos,
                contextual,
                char_dim: cfg.char_dim,
                char_out,
                contextual_dim,
                word_dim,
                pos_dim: cfg.pos_dim,
            },
            char_gru,
            gru,
            proj,
            dim: model.dim,
            max_len: model.max_len,
        })
    }

    /// Pooled character feature `[1, char_out]` of one token. An empty token
    /// reads as a single unknown character.
    pub fn embed_chars(&self, g: &mut Graph, chars: &[usize]) -> Result<Var> {
        let (Some(table), Some(gru)) = (self.emb.chars, &self.char_gru) else {
            return Err(Error::config("embeddings.char_dim", "character channel is disabled"));
        };
        let ids = if chars.is_empty() {
            vec![Vocab::UNK_ID]
        } else {
            chars.to_vec()
        };
        let t = g.param(table);
        let x = g.gather_rows(t, ids);
        let h = gru.apply(g, x)?;
        mean_pool(g, h, None)
    }

    fn contextual_rows(&self, s: &IndexedSentence) -> Result<Option<Tensor>> {
        if self.emb.contextual_dim == 0 {
            return Ok(None);
        }
        let store = self
            .emb
            .contextual
            .as_ref()
            .ok_or_else(|| Error::Data("contextual channel is enabled but no vectors are loaded".into()))?;
        let t = store
            .get(&s.id)
            .ok_or_else(|| Error::Data(format!("no contextual vectors for sentence {:?}", s.id)))?;
        if t.rows() != s.len() {
            return Err(Error::Data(format!(
                "sentence {:?}: {} contextual vectors for {} tokens",
                s.id,
                t.rows(),
                s.len()
            )));
        }
        Ok(Some(t.clone()))
    }

    /// Embedding row `[1, width]` of token `i`: char, contextual, word, POS.
    pub fn embed_token(&self, g: &mut Graph, s: &IndexedSentence, i: usize) -> Result<Var> {
        let mut parts = Vec::with_capacity(4);
        if self.emb.chars.is_some() {
            parts.push(self.embed_chars(g, &s.chars[i])?);
        }
        if let Some(ctx) = self.contextual_rows(s)? {
            let row = Tensor::row(ctx.row_slice(i));
            parts.push(g.constant(row));
        }
        if let Some(w) = self.emb.words {
            let t = g.param(w);
            parts.push(g.gather_rows(t, vec![s.words[i]]));
        }
        if let Some(p) = self.emb.pos {
            let t = g.param(p);
            parts.push(g.gather_rows(t, vec![s.pos[i]]));
        }
        Ok(g.concat_cols(&parts))
    }

    /// All token embeddings stacked: `[L, width]`.
    pub fn embed_sentence(&self, g: &mut Graph, s: &IndexedSentence) -> Result<Var> {
        let mut parts = Vec::with_capacity(4);
        if self.emb.chars.is_some() {
            let rows = s
                .chars
                .iter()
                .map(|c| self.embed_chars(g, c))
                .collect::<Result<Vec<_>>>()?;
            parts.push(g.concat_rows(&rows));
        }
        if let Some(ctx) = self.contextual_rows(s)? {
            parts.push(g.constant(ctx));
        }
        if let Some(w) = self.emb.words {
            let t = g.param(w);
            parts.push(g.gather_rows(t, s.words.clone()));
        }
        if let Some(p) = self.emb.pos {
            let t = g.param(p);
            parts.push(g.gather_rows(t, s.pos.clone()));
        }
        Ok(g.concat_cols(&parts))
    }

    /// Hidden matrix `H: [L, dim]`.
    pub fn encode_sentence(&self, g: &mut Graph, s: &IndexedSentence) -> Result<Var> {
        if s.is_empty() {
            return Err(Error::Data(format!("sentence {:?} is empty", s.id)));
        }
        if s.len() > self.max_len {
            return Err(Error::Data(format!(
                "sentence {:?} has {} tokens, more than model.max_len = {}",
                s.id,
                s.len(),
                self.max_len
            )));
        }
        let x = self.embed_sentence(g, s)?;
        let h = self.gru.apply(g, x)?;
        self.proj.apply(g, h)
    }
}
