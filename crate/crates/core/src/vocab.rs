//! Symbol tables for words, characters, POS tags and entity types.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};

use crate::data::SentenceExample;
use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const NONE_LABEL: &str = "None";

/// Dense id map with the unknown symbol at id 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    items: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(items: Vec<String>) -> Self {
        let index = items.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Vocab { items, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.items
    }
}

impl Vocab {
    pub const UNK_ID: usize = 0;

    pub fn build<I: IntoIterator<Item = S>, S: Into<String>>(symbols: I) -> Self {
        let set: BTreeSet<String> = symbols.into_iter().map(Into::into).filter(|s| s != UNK).collect();
        let mut items = vec![UNK.to_string()];
        items.extend(set);
        items.into()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id of `s`, or the unknown id.
    pub fn id(&self, s: &str) -> usize {
        self.index.get(s).copied().unwrap_or(Self::UNK_ID)
    }

    pub fn contains(&self, s: &str) -> bool {
        self.index.contains_key(s)
    }

    pub fn symbol(&self, id: usize) -> &str {
        &self.items[id]
    }

    pub fn symbols(&self) -> &[String] {
        &self.items
    }
}

/// Entity types `0..T` plus the None type at id `T`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct TypeVocab {
    labels: Vec<String>,
}

impl From<Vec<String>> for TypeVocab {
    fn from(labels: Vec<String>) -> Self {
        TypeVocab { labels }
    }
}

impl From<TypeVocab> for Vec<String> {
    fn from(v: TypeVocab) -> Self {
        v.labels
    }
}

impl TypeVocab {
    pub fn new(mut labels: Vec<String>) -> Self {
        labels.sort();
        labels.dedup();
        TypeVocab { labels }
    }

    /// Number of real types T.
    pub fn num_types(&self) -> usize {
        self.labels.len()
    }

    pub fn none_id(&self) -> usize {
        self.labels.len()
    }

    /// T + 1.
    pub fn num_classes(&self) -> usize {
        self.labels.len() + 1
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn label(&self, id: usize) -> &str {
        self.labels.get(id).map_or(NONE_LABEL, String::as_str)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabularies {
    pub words: Vocab,
    pub chars: Vocab,
    pub pos: Vocab,
    pub types: TypeVocab,
}

/// A sentence mapped to ids, ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexedSentence {
    pub id: String,
    pub words: Vec<usize>,
    pub chars: Vec<Vec<usize>>,
    pub pos: Vec<usize>,
    /// Gold `(start, end, type id)` triples; empty at inference.
    pub targets: Vec<(usize, usize, usize)>,
}

impl IndexedSentence {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

impl Vocabularies {
    /// Build from training examples; `extra_words` (e.g. the rows of a static
    /// vector file) join the word table.
    pub fn build(examples: &[SentenceExample], extra_words: &[String]) -> Self {
        let tokens = || examples.iter().flat_map(|e| e.tokens.iter());
        Vocabularies {
            words: Vocab::build(tokens().cloned().chain(extra_words.iter().cloned())),
            chars: Vocab::build(tokens().flat_map(|t| t.chars().map(String::from))),
            pos: Vocab::build(examples.iter().flat_map(|e| e.pos.iter().flatten().cloned())),
            types: TypeVocab::new(crate::data::label_set(examples)),
        }
    }

    /// Error listing every entity label outside the type vocabulary.
    pub fn check_labels(&self, examples: &[SentenceExample]) -> Result<()> {
        let unknown: BTreeSet<String> = examples
            .iter()
            .flat_map(|e| e.entities.iter())
            .filter(|e| self.types.id(&e.label).is_none())
            .map(|e| e.label.clone())
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::UnknownLabels(unknown.into_iter().collect()))
        }
    }

    pub fn index(&self, ex: &SentenceExample) -> Result<IndexedSentence> {
        self.check_labels(std::slice::from_ref(ex))?;
        let pos = match &ex.pos {
            Some(p) => p.iter().map(|t| self.pos.id(t)).collect(),
            None => vec![Vocab::UNK_ID; ex.tokens.len()],
        };
        let mut targets: Vec<(usize, usize, usize)> = ex
            .entities
            .iter()
            .map(|e| (e.start, e.end, self.types.id(&e.label).unwrap()))
            .collect();
        targets.sort_unstable();
        Ok(IndexedSentence {
            id: ex.id.clone(),
            words: ex.tokens.iter().map(|t| self.words.id(t)).collect(),
            chars: ex
                .tokens
                .iter()
                .map(|t| t.chars().map(|c| self.chars.id(c.encode_utf8(&mut [0; 4]))).collect())
                .collect(),
            pos,
            targets,
        })
    }

    pub fn index_all(&self, examples: &[SentenceExample]) -> Result<Vec<IndexedSentence>> {
        self.check_labels(examples)?;
        examples.iter().map(|e| self.index(e)).collect()
    }
}
