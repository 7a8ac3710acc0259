//! Sentence examples and their on-disk formats.
//!
//! Spans are token-indexed with an inclusive end everywhere.

mod conll;
mod synth;

pub use conll::{load_conll_bio, parse_conll_bio, spans_to_bio, write_conll_bio, BioLoad};
pub use synth::{nesting_stats, synth_nested_corpus, CorpusStats, SynthConfig, SynthCorpus};

use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub label: String,
}

impl EntitySpan {
    pub fn new(start: usize, end: usize, label: impl Into<String>) -> Self {
        EntitySpan {
            start,
            end,
            label: label.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Strict containment: covers `other` and is not the same span.
    pub fn contains(&self, other: &EntitySpan) -> bool {
        self.start <= other.start && other.end <= self.end && (self.start, self.end) != (other.start, other.end)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SentenceExample {
    pub id: String,
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos: Option<Vec<String>>,
    #[serde(default)]
    pub entities: Vec<EntitySpan>,
}

impl SentenceExample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Structural checks shared by every loader.
    pub fn validate(&self) -> Result<()> {
        let l = self.tokens.len();
        if l == 0 {
            return Err(Error::Data(format!("sentence {:?} has no tokens", self.id)));
        }
        if let Some(pos) = &self.pos {
            if pos.len() != l {
                return Err(Error::Data(format!(
                    "sentence {:?}: {} POS tags for {} tokens",
                    self.id,
                    pos.len(),
                    l
                )));
            }
        }
        let mut seen = HashSet::new();
        for e in &self.entities {
            if e.start > e.end || e.end >= l {
                return Err(Error::Data(format!(
                    "sentence {:?}: entity ({}, {}, {}) out of range for {} tokens",
                    self.id, e.start, e.end, e.label, l
                )));
            }
            if !seen.insert(e) {
                return Err(Error::Data(format!(
                    "sentence {:?}: duplicate entity ({}, {}, {})",
                    self.id, e.start, e.end, e.label
                )));
            }
        }
        Ok(())
    }
}

/// Parse span-annotated JSON lines. Blank lines are skipped.
pub fn parse_jsonl_spans(text: &str, path: &Path) -> Result<Vec<SentenceExample>> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: SentenceExample = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        ex.validate().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if !ids.insert(ex.id.clone()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("duplicate sentence id {:?}", ex.id),
            });
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn load_jsonl_spans(path: impl AsRef<Path>) -> Result<Vec<SentenceExample>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_jsonl_spans(&text, path)
}

pub fn save_jsonl_spans(path: impl AsRef<Path>, examples: &[SentenceExample]) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = BufWriter::new(f);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Read lines lazily; used by loaders that do their own parsing.
pub(crate) fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = File::open(path).map_err(|e| Error::file(path, e))?;
    BufReader::new(f)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::file(path, e))
}

/// Sorted, deduplicated entity labels across examples.
pub fn label_set(examples: &[SentenceExample]) -> Vec<String> {
    let mut labels: Vec<String> = examples
        .iter()
        .flat_map(|ex| ex.entities.iter().map(|e| e.label.clone()))
        .collect();
    labels.sort();
    labels.dedup();
    labels
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_example_one_entity() {
        let line = r#"{"id":"a","tokens":["x","y"],"entities":[{"start":0,"end":1,"type":"PER"}]}"#;
        let ex = parse_jsonl_spans(line, Path::new("t")).unwrap();
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].entities, vec![EntitySpan::new(0, 1, "PER")]);
    }

    #[test]
    fn out_of_range_names_sentence() {
        let line = r#"{"id":"a","tokens":["x","y"],"entities":[{"start":0,"end":5,"type":"PER"}]}"#;
        let err = parse_jsonl_spans(line, Path::new("t")).unwrap_err().to_string();
        assert!(err.contains("\"a\""), "{err}");
        assert!(err.contains("t:1"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"id\":\"a\",\"tokens\":[\"x\"]}\n\n{oops\n";
        let err = parse_jsonl_spans(text, Path::new("f.jsonl")).unwrap_err().to_string();
        assert!(err.starts_with("f.jsonl:3:"), "{err}");
    }

    #[test]
    fn duplicates_rejected() {
        let dup = r#"{"id":"a","tokens":["x"],"entities":[{"start":0,"end":0,"type":"P"},{"start":0,"end":0,"type":"P"}]}"#;
        assert!(parse_jsonl_spans(dup, Path::new("t")).is_err());
        let ids = "{\"id\":\"a\",\"tokens\":[\"x\"]}\n{\"id\":\"a\",\"tokens\":[\"y\"]}";
        assert!(parse_jsonl_spans(ids, Path::new("t")).is_err());
    }

    #[test]
    fn unknown_fields_rejected() {
        let line = r#"{"id":"a","tokens":["x"],"extra":1}"#;
        assert!(parse_jsonl_spans(line, Path::new("t")).is_err());
    }

    #[test]
    fn containment_is_strict() {
        let outer = EntitySpan::new(0, 2, "A");
        assert!(outer.contains(&EntitySpan::new(1, 2, "B")));
        assert!(!outer.contains(&EntitySpan::new(0, 2, "B")));
        assert!(!outer.contains(&EntitySpan::new(2, 3, "B")));
    }
}
