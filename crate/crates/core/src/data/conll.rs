//! CoNLL-style BIO files: one `token ... tag` line per token, blank lines
//! between sentences. The first column is the token and the last the tag;
//! with three or more columns the second is read as POS.

use std::path::Path;

use super::{read_lines, EntitySpan, SentenceExample};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BioLoad {
    pub examples: Vec<SentenceExample>,
    /// `I-X` tags with no open `X` span; each was read as `B-X`.
    pub warnings: usize,
}

enum Tag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

fn parse_tag(tag: &str) -> Option<Tag<'_>> {
    if tag == "O" {
        return Some(Tag::Outside);
    }
    let (head, label) = tag.split_once('-')?;
    if label.is_empty() {
        return None;
    }
    match head {
        "B" => Some(Tag::Begin(label)),
        "I" => Some(Tag::Inside(label)),
        _ => None,
    }
}

struct Pending {
    tokens: Vec<String>,
    pos: Vec<String>,
    tags: Vec<(String, usize)>,
}

pub fn parse_conll_bio(lines: &[String], path: &Path) -> Result<BioLoad> {
    let mut examples = Vec::new();
    let mut warnings = 0;
    let mut cur = Pending {
        tokens: vec![],
        pos: vec![],
        tags: vec![],
    };
    let flush = |cur: &mut Pending, examples: &mut Vec<SentenceExample>, warnings: &mut usize| -> Result<()> {
        if cur.tokens.is_empty() {
            return Ok(());
        }
        let mut entities = Vec::new();
        let mut open: Option<(usize, String)> = None;
        for (i, (tag, line)) in cur.tags.iter().enumerate() {
            let tag = parse_tag(tag).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: *line,
                msg: format!("malformed BIO tag {tag:?}"),
            })?;
            match tag {
                Tag::Inside(label) if open.as_ref().is_some_and(|(_, l)| l == label) => {}
                Tag::Inside(label) | Tag::Begin(label) => {
                    if matches!(tag, Tag::Inside(_)) {
                        *warnings += 1;
                        log::warn!("{}:{}: I-{label} without an open span, read as B-{label}", path.display(), line);
                    }
                    if let Some((s, l)) = open.take() {
                        entities.push(EntitySpan::new(s, i - 1, l));
                    }
                    open = Some((i, label.to_string()));
                }
                Tag::Outside => {
                    if let Some((s, l)) = open.take() {
                        entities.push(EntitySpan::new(s, i - 1, l));
                    }
                }
            }
        }
        if let Some((s, l)) = open.take() {
            entities.push(EntitySpan::new(s, cur.tokens.len() - 1, l));
        }
        let pos = if cur.pos.len() == cur.tokens.len() {
            Some(std::mem::take(&mut cur.pos))
        } else {
            None
        };
        examples.push(SentenceExample {
            id: examples.len().to_string(),
            tokens: std::mem::take(&mut cur.tokens),
            pos,
            entities,
        });
        cur.pos.clear();
        cur.tags.clear();
        Ok(())
    };

    for (i, raw) in lines.iter().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            flush(&mut cur, &mut examples, &mut warnings)?;
            continue;
        }
        if line.starts_with("-DOCSTART-") {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() < 2 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "expected at least a token and a tag".into(),
            });
        }
        cur.tokens.push(cols[0].to_string());
        if cols.len() >= 3 {
            cur.pos.push(cols[1].to_string());
        }
        cur.tags.push((cols[cols.len() - 1].to_string(), i + 1));
    }
    flush(&mut cur, &mut examples, &mut warnings)?;
    Ok(BioLoad { examples, warnings })
}

pub fn load_conll_bio(path: impl AsRef<Path>) -> Result<BioLoad> {
    let path = path.as_ref();
    parse_conll_bio(&read_lines(path)?, path)
}

/// BIO tags for a flat (non-overlapping) entity set.
pub fn spans_to_bio(len: usize, entities: &[EntitySpan]) -> Result<Vec<String>> {
    let mut tags = vec!["O".to_string(); len];
    let mut taken = vec![false; len];
    for e in entities {
        if e.start > e.end || e.end >= len {
            return Err(Error::Data(format!("entity ({}, {}) out of range for {len} tokens", e.start, e.end)));
        }
        if taken[e.start..=e.end].iter().any(|&t| t) {
            return Err(Error::Data(format!(
                "entity ({}, {}, {}) overlaps another; BIO cannot encode nesting",
                e.start, e.end, e.label
            )));
        }
        for (k, i) in (e.start..=e.end).enumerate() {
            taken[i] = true;
            tags[i] = format!("{}-{}", if k == 0 { "B" } else { "I" }, e.label);
        }
    }
    Ok(tags)
}

pub fn write_conll_bio(path: impl AsRef<Path>, examples: &[SentenceExample]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for ex in examples {
        let tags = spans_to_bio(ex.tokens.len(), &ex.entities)?;
        for (i, (tok, tag)) in ex.tokens.iter().zip(&tags).enumerate() {
            match &ex.pos {
                Some(pos) => out.push_str(&format!("{tok} {} {tag}\n", pos[i])),
                None => out.push_str(&format!("{tok} {tag}\n")),
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::file(path, e))
}
