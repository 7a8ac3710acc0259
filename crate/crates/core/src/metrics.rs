//! Exact-match precision, recall and F1, overall and by gold span length.

use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt;

use crate::data::EntitySpan;

pub const BUCKETS: [&str; 5] = ["1", "2", "3", "4", ">=5"];

fn bucket_of(len: usize) -> usize {
    len.clamp(1, 5) - 1
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

impl Prf {
    pub fn from_counts(gold: usize, predicted: usize, correct: usize) -> Self {
        let precision = if predicted == 0 {
            0.0
        } else {
            correct as f64 / predicted as f64
        };
        let recall = if gold == 0 { 0.0 } else { correct as f64 / gold as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
            gold,
            predicted,
            correct,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub length: String,
    #[serde(flatten)]
    pub scores: Prf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: Prf,
    pub buckets: Vec<BucketReport>,
}

/// Micro-averaged exact (start, end, type) match. A bucket's gold and
/// correct counts use gold lengths; its predicted count uses predicted
/// lengths, so bucket precision is measured on predictions of that length.
pub fn score(pred: &[Vec<EntitySpan>], gold: &[Vec<EntitySpan>]) -> MetricsReport {
    assert_eq!(pred.len(), gold.len(), "score: sentence counts differ");
    let mut g = [0usize; 5];
    let mut p = [0usize; 5];
    let mut c = [0usize; 5];
    for (ps, gs) in pred.iter().zip(gold) {
        let gset: HashSet<&EntitySpan> = gs.iter().collect();
        let pset: HashSet<&EntitySpan> = ps.iter().collect();
        for e in &gset {
            g[bucket_of(e.len())] += 1;
        }
        for e in &pset {
            p[bucket_of(e.len())] += 1;
            if gset.contains(e) {
                c[bucket_of(e.len())] += 1;
            }
        }
    }
    let sum = |a: &[usize; 5]| a.iter().sum::<usize>();
    MetricsReport {
        overall: Prf::from_counts(sum(&g), sum(&p), sum(&c)),
        buckets: (0..5)
            .map(|b| BucketReport {
                length: BUCKETS[b].to_string(),
                scores: Prf::from_counts(g[b], p[b], c[b]),
            })
            .collect(),
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<8} {:>9} {:>9} {:>9} {:>6} {:>6} {:>7}",
            "length", "precision", "recall", "f1", "gold", "pred", "correct"
        )?;
        let row = |f: &mut fmt::Formatter<'_>, name: &str, s: &Prf| {
            writeln!(
                f,
                "{:<8} {:>9.4} {:>9.4} {:>9.4} {:>6} {:>6} {:>7}",
                name, s.precision, s.recall, s.f1, s.gold, s.predicted, s.correct
            )
        };
        for b in &self.buckets {
            row(f, &b.length, &b.scores)?;
        }
        row(f, "overall", &self.overall)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(s: usize, t: usize, l: &str) -> EntitySpan {
        EntitySpan::new(s, t, l)
    }

    #[test]
    fn partial_recall() {
        let r = score(&[vec![e(0, 1, "A")]], &[vec![e(0, 1, "A"), e(2, 2, "B")]]);
        assert_eq!(r.overall.precision, 1.0);
        assert_eq!(r.overall.recall, 0.5);
        assert!((r.overall.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_predictions() {
        let r = score(&[vec![]], &[vec![e(0, 0, "A")]]);
        assert_eq!((r.overall.precision, r.overall.recall, r.overall.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn perfect_predictions_fill_every_populated_bucket() {
        let gold = vec![vec![e(0, 0, "A"), e(0, 1, "B"), e(0, 5, "C")], vec![e(2, 4, "A")]];
        let r = score(&gold, &gold);
        assert_eq!(r.overall.f1, 1.0);
        for b in &r.buckets {
            if b.scores.gold > 0 {
                assert_eq!((b.scores.precision, b.scores.recall, b.scores.f1), (1.0, 1.0, 1.0));
            }
        }
        assert_eq!(r.buckets[4].scores.gold, 1);
    }

    #[test]
    fn type_mismatch_is_wrong() {
        let r = score(&[vec![e(0, 1, "A")]], &[vec![e(0, 1, "B")]]);
        assert_eq!(r.overall.f1, 0.0);
    }

    #[test]
    fn half_right() {
        let r = score(&[vec![e(0, 0, "A"), e(1, 1, "A")]], &[vec![e(0, 0, "A"), e(2, 2, "A")]]);
        assert_eq!((r.overall.precision, r.overall.recall, r.overall.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn table_lists_all_buckets() {
        let r = score(&[vec![]], &[vec![]]);
        let t = r.to_string();
        for b in BUCKETS {
            assert!(t.contains(b));
        }
        assert!(t.contains("overall"));
    }
}
