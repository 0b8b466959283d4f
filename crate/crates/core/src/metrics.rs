//! ROUGE-1/2/L and smoothed BLEU over a simple tokenization.
//!
//! Tokens are lowercased, whitespace-separated, with ASCII punctuation
//! stripped from both ends; tokens that become empty are dropped.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("ROUGE-N supports n = 1 or 2, got {0}")]
    Order(usize),
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|t| t.trim_matches(|c: char| c.is_ascii_punctuation()))
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(overlap: usize, reference: usize, candidate: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let recall = ratio(overlap, reference);
        let precision = ratio(overlap, candidate);
        let f1 = if recall + precision == 0.0 {
            0.0
        } else {
            2.0 * recall * precision / (recall + precision)
        };
        Self { recall, precision, f1 }
    }

    const ONE: Prf = Prf {
        recall: 1.0,
        precision: 1.0,
        f1: 1.0,
    };
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped overlap and candidate total for order-`n` n-grams.
fn clipped(reference: &[String], candidate: &[String], n: usize) -> (usize, usize) {
    let r = ngram_counts(reference, n);
    let c = ngram_counts(candidate, n);
    let overlap = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    (overlap, c.values().sum())
}

pub fn rouge_n(reference: &str, candidate: &str, n: usize) -> Result<Prf, MetricError> {
    if !(1..=2).contains(&n) {
        return Err(MetricError::Order(n));
    }
    let (r, c) = (tokenize(reference), tokenize(candidate));
    if r == c {
        return Ok(Prf::ONE);
    }
    if r.len() < n || c.len() < n {
        return Ok(Prf::default());
    }
    let (overlap, c_total) = clipped(&r, &c, n);
    Ok(Prf::from_counts(overlap, r.len() + 1 - n, c_total))
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(reference: &str, candidate: &str) -> Prf {
    let (r, c) = (tokenize(reference), tokenize(candidate));
    if r == c {
        return Prf::ONE;
    }
    Prf::from_counts(lcs_len(&r, &c), r.len(), c.len())
}

/// Sentence BLEU with n = 1..4, uniform weights and one reference.
///
/// An order with no matched n-grams contributes `1 / (c_n + 1)`, where
/// `c_n` is the candidate's n-gram count for that order; an empty candidate
/// scores 0.
pub fn bleu(reference: &str, candidate: &str) -> f64 {
    let (r, c) = (tokenize(reference), tokenize(candidate));
    if c.is_empty() {
        return 0.0;
    }
    let log_sum: f64 = (1..=4)
        .map(|n| {
            let (matched, total) = clipped(&r, &c, n);
            let p = if matched == 0 {
                1.0 / (total as f64 + 1.0)
            } else {
                matched as f64 / total as f64
            };
            p.ln()
        })
        .sum();
    let bp = if c.len() >= r.len() {
        1.0
    } else {
        (1.0 - r.len() as f64 / c.len() as f64).exp()
    };
    bp * (log_sum / 4.0).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ItemScores {
    pub rouge1: Prf,
    pub rouge2: Prf,
    #[serde(rename = "rougeL")]
    pub rouge_l: Prf,
    pub bleu: f64,
}

pub fn score_item(reference: &str, candidate: &str) -> ItemScores {
    ItemScores {
        rouge1: rouge_n(reference, candidate, 1).expect("order 1"),
        rouge2: rouge_n(reference, candidate, 2).expect("order 2"),
        rouge_l: rouge_l(reference, candidate),
        bleu: bleu(reference, candidate),
    }
}

/// Corpus means of the F1 headline numbers and BLEU.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CorpusScores {
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub bleu: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_item: Vec<ItemScores>,
    pub corpus: CorpusScores,
    /// Set when there were no items; the corpus scores are then all 0.
    pub empty: bool,
}

impl MetricReport {
    pub fn from_items(per_item: Vec<ItemScores>) -> Self {
        if per_item.is_empty() {
            return Self {
                per_item,
                corpus: CorpusScores::default(),
                empty: true,
            };
        }
        let n = per_item.len() as f64;
        let mean = |f: &dyn Fn(&ItemScores) -> f64| per_item.iter().map(f).sum::<f64>() / n;
        let corpus = CorpusScores {
            rouge1: mean(&|s| s.rouge1.f1),
            rouge2: mean(&|s| s.rouge2.f1),
            rouge_l: mean(&|s| s.rouge_l.f1),
            bleu: mean(&|s| s.bleu),
        };
        Self {
            per_item,
            corpus,
            empty: false,
        }
    }

    pub fn score(pairs: &[(&str, &str)]) -> Self {
        Self::from_items(pairs.iter().map(|(r, c)| score_item(r, c)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tokenization() {
        assert_eq!(tokenize("  Hello, World!  it's \"fine\" -- ok"), ["hello", "world", "it's", "fine", "ok"]);
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_n("the cat", "the cat", 1).unwrap().f1, 1.0);
        let p = rouge_n("the cat sat", "the cat", 1).unwrap();
        assert!((p.recall - 2.0 / 3.0).abs() < 1e-15 && p.precision == 1.0 && (p.f1 - 0.8).abs() < 1e-15);
        assert_eq!(rouge_n("a b", "c d", 1).unwrap().f1, 0.0);
        assert_eq!(rouge_n("a", "b c", 2).unwrap(), Prf::default());
        assert_eq!(rouge_n("a", "a", 2).unwrap().f1, 1.0);
        assert_eq!(rouge_n("a", "a", 3), Err(MetricError::Order(3)));

        let l = rouge_l("a b c d", "a c d b");
        assert!((l.recall - 0.75).abs() < 1e-15 && (l.precision - 0.75).abs() < 1e-15 && (l.f1 - 0.75).abs() < 1e-15);
        assert_eq!(rouge_l("a b", "").f1, 0.0);
    }

    #[test]
    fn bleu_examples() {
        assert!((bleu("the cat sat on the mat", "the cat sat on the mat") - 1.0).abs() < 1e-15);
        assert_eq!(bleu("anything", ""), 0.0);
        // frozen from tests/oracles/text_oracles.py
        assert!((bleu("the cat is on the mat", "the cat is on a mat") - 0.537284965911771).abs() < 1e-9);
    }

    #[test]
    fn empty_report_is_flagged() {
        let r = MetricReport::from_items(vec![]);
        assert!(r.empty && r.per_item.is_empty());
        assert_eq!(r.corpus, CorpusScores::default());
    }

    #[test]
    fn corpus_is_item_mean() {
        let r = MetricReport::score(&[("a b c", "a b"), ("x y", "x y"), ("p q r s", "s r q p")]);
        let m = r.per_item.iter().map(|s| s.rouge1.f1).sum::<f64>() / 3.0;
        assert!((r.corpus.rouge1 - m).abs() < 1e-12);
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["corpus"]["rougeL"].is_number());
    }

    proptest! {
        #[test]
        fn bounded_and_dual(a in "[a-e ]{0,24}", b in "[a-e ]{0,24}") {
            for n in 1..=2 {
                let ab = rouge_n(&a, &b, n).unwrap();
                let ba = rouge_n(&b, &a, n).unwrap();
                prop_assert!((ab.recall - ba.precision).abs() < 1e-15);
                for v in [ab.recall, ab.precision, ab.f1] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
            let l = rouge_l(&a, &b);
            prop_assert!((0.0..=1.0).contains(&l.f1) && l.f1 <= l.recall.max(l.precision) + 1e-15);
            prop_assert!((0.0..=1.0).contains(&bleu(&a, &b)));
        }
    }
}
