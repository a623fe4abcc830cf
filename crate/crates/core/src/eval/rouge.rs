//! ROUGE-1, ROUGE-2 and ROUGE-L over token sequences.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    pub fn from_counts(hits: usize, cand_total: usize, ref_total: usize) -> Self {
        let precision = if cand_total == 0 {
            0.0
        } else {
            hits as f64 / cand_total as f64
        };
        let recall = if ref_total == 0 {
            0.0
        } else {
            hits as f64 / ref_total as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        RougeScore {
            precision,
            recall,
            f1,
        }
    }
}

/// The three metrics for one candidate/reference pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeSet {
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub rouge_l: RougeScore,
}

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for w in tokens.windows(n) {
        *counts
            .entry(w.iter().map(AsRef::as_ref).collect())
            .or_insert(0) += 1;
    }
    counts
}

/// Clipped n-gram overlap. An empty reference scores zero.
pub fn rouge_n<S: AsRef<str>>(candidate: &[S], reference: &[S], n: usize) -> RougeScore {
    if reference.is_empty() {
        return RougeScore::default();
    }
    let c = ngrams(candidate, n);
    let r = ngrams(reference, n);
    let hits = c
        .iter()
        .map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    RougeScore::from_counts(hits, c.values().sum(), r.values().sum())
}

pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Longest-common-subsequence score. An empty reference scores zero.
pub fn rouge_l<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> RougeScore {
    if reference.is_empty() {
        return RougeScore::default();
    }
    RougeScore::from_counts(
        lcs_len(candidate, reference),
        candidate.len(),
        reference.len(),
    )
}

pub fn rouge_all<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> RougeSet {
    RougeSet {
        rouge1: rouge_n(candidate, reference, 1),
        rouge2: rouge_n(candidate, reference, 2),
        rouge_l: rouge_l(candidate, reference),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn fixtures() {
        let s = rouge_n(&t("a b c"), &t("a b c"), 1);
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        assert_eq!(rouge_n(&t("a b"), &t("c d"), 1).f1, 0.0);
        let s = rouge_n(&t("a b c"), &t("a c d"), 1);
        assert!((s.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-12);
        let l = rouge_l(&t("a c d"), &t("a b c d"));
        assert_eq!((l.precision, l.recall), (1.0, 0.75));
        assert!((l.f1 - 0.857142857142857).abs() < 1e-12);
        assert_eq!(lcs_len(&t("a b c d"), &t("d c b a")), 1);
        assert_eq!(rouge_l(&t("a"), &t("")), RougeScore::default());
        assert_eq!(rouge_n(&t("a"), &t(""), 2), RougeScore::default());
    }

    #[test]
    fn counts_are_clipped() {
        let s = rouge_n(&t("the the the"), &t("the cat"), 1);
        assert!((s.precision - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.recall, 0.5);
    }
}
