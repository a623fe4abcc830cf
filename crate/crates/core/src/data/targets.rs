//! Distant-supervision targets over background windows.

use std::collections::HashSet;
use std::ops::Range;

use crate::error::{GlksError, Result};

/// Jaccard similarity over the unique tokens of `a` and `b`; 0 if both are
/// empty.
pub fn jaccard<S: AsRef<str>>(a: &[S], b: &[S]) -> f64 {
    let sa: HashSet<&str> = a.iter().map(AsRef::as_ref).collect();
    let sb: HashSet<&str> = b.iter().map(AsRef::as_ref).collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 0.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

/// Non-overlapping stride-`m` windows covering `0..len`; the last may be
/// shorter.
pub fn windows(len: usize, m: usize) -> Vec<Range<usize>> {
    (0..len.div_ceil(m))
        .map(|w| w * m..((w + 1) * m).min(len))
        .collect()
}

/// Target distribution `Q` over the background's semantic units.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticUnitTargets(pub Vec<f64>);

impl SemanticUnitTargets {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// First index of the largest entry.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `softmax(Jaccard(window, response) / temperature)` over the windows of
/// `background`.
pub fn build_ds_targets<S: AsRef<str>>(
    background: &[S],
    response: &[S],
    m: usize,
    temperature: f64,
) -> Result<SemanticUnitTargets> {
    if m == 0 {
        return Err(GlksError::Config("window size m must be >= 1".into()));
    }
    if temperature <= 0.0 {
        return Err(GlksError::Config("ds_temperature must be positive".into()));
    }
    let scores: Vec<f64> = windows(background.len(), m)
        .into_iter()
        .map(|r| jaccard(&background[r], response) / temperature)
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(SemanticUnitTargets(
        exps.into_iter().map(|e| e / total).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn jaccard_fixtures() {
        assert_eq!(
            jaccard(&["the", "movie", "great"], &["movie", "great", "fun"]),
            0.5
        );
        assert_eq!(jaccard(&["a", "b"], &["b", "a", "a"]), 1.0);
        assert_eq!(jaccard(&["a"], &["b"]), 0.0);
        assert_eq!(jaccard::<&str>(&[], &[]), 0.0);
    }

    #[test]
    fn window_sizes() {
        let w = windows(10, 4);
        assert_eq!(w, vec![0..4, 4..8, 8..10]);
    }

    #[test]
    fn verbatim_window_wins() {
        let bg = ["a", "b", "c", "d", "e", "f", "g", "h", "i"];
        let q = build_ds_targets(&bg, &["d", "e", "f"], 3, 1.0).unwrap();
        assert_eq!(q.argmax(), 1);
        assert!((q.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_windows_are_uniform() {
        let bg = ["x", "y", "x", "y", "x", "y"];
        let q = build_ds_targets(&bg, &["x", "z"], 2, 1.0).unwrap();
        for &p in q.as_slice() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn q_is_a_distribution_and_order_invariant(
            bg in prop::collection::vec(0u8..12, 1..40),
            resp in prop::collection::vec(0u8..12, 1..10),
            m in 1usize..7,
        ) {
            let bg: Vec<String> = bg.iter().map(|t| t.to_string()).collect();
            let mut resp: Vec<String> = resp.iter().map(|t| t.to_string()).collect();
            let q = build_ds_targets(&bg, &resp, m, 1.0).unwrap();
            prop_assert_eq!(q.len(), bg.len().div_ceil(m));
            prop_assert!((q.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(q.as_slice().iter().all(|&p| p >= 0.0));
            resp.reverse();
            let q2 = build_ds_targets(&bg, &resp, m, 1.0).unwrap();
            prop_assert_eq!(q, q2);
        }
    }
}
