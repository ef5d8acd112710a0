//! Corpus-level BLEU in the multi-bleu convention.

use std::collections::HashMap;
use std::hash::Hash;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Smoothing {
    #[default]
    None,
    /// Add one to matches and totals for orders two and up.
    AddOne,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BleuScore {
    /// In `[0, 100]`.
    pub score: f64,
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// BLEU over parallel reference/hypothesis token sequences.
pub fn bleu<T: Hash + Eq>(references: &[Vec<T>], hypotheses: &[Vec<T>], max_ngram: usize, smoothing: Smoothing) -> Result<BleuScore> {
    if references.len() != hypotheses.len() {
        return Err(Error::LengthMismatch {
            expected: references.len(),
            actual: hypotheses.len(),
        });
    }
    if references.is_empty() {
        return Err(Error::InvalidArgument("no references".into()));
    }
    if max_ngram == 0 {
        return Err(Error::InvalidArgument("max_ngram must be at least 1".into()));
    }
    let mut matches = vec![0usize; max_ngram];
    let mut totals = vec![0usize; max_ngram];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (r, h) in references.iter().zip(hypotheses) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_ngram {
            let gold = ngram_counts(r, n);
            for (gram, count) in ngram_counts(h, n) {
                matches[n - 1] += count.min(gold.get(gram).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let precisions: Vec<f64> = (0..max_ngram)
        .map(|i| {
            let (m, t) = match smoothing {
                Smoothing::AddOne if i >= 1 => (matches[i] + 1, totals[i] + 1),
                _ => (matches[i], totals[i]),
            };
            if t == 0 {
                0.0
            } else {
                m as f64 / t as f64
            }
        })
        .collect();
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let score = if hyp_len == 0 || precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / max_ngram as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };
    Ok(BleuScore {
        score,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

/// BLEU over whitespace-tokenised lines.
pub fn bleu_text(references: &[String], hypotheses: &[String], smoothing: Smoothing) -> Result<BleuScore> {
    let split = |xs: &[String]| -> Vec<Vec<String>> {
        xs.iter()
            .map(|s| s.split_whitespace().map(str::to_owned).collect())
            .collect()
    };
    bleu(&split(references), &split(hypotheses), 4, smoothing)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn identical_is_perfect_and_disjoint_is_zero() {
        let r = vec![toks("a b c d e")];
        assert!((bleu(&r, &r, 4, Smoothing::None).unwrap().score - 100.0).abs() < 1e-9);
        let h = vec![toks("v w x y z")];
        assert_eq!(bleu(&r, &h, 4, Smoothing::None).unwrap().score, 0.0);
    }

    #[test]
    fn clipping_by_hand() {
        let r = vec![toks("the cat sat")];
        let h = vec![toks("the the the cat")];
        let s = bleu(&r, &h, 4, Smoothing::None).unwrap();
        assert_eq!(s.precisions[..3], [0.5, 1.0 / 3.0, 0.0]);
        assert_eq!(s.score, 0.0);
        // (1/2 · 2/4 · 1/3 · 1/2)^(1/4)
        let smoothed = bleu(&r, &h, 4, Smoothing::AddOne).unwrap().score;
        let expect = 100.0 * (0.5f64 * 0.5 * (1.0 / 3.0) * 0.5).powf(0.25);
        assert!((smoothed - expect).abs() < 1e-9);
    }

    #[test]
    fn count_mismatch_and_empty_corpus_are_errors() {
        let r = vec![toks("a")];
        assert!(bleu(&r, &[], 4, Smoothing::None).is_err());
        let none: Vec<Vec<&str>> = Vec::new();
        assert!(bleu(&none, &none, 4, Smoothing::None).is_err());
    }

    #[test]
    fn empty_hypotheses_score_zero() {
        let r = vec![toks("a b")];
        let h = vec![Vec::new()];
        assert_eq!(bleu(&r, &h, 4, Smoothing::AddOne).unwrap().score, 0.0);
    }
}
