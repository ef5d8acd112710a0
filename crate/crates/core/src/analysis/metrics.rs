//! Accuracy measures and the diagnostic instruments: repetition rate,
//! length buckets and hidden-state cosine maps.

use std::collections::BTreeMap;
use std::hash::Hash;

use serde::Serialize;

use super::bleu::{bleu, Smoothing};
use crate::error::{Error, Result};
use crate::model::Tensor;

/// A named measurement with free-form tags.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub name: String,
    pub value: f64,
    pub context: BTreeMap<String, String>,
}

impl MetricsRecord {
    pub fn new(name: impl Into<String>, value: f64) -> Self {
        Self {
            name: name.into(),
            value,
            context: BTreeMap::new(),
        }
    }

    pub fn tag(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.context.insert(key.into(), value.to_string());
        self
    }
}

fn check_pairs<A, B>(refs: &[A], hyps: &[B]) -> Result<()> {
    if refs.len() != hyps.len() {
        return Err(Error::LengthMismatch {
            expected: refs.len(),
            actual: hyps.len(),
        });
    }
    if refs.is_empty() {
        return Err(Error::InvalidArgument("no pairs to score".into()));
    }
    Ok(())
}

/// Percentage of hypotheses identical to their reference.
pub fn exact_match<T: PartialEq>(refs: &[Vec<T>], hyps: &[Vec<T>]) -> Result<f64> {
    check_pairs(refs, hyps)?;
    let hits = refs.iter().zip(hyps).filter(|(r, h)| r == h).count();
    Ok(100.0 * hits as f64 / refs.len() as f64)
}

/// Position-wise matches over `Σ max(|hyp|, |ref|)`, as a percentage, so
/// missing and surplus tokens both count as errors.
pub fn token_accuracy<T: PartialEq>(refs: &[Vec<T>], hyps: &[Vec<T>]) -> Result<f64> {
    check_pairs(refs, hyps)?;
    let mut hits = 0usize;
    let mut total = 0usize;
    for (r, h) in refs.iter().zip(hyps) {
        hits += r.iter().zip(h).filter(|(a, b)| a == b).count();
        total += r.len().max(h.len());
    }
    Ok(if total == 0 { 100.0 } else { 100.0 * hits as f64 / total as f64 })
}

pub fn length_accuracy(predicted: &[usize], actual: &[usize]) -> Result<f64> {
    check_pairs(predicted, actual)?;
    let hits = predicted.iter().zip(actual).filter(|(a, b)| a == b).count();
    Ok(100.0 * hits as f64 / predicted.len() as f64)
}

/// `100 · #{t ≥ 2 : tok_t = tok_{t−1}} / total tokens`, pooled over the
/// corpus. The denominator counts every token, not adjacent pairs.
pub fn repetition_rate<T: PartialEq>(hyps: &[Vec<T>]) -> Result<f64> {
    let total: usize = hyps.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("no tokens to measure".into()));
    }
    let repeats: usize = hyps
        .iter()
        .map(|h| h.windows(2).filter(|w| w[0] == w[1]).count())
        .sum();
    Ok(100.0 * repeats as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketScore {
    /// Reference lengths in `[lo, hi)`.
    pub lo: usize,
    pub hi: usize,
    pub pairs: usize,
    pub bleu: f64,
    /// Fewer than [`MIN_BUCKET_PAIRS`] pairs.
    pub low_confidence: bool,
}

pub const MIN_BUCKET_PAIRS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketReport {
    pub buckets: Vec<BucketScore>,
    /// Ranges with no pairs; they get no score.
    pub empty: Vec<(usize, usize)>,
    /// Pairs whose reference length falls outside every bucket.
    pub dropped: usize,
}

/// Corpus BLEU per reference-length bucket.
pub fn length_bucket_scores<T: Hash + Eq + Clone>(
    refs: &[Vec<T>],
    hyps: &[Vec<T>],
    edges: &[usize],
    smoothing: Smoothing,
) -> Result<BucketReport> {
    check_pairs(refs, hyps)?;
    if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(
            "bucket edges must be at least two strictly increasing values".into(),
        ));
    }
    let mut report = BucketReport {
        buckets: Vec::new(),
        empty: Vec::new(),
        dropped: 0,
    };
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); edges.len() - 1];
    for (i, r) in refs.iter().enumerate() {
        match edges.windows(2).position(|w| (w[0]..w[1]).contains(&r.len())) {
            Some(b) => members[b].push(i),
            None => report.dropped += 1,
        }
    }
    for (b, idx) in members.iter().enumerate() {
        let (lo, hi) = (edges[b], edges[b + 1]);
        if idx.is_empty() {
            report.empty.push((lo, hi));
            continue;
        }
        let r: Vec<Vec<T>> = idx.iter().map(|&i| refs[i].clone()).collect();
        let h: Vec<Vec<T>> = idx.iter().map(|&i| hyps[i].clone()).collect();
        report.buckets.push(BucketScore {
            lo,
            hi,
            pairs: idx.len(),
            bleu: bleu(&r, &h, 4, smoothing)?.score,
            low_confidence: idx.len() < MIN_BUCKET_PAIRS,
        });
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CosineMap {
    /// `[T × T]`, symmetric, unit diagonal (zero rows excepted).
    pub matrix: Tensor,
    /// Rows with zero norm; their similarities are reported as 0.
    pub zero_rows: Vec<usize>,
}

impl CosineMap {
    /// Mean similarity of positions `t` and `t + 1`.
    pub fn adjacent_mean(&self) -> Option<f64> {
        let n = self.matrix.rows();
        (n >= 2).then(|| (0..n - 1).map(|t| self.matrix.row(t)[t + 1]).sum::<f64>() / (n - 1) as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in 0..self.matrix.rows() {
            let row: Vec<String> = self.matrix.row(r).iter().map(|v| format!("{v:.6}")).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Pairwise cosine similarity between rows of `states`.
pub fn cosine_map(states: &Tensor) -> CosineMap {
    let n = states.rows();
    let norms: Vec<f64> = (0..n)
        .map(|r| states.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let zero_rows: Vec<usize> = (0..n).filter(|&r| norms[r] == 0.0).collect();
    let mut matrix = Tensor::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let sim = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else if i == j {
                1.0
            } else {
                let dot: f64 = states.row(i).iter().zip(states.row(j)).map(|(a, b)| a * b).sum();
                (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            };
            matrix.row_mut(i)[j] = sim;
            matrix.row_mut(j)[i] = sim;
        }
    }
    CosineMap { matrix, zero_rows }
}
