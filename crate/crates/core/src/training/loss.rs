//! The three loss terms and the review-input construction.

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::model::tensor::{log_sum_exp, Tensor};

/// Probabilities are clamped to this margin before the review log-loss.
pub const REVIEW_CLAMP: f64 = 1e-7;

/// Mean negative log-likelihood of the gold tokens at the masked positions.
/// `probs` has one row per target position.
pub fn loss_dec(probs: &Tensor, tgt: &[TokenId], mask_positions: &[usize]) -> Result<f64> {
    if mask_positions.is_empty() {
        return Err(Error::InvalidArgument("no masked positions".into()));
    }
    let total: f64 = mask_positions
        .iter()
        .map(|&t| -probs.row(t)[tgt[t] as usize].ln())
        .sum();
    Ok(total / mask_positions.len() as f64)
}

/// `-log softmax(logits)[gold]` together with `softmax(logits) - onehot`.
pub fn cross_entropy_with_grad(logits: &[f64], gold: usize) -> (f64, Vec<f64>) {
    let lse = log_sum_exp(logits);
    let mut grad: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
    grad[gold] -= 1.0;
    (lse - logits[gold], grad)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Builds `ŷ` and the keep labels for one row. Masked slots take the
/// model's argmax, observed slots keep the gold token; a label is 1 exactly
/// when `ŷ_t == y_t`. `scores` may be probabilities or logits.
pub fn build_review_input(scores: &Tensor, tgt: &[TokenId], mask_positions: &[usize]) -> (Vec<TokenId>, Vec<f64>) {
    let mut y_hat = tgt.to_vec();
    for &t in mask_positions {
        y_hat[t] = argmax(scores.row(t)) as TokenId;
    }
    let labels = review_labels(&y_hat, tgt);
    (y_hat, labels)
}

pub fn review_labels(y_hat: &[TokenId], tgt: &[TokenId]) -> Vec<f64> {
    y_hat
        .iter()
        .zip(tgt)
        .map(|(a, b)| if a == b { 1.0 } else { 0.0 })
        .collect()
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(REVIEW_CLAMP, 1.0 - REVIEW_CLAMP)
}

/// Binary cross-entropy averaged over the positions where `keep` is true.
pub fn loss_rev(review_probs: &[f64], labels: &[f64], keep: &[bool]) -> Result<f64> {
    if review_probs.len() != labels.len() || labels.len() != keep.len() {
        return Err(Error::LengthMismatch {
            expected: review_probs.len(),
            actual: labels.len().min(keep.len()),
        });
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for ((&p, &y), &k) in review_probs.iter().zip(labels).zip(keep) {
        if k {
            total += bce(p, y);
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

pub fn bce(p: f64, label: f64) -> f64 {
    let p = clamp_prob(p);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

/// Derivative of [`bce`] with respect to the pre-sigmoid logit; zero where
/// the clamp is active.
pub fn bce_logit_grad(p: f64, label: f64) -> f64 {
    if p < REVIEW_CLAMP || p > 1.0 - REVIEW_CLAMP {
        0.0
    } else {
        p - label
    }
}

/// Cross-entropy of the length distribution against `true_len` (1-based).
pub fn loss_len(length_logits: &[f64], true_len: usize) -> Result<f64> {
    if true_len == 0 || true_len > length_logits.len() {
        return Err(Error::InvalidArgument(format!(
            "target length {true_len} outside 1..={}",
            length_logits.len()
        )));
    }
    Ok(cross_entropy_with_grad(length_logits, true_len - 1).0)
}
