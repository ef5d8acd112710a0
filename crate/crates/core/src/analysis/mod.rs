//! Evaluation and diagnostics: BLEU, accuracies, repetition rate, length
//! buckets, cosine maps and FLOPs accounting.

mod bleu;
pub mod flops;
mod metrics;

pub use bleu::{bleu, bleu_text, BleuScore, Smoothing};
pub use flops::{
    batch_training_flops, flops_estimate, format_flops_table, training_flops_report, FlopsComparison,
    FlopsOptions, Module, Reach, TargetMetric,
};
pub use metrics::{
    cosine_map, exact_match, length_accuracy, length_bucket_scores, repetition_rate, token_accuracy,
    BucketReport, BucketScore, CosineMap, MetricsRecord, MIN_BUCKET_PAIRS,
};
