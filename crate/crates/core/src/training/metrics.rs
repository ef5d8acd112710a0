//! Newline-delimited JSON metrics log.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRow {
    pub step: u64,
    pub lr: f64,
    pub l_dec: f64,
    pub l_rev: f64,
    pub l_len: f64,
    pub total: f64,
    /// Target tokens in the batch.
    pub tokens: usize,
    pub cumulative_flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRow {
    pub step: u64,
    pub examples: usize,
    pub exact_match: f64,
    pub token_accuracy: f64,
    pub length_accuracy: f64,
    pub cumulative_flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricsRow {
    Train(TrainRow),
    Eval(EvalRow),
}

impl MetricsRow {
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("metrics rows serialise");
        s.push('\n');
        s
    }
}

pub fn parse_metrics_log(text: &str) -> Result<Vec<MetricsRow>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                what: "metrics log",
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
