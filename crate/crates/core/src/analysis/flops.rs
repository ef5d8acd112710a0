//! Analytic FLOPs accounting. One multiply-accumulate counts as 2 FLOPs;
//! softmax and layer-norm work is excluded unless asked for.

use serde::Serialize;

use crate::corpus::Batch;
use crate::model::ModelConfig;
use crate::training::metrics::MetricsRow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Module {
    Encoder,
    Decoder,
    Reviewer,
}

impl Module {
    pub const ALL: [Module; 3] = [Module::Encoder, Module::Decoder, Module::Reviewer];

    pub fn name(self) -> &'static str {
        match self {
            Module::Encoder => "Encoder",
            Module::Decoder => "Decoder",
            Module::Reviewer => "Reviewer",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FlopsOptions {
    /// Adds 5 FLOPs per softmax input and 8 per layer-norm element.
    pub include_nonlinear: bool,
}

const SOFTMAX_PER_ELEMENT: u64 = 5;
const NORM_PER_ELEMENT: u64 = 8;

/// Attention with `lq` queries over `lk` keys: Q/O projections on the
/// queries, K/V on the keys, then scores and context.
fn attention(lq: u64, lk: u64, d: u64, heads: u64, opts: FlopsOptions) -> u64 {
    let mut f = 2 * (2 * lq * d * d + 2 * lk * d * d + 2 * lq * lk * d);
    if opts.include_nonlinear {
        f += SOFTMAX_PER_ELEMENT * heads * lq * lk;
    }
    f
}

fn ffn(l: u64, d: u64, hidden: u64) -> u64 {
    2 * 2 * l * d * hidden
}

fn norms(count: u64, l: u64, d: u64, opts: FlopsOptions) -> u64 {
    if opts.include_nonlinear {
        NORM_PER_ELEMENT * count * l * d
    } else {
        0
    }
}

/// Forward FLOPs of one module for a single pair. `src_len` excludes
/// `<LEN>`; `tgt_len` includes `<EOS>`.
pub fn flops_estimate(config: &ModelConfig, src_len: usize, tgt_len: usize, module: Module, opts: FlopsOptions) -> u64 {
    let d = config.model_dim as u64;
    let hidden = config.ffn_dim as u64;
    let heads = config.heads as u64;
    let layers = config.layers as u64;
    let s = src_len as u64 + 1;
    let l = tgt_len as u64;
    let v = config.vocab_size as u64;
    match module {
        Module::Encoder => {
            let layer = attention(s, s, d, heads, opts) + ffn(s, d, hidden) + norms(2, s, d, opts);
            layers * layer + 2 * d * config.max_target_len as u64
        }
        Module::Decoder | Module::Reviewer => {
            let layer = attention(l, l, d, heads, opts)
                + attention(l, s, d, heads, opts)
                + ffn(l, d, hidden)
                + norms(3, l, d, opts);
            let head = if module == Module::Decoder {
                2 * l * d * v + if opts.include_nonlinear { SOFTMAX_PER_ELEMENT * l * v } else { 0 }
            } else {
                2 * l * d
            };
            layers * layer + head
        }
    }
}

/// Training FLOPs for one batch: forward plus a backward counted as twice
/// the forward. The reviewer is included only when its loss is active.
pub fn batch_training_flops(config: &ModelConfig, batch: &Batch, review: bool) -> u64 {
    let opts = FlopsOptions::default();
    let mut forward = 0;
    for r in 0..batch.len() {
        let (s, t) = (batch.src_len[r] - 1, batch.tgt_len[r]);
        forward += flops_estimate(config, s, t, Module::Encoder, opts);
        forward += flops_estimate(config, s, t, Module::Decoder, opts);
        if review {
            forward += flops_estimate(config, s, t, Module::Reviewer, opts);
        }
    }
    3 * forward
}

/// Per-module rows in the layout of a "Module / FLOPs" table, in millions.
pub fn format_flops_table(config: &ModelConfig, src_len: usize, tgt_len: usize, opts: FlopsOptions) -> String {
    let values: Vec<u64> = Module::ALL
        .iter()
        .map(|&m| flops_estimate(config, src_len, tgt_len, m, opts))
        .collect();
    let millions = |f: u64| format!("{:.3}M", f as f64 / 1e6);
    let step = |review: bool| 3 * (values[0] + values[1] + if review { values[2] } else { 0 });
    let mut out = String::new();
    out.push_str("# forward FLOPs per pair (1 MAC = 2 FLOPs");
    out.push_str(if opts.include_nonlinear { ", softmax and layer norm included)\n" } else { ", softmax and layer norm excluded)\n" });
    out.push_str(&format!("Module\t{}\t{}\t{}\n", Module::Encoder.name(), Module::Decoder.name(), Module::Reviewer.name()));
    out.push_str(&format!("FLOPs\t{}\t{}\t{}\n", millions(values[0]), millions(values[1]), millions(values[2])));
    out.push_str("# training step = 3 x forward\n");
    out.push_str("Model\tcmtm-only\tfull\n");
    out.push_str(&format!("FLOPs\t{}\t{}\n", millions(step(false)), millions(step(true))));
    out
}

/// When a run first met the target, read from its evaluation rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reach {
    pub step: Option<u64>,
    pub cumulative_flops: Option<u64>,
    pub final_flops: u64,
    pub final_step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMetric {
    TokenAccuracy,
    ExactMatch,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopsComparison {
    pub metric: TargetMetric,
    pub threshold: f64,
    pub full: Reach,
    pub ablated: Reach,
    /// Ablated FLOPs over full FLOPs to the target; absent unless both
    /// runs reached it.
    pub speedup: Option<f64>,
}

pub fn reach(log: &[MetricsRow], metric: TargetMetric, threshold: f64) -> Reach {
    let mut out = Reach {
        step: None,
        cumulative_flops: None,
        final_flops: 0,
        final_step: 0,
    };
    for row in log {
        match row {
            MetricsRow::Train(t) => {
                out.final_flops = out.final_flops.max(t.cumulative_flops);
                out.final_step = out.final_step.max(t.step);
            }
            MetricsRow::Eval(e) => {
                let value = match metric {
                    TargetMetric::TokenAccuracy => e.token_accuracy,
                    TargetMetric::ExactMatch => e.exact_match,
                };
                if out.step.is_none() && value >= threshold {
                    out.step = Some(e.step);
                    out.cumulative_flops = Some(e.cumulative_flops);
                }
            }
        }
    }
    out
}

/// Cumulative FLOPs each run needed to reach `threshold`, and their ratio.
pub fn training_flops_report(full: &[MetricsRow], ablated: &[MetricsRow], metric: TargetMetric, threshold: f64) -> FlopsComparison {
    let full = reach(full, metric, threshold);
    let ablated = reach(ablated, metric, threshold);
    let speedup = match (full.cumulative_flops, ablated.cumulative_flops) {
        (Some(f), Some(a)) if f > 0 => Some(a as f64 / f as f64),
        _ => None,
    };
    FlopsComparison {
        metric,
        threshold,
        full,
        ablated,
        speedup,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::metrics::{EvalRow, TrainRow};

    fn config() -> ModelConfig {
        ModelConfig {
            vocab_size: 30,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn decoder_exceeds_encoder_at_equal_lengths() {
        let c = config();
        let o = FlopsOptions::default();
        // encoder sees 11 positions with <LEN>; give the decoder the same
        let enc = flops_estimate(&c, 10, 11, Module::Encoder, o);
        let dec = flops_estimate(&c, 10, 11, Module::Decoder, o);
        assert!(dec > enc);
    }

    #[test]
    fn reviewer_swaps_only_the_output_head() {
        let c = config();
        let o = FlopsOptions::default();
        let (s, l) = (9, 12);
        let dec = flops_estimate(&c, s, l, Module::Decoder, o);
        let rev = flops_estimate(&c, s, l, Module::Reviewer, o);
        let (l, d, v) = (l as u64, c.model_dim as u64, c.vocab_size as u64);
        assert_eq!(rev, dec - 2 * l * d * v + 2 * l * d);
        assert!(rev < dec);
    }

    #[test]
    fn hand_count_for_a_tiny_encoder() {
        let c = ModelConfig {
            layers: 1,
            model_dim: 2,
            ffn_dim: 3,
            heads: 1,
            vocab_size: 10,
            max_target_len: 4,
            ..ModelConfig::default()
        };
        // s = 2: attention 2·(4·2·4 + 2·4·2) = 96, ffn 2·2·2·2·3 = 48, head 2·2·4 = 16
        assert_eq!(flops_estimate(&c, 1, 1, Module::Encoder, FlopsOptions::default()), 160);
    }

    #[test]
    fn doubling_target_more_than_doubles_decoder() {
        let c = config();
        let o = FlopsOptions::default();
        // the source-side K/V projections do not grow with the target, so
        // the quadratic term has to outweigh them
        let a = flops_estimate(&c, 2, 20, Module::Decoder, o);
        let b = flops_estimate(&c, 2, 40, Module::Decoder, o);
        assert!(b > 2 * a);
        let a = flops_estimate(&c, 10, 10, Module::Decoder, o);
        let b = flops_estimate(&c, 10, 20, Module::Decoder, o);
        let fixed = flops_estimate(&c, 10, 0, Module::Decoder, o);
        assert!(b - fixed > 2 * (a - fixed));
    }

    #[test]
    fn linear_in_layers_and_ffn_width() {
        let o = FlopsOptions::default();
        for m in Module::ALL {
            let at = |layers: usize, ffn: usize| {
                let c = ModelConfig { layers, ffn_dim: ffn, ..config() };
                flops_estimate(&c, 7, 9, m, o) as i128
            };
            assert_eq!(at(3, 256) - at(2, 256), at(2, 256) - at(1, 256));
            assert_eq!(at(2, 300) - at(2, 200), at(2, 200) - at(2, 100));
        }
    }

    #[test]
    fn nonlinear_terms_only_add() {
        let c = config();
        for m in Module::ALL {
            let base = flops_estimate(&c, 5, 6, m, FlopsOptions::default());
            let more = flops_estimate(&c, 5, 6, m, FlopsOptions { include_nonlinear: true });
            assert!(more > base);
        }
    }

    #[test]
    fn training_step_with_review_costs_more() {
        let c = config();
        let batch = Batch::from_rows(vec![vec![4, 6, 7]], vec![vec![6, 7, 2]], vec![vec![0]], vec![0]);
        assert!(batch_training_flops(&c, &batch, true) > batch_training_flops(&c, &batch, false));
        let table = format_flops_table(&c, 10, 11, FlopsOptions::default());
        assert!(table.contains("Module\tEncoder\tDecoder\tReviewer"));
    }

    fn log(points: &[(u64, f64)]) -> Vec<MetricsRow> {
        points
            .iter()
            .flat_map(|&(step, acc)| {
                [
                    MetricsRow::Train(TrainRow {
                        step,
                        lr: 0.0,
                        l_dec: 0.0,
                        l_rev: 0.0,
                        l_len: 0.0,
                        total: 0.0,
                        tokens: 1,
                        cumulative_flops: step * 10,
                    }),
                    MetricsRow::Eval(EvalRow {
                        step,
                        examples: 1,
                        exact_match: acc,
                        token_accuracy: acc,
                        length_accuracy: acc,
                        cumulative_flops: step * 10,
                    }),
                ]
            })
            .collect()
    }

    #[test]
    fn identical_logs_have_unit_ratio() {
        let a = log(&[(100, 50.0), (200, 96.0)]);
        let r = training_flops_report(&a, &a, TargetMetric::TokenAccuracy, 95.0);
        assert_eq!(r.speedup, Some(1.0));
        assert_eq!(r.full.step, Some(200));
    }

    #[test]
    fn unreached_target_omits_the_ratio() {
        let a = log(&[(100, 50.0), (200, 96.0)]);
        let b = log(&[(100, 50.0), (200, 60.0)]);
        let r = training_flops_report(&a, &b, TargetMetric::TokenAccuracy, 95.0);
        assert_eq!(r.speedup, None);
        assert_eq!(r.ablated.step, None);
        assert_eq!(r.ablated.final_flops, 2000);
        let faster = training_flops_report(&log(&[(100, 97.0)]), &a, TargetMetric::ExactMatch, 95.0);
        assert_eq!(faster.speedup, Some(2.0));
    }
}
