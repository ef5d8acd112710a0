//! Run directories: training with checkpoints and resume, final scoring,
//! and paired comparison of finished runs.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{DataSource, RunConfig};
use crate::analysis::{
    bleu, exact_match, length_accuracy, repetition_rate, token_accuracy, training_flops_report, FlopsComparison,
    Smoothing, TargetMetric,
};
use crate::corpus::io::read_tsv;
use crate::corpus::{encode_pairs, generate_split, SentencePair, TextPair, TokenId, Vocab};
use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::training::{
    decode_pairs, parse_metrics_log, Finish, MetricsRow, TrainObserver, Trainer,
};

pub const CONFIG_FILE: &str = "config.txt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
/// Written last; its presence marks a finished run.
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRequest {
    /// Parent of the run directory.
    pub out_dir: PathBuf,
    pub resume: bool,
    /// Halt (resumably) once this many steps are done.
    pub stop_after: Option<u64>,
}

/// Scores of the final model on the whole dev set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinalScores {
    pub examples: usize,
    pub bleu: f64,
    pub exact_match: f64,
    pub token_accuracy: f64,
    pub length_accuracy: f64,
    pub repetition_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    /// "full" or "cmtm-only".
    pub tag: String,
    pub config_hash: String,
    pub seed: u64,
    pub steps: u64,
    pub early_stop: bool,
    pub cumulative_flops: u64,
    pub scores: FinalScores,
}

/// What a `train` invocation left behind.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub step: u64,
    pub complete: bool,
}

fn load_data(config: &RunConfig) -> Result<(Vec<TextPair>, Vec<TextPair>)> {
    match &config.data {
        DataSource::Synthetic {
            task,
            train_pairs,
            dev_pairs,
            max_len,
        } => generate_split(*task, *train_pairs, *dev_pairs, *max_len, config.train.seed),
        DataSource::Files { train, dev } => Ok((read_tsv(train)?, read_tsv(dev)?)),
    }
}

fn vocab_from(train: &[TextPair], min_count: usize) -> Result<Vocab> {
    Vocab::build(train.iter().map(|p| (p.source.as_str(), p.target.as_str())), min_count)
}

/// The vocabulary a training run with `config` would build.
pub fn build_vocab(config: &RunConfig) -> Result<Vocab> {
    vocab_from(&load_data(config)?.0, config.min_count)
}

fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    let tmp = dir.join(format!("{CHECKPOINT_FILE}.tmp"));
    fs::write(&tmp, ckpt.to_bytes())?;
    fs::rename(&tmp, dir.join(CHECKPOINT_FILE))?;
    Ok(())
}

fn row_step(row: &MetricsRow) -> u64 {
    match row {
        MetricsRow::Train(r) => r.step,
        MetricsRow::Eval(r) => r.step,
    }
}

#[derive(Serialize)]
struct TimingRow {
    step: u64,
    seconds: f64,
    tokens_per_second: f64,
}

struct Observer<'a, F> {
    dir: &'a Path,
    metrics: File,
    timing: File,
    checkpoint_interval: u64,
    stop_after: Option<u64>,
    clock: Instant,
    progress: F,
}

impl<F: FnMut(&str) -> Result<()>> TrainObserver for Observer<'_, F> {
    fn row(&mut self, row: &MetricsRow) -> Result<()> {
        self.metrics.write_all(row.to_line().as_bytes())?;
        match row {
            MetricsRow::Train(r) => {
                let seconds = self.clock.elapsed().as_secs_f64();
                self.clock = Instant::now();
                let timing = TimingRow {
                    step: r.step,
                    seconds,
                    tokens_per_second: r.tokens as f64 / seconds.max(1e-9),
                };
                writeln!(self.timing, "{}", serde_json::to_string(&timing)?)?;
            }
            MetricsRow::Eval(_) => (self.progress)(row.to_line().trim_end())?,
        }
        Ok(())
    }

    fn step_end(&mut self, trainer: &Trainer) -> Result<bool> {
        let step = trainer.state.step;
        let halt = self.stop_after.is_some_and(|n| step >= n);
        if halt || (self.checkpoint_interval > 0 && step % self.checkpoint_interval == 0) {
            self.metrics.flush()?;
            save_checkpoint(self.dir, &trainer.checkpoint())?;
        }
        Ok(!halt)
    }
}

fn final_scores(trainer: &Trainer) -> Result<FinalScores> {
    let dev = trainer.dev();
    if dev.is_empty() {
        return Err(Error::InvalidArgument("no dev examples to score".into()));
    }
    let (hyps, predicted) = decode_pairs(&trainer.model, dev, &trainer.config.eval_decode)?;
    let refs: Vec<Vec<TokenId>> = dev.iter().map(|p| p.target.clone()).collect();
    let actual: Vec<usize> = dev.iter().map(|p| p.target.len() + 1).collect();
    Ok(FinalScores {
        examples: dev.len(),
        bleu: bleu(&refs, &hyps, 4, Smoothing::None)?.score,
        exact_match: exact_match(&refs, &hyps)?,
        token_accuracy: token_accuracy(&refs, &hyps)?,
        length_accuracy: length_accuracy(&predicted, &actual)?,
        repetition_rate: repetition_rate(&hyps)?,
    })
}

/// Keeps the rows at or before `step`, byte for byte.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    let text = if path.is_file() { fs::read_to_string(path)? } else { String::new() };
    let rows = parse_metrics_log(&text)?;
    let lines = text.lines().filter(|l| !l.trim().is_empty());
    let kept: String = rows
        .iter()
        .zip(lines)
        .filter(|(r, _)| row_step(r) <= step)
        .map(|(_, l)| format!("{l}\n"))
        .collect();
    fs::write(path, kept)?;
    Ok(())
}

/// Trains `config` in `<out_dir>/<hash>-s<seed>`. Eval rows are passed to
/// `progress` as they are logged.
pub fn train_run(
    mut config: RunConfig,
    request: &TrainRequest,
    progress: impl FnMut(&str) -> Result<()>,
) -> Result<RunSummary> {
    let dir = request.out_dir.join(config.run_dir_name());
    let (train_text, dev_text) = load_data(&config)?;
    let vocab = vocab_from(&train_text, config.min_count)?;
    config.train.model.vocab_size = vocab.len();
    let train: Vec<SentencePair> = encode_pairs(&train_text, &vocab)?;
    let dev: Vec<SentencePair> = encode_pairs(&dev_text, &vocab)?;
    let config_text = config.to_text();

    let mut trainer = if request.resume {
        let ckpt_path = dir.join(CHECKPOINT_FILE);
        if !ckpt_path.is_file() {
            return Err(Error::IncompleteRun(format!("{} has no checkpoint to resume", dir.display())));
        }
        let on_disk = fs::read_to_string(dir.join(CONFIG_FILE))?;
        if on_disk != config_text {
            return Err(Error::ConfigMismatch {
                field: CONFIG_FILE.into(),
                expected: on_disk,
                actual: config_text,
            });
        }
        if dir.join(SUMMARY_FILE).is_file() {
            let ckpt = Checkpoint::load(&ckpt_path)?;
            return Ok(RunSummary {
                run_dir: dir,
                step: ckpt.step,
                complete: true,
            });
        }
        let ckpt = Checkpoint::load(&ckpt_path)?;
        let trainer = Trainer::resume(config.train.clone(), &vocab, train, dev, &ckpt)?;
        truncate_metrics(&dir.join(METRICS_FILE), trainer.state.step)?;
        trainer
    } else {
        fs::create_dir_all(&dir)?;
        for stale in [SUMMARY_FILE, CHECKPOINT_FILE, METRICS_FILE, TIMING_FILE] {
            let p = dir.join(stale);
            if p.exists() {
                fs::remove_file(p)?;
            }
        }
        fs::write(dir.join(CONFIG_FILE), &config_text)?;
        vocab.save(dir.join(VOCAB_FILE))?;
        Trainer::new(config.train.clone(), &vocab, train, dev)?
    };

    let append = |name: &str| OpenOptions::new().create(true).append(true).open(dir.join(name));
    let mut observer = Observer {
        dir: &dir,
        metrics: append(METRICS_FILE)?,
        timing: append(TIMING_FILE)?,
        checkpoint_interval: config.checkpoint_interval,
        stop_after: request.stop_after,
        clock: Instant::now(),
        progress,
    };
    let finish = if request.stop_after.is_some_and(|n| trainer.state.step >= n) {
        Finish::Halted
    } else {
        trainer.run(&mut observer)?
    };
    let step = trainer.state.step;
    if finish == Finish::Halted {
        return Ok(RunSummary {
            run_dir: dir,
            step,
            complete: false,
        });
    }
    save_checkpoint(&dir, &trainer.checkpoint())?;
    let summary = Summary {
        tag: if config.is_ablated() { "cmtm-only" } else { "full" }.into(),
        config_hash: config.hash(),
        seed: config.train.seed,
        steps: step,
        early_stop: finish == Finish::EarlyStop,
        cumulative_flops: trainer.state.cumulative_flops,
        scores: final_scores(&trainer)?,
    };
    fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(RunSummary {
        run_dir: dir,
        step,
        complete: true,
    })
}

/// A finished run's summary and metrics log.
pub fn load_run(dir: &Path) -> Result<(Summary, Vec<MetricsRow>)> {
    let summary_path = dir.join(SUMMARY_FILE);
    let metrics_path = dir.join(METRICS_FILE);
    if !summary_path.is_file() || !metrics_path.is_file() {
        return Err(Error::IncompleteRun(format!(
            "{} lacks {SUMMARY_FILE} or {METRICS_FILE}",
            dir.display()
        )));
    }
    let summary: Summary = serde_json::from_str(&fs::read_to_string(summary_path)?)?;
    let log = parse_metrics_log(&fs::read_to_string(metrics_path)?)?;
    Ok((summary, log))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunInfo {
    pub dir: PathBuf,
    pub tag: String,
    pub steps: u64,
    pub cumulative_flops: u64,
    pub flops_per_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub run_a: RunInfo,
    pub run_b: RunInfo,
    /// `run_a` in the full slot, `run_b` in the ablated one; the speedup is
    /// b's FLOPs to target over a's.
    pub target: FlopsComparison,
    /// Final dev scores, b minus a.
    pub deltas: FinalScoreDeltas,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinalScoreDeltas {
    pub bleu: f64,
    pub exact_match: f64,
    pub token_accuracy: f64,
    pub length_accuracy: f64,
    pub repetition_rate: f64,
}

fn info(dir: &Path, s: &Summary) -> RunInfo {
    RunInfo {
        dir: dir.to_path_buf(),
        tag: s.tag.clone(),
        steps: s.steps,
        cumulative_flops: s.cumulative_flops,
        flops_per_step: if s.steps == 0 { 0.0 } else { s.cumulative_flops as f64 / s.steps as f64 },
    }
}

pub fn compare_runs(a: &Path, b: &Path, metric: TargetMetric, threshold: f64) -> Result<CompareReport> {
    let (sa, la) = load_run(a)?;
    let (sb, lb) = load_run(b)?;
    let (x, y) = (&sa.scores, &sb.scores);
    Ok(CompareReport {
        run_a: info(a, &sa),
        run_b: info(b, &sb),
        target: training_flops_report(&la, &lb, metric, threshold),
        deltas: FinalScoreDeltas {
            bleu: y.bleu - x.bleu,
            exact_match: y.exact_match - x.exact_match,
            token_accuracy: y.token_accuracy - x.token_accuracy,
            length_accuracy: y.length_accuracy - x.length_accuracy,
            repetition_rate: y.repetition_rate - x.repetition_rate,
        },
    })
}
