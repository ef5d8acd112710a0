//! Command-line entry point: configuration, run directories, and thin
//! wrappers over training, decoding and analysis.

mod config;
mod run;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::{key_help, parse_config_text, DataSource, RunConfig, ENV_PREFIX, KEYS};
pub use run::{
    build_vocab, compare_runs, load_run, train_run, CompareReport, FinalScoreDeltas, FinalScores, RunInfo, RunSummary,
    Summary, TrainRequest, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE, SUMMARY_FILE, TIMING_FILE, VOCAB_FILE,
};

use crate::analysis::{
    bleu_text, cosine_map, exact_match, format_flops_table, length_bucket_scores, repetition_rate, token_accuracy,
    FlopsOptions, MetricsRecord, Smoothing, TargetMetric,
};
use crate::corpus::io::read_lines;
use crate::corpus::{TokenId, Vocab, LEN};
use crate::decoding::{greedy_ar_decode, mask_predict_batch, DecodeOptions, DecodeResult, RemaskRule};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Model};

#[derive(Debug, Parser)]
#[command(name = "cmtm", version, about = "Conditional masked translation with a self-review decoder", after_help = key_help())]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes a run directory named by config hash and seed.
    #[command(after_help = key_help())]
    Train(TrainArgs),
    /// Mask-Predict (or greedy) decoding of a source file.
    Decode(DecodeArgs),
    /// Score hypotheses against references.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Diagnostics: FLOPs, cosine maps, repetition, length buckets.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Compare two finished runs (training FLOPs to a target and final score deltas).
    Compare(CompareArgs),
    /// Per-module FLOPs for a config.
    Flops(FlopsArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Force the review loss weight to 0 (run tagged "cmtm-only").
    #[arg(long)]
    pub ablate_review: bool,
    /// Continue from the run directory's checkpoint.
    #[arg(long)]
    pub resume: bool,
    /// Leave the run resumable after this many total steps.
    #[arg(long)]
    pub stop_after: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// One source sentence per line.
    #[arg(long)]
    pub input: PathBuf,
    /// Defaults to vocab.txt next to the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Check the checkpoint against this run config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub iterations: usize,
    #[arg(long, default_value_t = 5)]
    pub length_beam: usize,
    /// Re-mask slots below this probability instead of the decaying count.
    #[arg(long)]
    pub remask_threshold: Option<f64>,
    /// Write per-iteration tokens, confidences and re-masked slots here.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Left-to-right greedy decoding through the reviewer layers.
    #[arg(long)]
    pub greedy: bool,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PairFiles {
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub hyp: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Corpus BLEU (multi-bleu style, 4-grams).
    Bleu {
        #[command(flatten)]
        files: PairFiles,
        /// Add-one smoothing on 2- to 4-gram precisions.
        #[arg(long)]
        smooth: bool,
    },
    /// Exact match, token accuracy and length accuracy.
    Accuracy {
        #[command(flatten)]
        files: PairFiles,
    },
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Per-module FLOPs for a config (same as `cmtm flops`).
    Flops(FlopsArgs),
    /// Cosine similarity between final decoder states of one decoded sentence (CSV).
    Cosine {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Zero-based line of the input file.
        #[arg(long, default_value_t = 0)]
        line: usize,
        #[arg(long, default_value_t = 10)]
        iterations: usize,
        #[arg(long, default_value_t = 5)]
        length_beam: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Percentage of tokens equal to their predecessor.
    Repetition {
        #[arg(long)]
        hyp: PathBuf,
    },
    /// BLEU per reference-length bucket.
    Buckets {
        #[command(flatten)]
        files: PairFiles,
        /// Bucket edges; bucket i covers [edge i, edge i+1).
        #[arg(long, value_delimiter = ',', default_value = "1,10,20,30,40,50,60")]
        edges: Vec<usize>,
        #[arg(long)]
        smooth: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    TokenAccuracy,
    ExactMatch,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// The run with the review loss.
    pub run_a: PathBuf,
    /// The run it is compared against.
    pub run_b: PathBuf,
    #[arg(long, value_enum, default_value = "token-accuracy")]
    pub metric: MetricArg,
    #[arg(long, default_value_t = 95.0)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub src_len: usize,
    #[arg(long, default_value_t = 20)]
    pub tgt_len: usize,
    /// Count softmax and layer norm work.
    #[arg(long)]
    pub include_nonlinear: bool,
    /// Vocabulary size for the output projection (defaults to the vocab a
    /// training run would build).
    #[arg(long)]
    pub vocab_size: Option<usize>,
}

/// Parses `args` (program name first) and runs the command, writing reports
/// to `out`. Help and usage errors come back as [`Error::InvalidArgument`].
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    execute(cli, out)
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a, out),
        Command::Decode(a) => cmd_decode(a, out),
        Command::Eval(c) => cmd_eval(c, out),
        Command::Analyze(c) => cmd_analyze(c, out),
        Command::Compare(a) => cmd_compare(a, out),
        Command::Flops(a) => cmd_flops(a, out),
    }
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut config = RunConfig::load(&a.config)?;
    if a.ablate_review {
        config.ablate_review();
    }
    let request = TrainRequest {
        out_dir: a.out,
        resume: a.resume,
        stop_after: a.stop_after,
    };
    let summary = train_run(config, &request, |line| {
        writeln!(out, "{line}")?;
        Ok(())
    })?;
    writeln!(out, "{}", serde_json::to_string(&summary)?)?;
    Ok(())
}

fn default_vocab_path(checkpoint: &Path, vocab: Option<PathBuf>) -> PathBuf {
    vocab.unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join(VOCAB_FILE))
}

/// Loads a checkpoint and its vocabulary and checks they agree.
fn load_model(checkpoint: &Path, vocab: Option<PathBuf>) -> Result<(Model, Vocab)> {
    let vocab_path = default_vocab_path(checkpoint, vocab);
    if !checkpoint.is_file() {
        return Err(Error::InvalidArgument(format!("checkpoint `{}` not found", checkpoint.display())));
    }
    if !vocab_path.is_file() {
        return Err(Error::InvalidArgument(format!("vocabulary `{}` not found", vocab_path.display())));
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    let vocab = Vocab::load(&vocab_path)?;
    if ckpt.config.vocab_size != vocab.len() {
        return Err(Error::ConfigMismatch {
            field: "vocab_size".into(),
            expected: ckpt.config.vocab_size.to_string(),
            actual: vocab.len().to_string(),
        });
    }
    Ok((Model::from_checkpoint(&ckpt)?, vocab))
}

/// Encoder input for a source line: `<LEN>` then the tokens.
fn encode_source(vocab: &Vocab, line: &str) -> Vec<TokenId> {
    std::iter::once(LEN).chain(vocab.encode(line)).collect()
}

fn write_output(path: Option<&Path>, text: &str, out: &mut dyn Write) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text)?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

fn join<T: ToString>(xs: &[T], sep: &str) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(sep)
}

/// One line per sentence, hypothesis and iteration.
pub fn format_trace(results: &[DecodeResult]) -> String {
    let mut s = String::from("# sentence\tlength\trank\titeration\ttokens\tconfidences\tremasked\n");
    for (i, r) in results.iter().enumerate() {
        for (h, hyp) in r.hypotheses.iter().enumerate() {
            for it in &hyp.trace {
                let conf: Vec<String> = it.confidences.iter().map(|c| format!("{c:.6}")).collect();
                s.push_str(&format!(
                    "{i}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                    hyp.length,
                    hyp.length_rank,
                    it.iteration,
                    join(&it.tokens, " "),
                    conf.join(" "),
                    join(&it.remasked, " "),
                ));
            }
            s.push_str(&format!(
                "{i}\t{}\t{}\tscore={:.6}{}\n",
                hyp.length,
                hyp.length_rank,
                hyp.score,
                if h == r.best { "\tbest" } else { "" }
            ));
        }
    }
    s
}

fn cmd_decode(a: DecodeArgs, out: &mut dyn Write) -> Result<()> {
    if !a.input.is_file() {
        return Err(Error::InvalidArgument(format!("input `{}` not found", a.input.display())));
    }
    let (model, vocab) = load_model(&a.checkpoint, a.vocab)?;
    if let Some(path) = &a.config {
        let mut config = RunConfig::load(path)?;
        config.train.model.vocab_size = vocab.len();
        model.config().ensure_compatible(&config.train.model)?;
    }
    let sources: Vec<Vec<TokenId>> = read_lines(&a.input)?.iter().map(|l| encode_source(&vocab, l)).collect();
    let mut text = String::new();
    if a.greedy {
        let max = model.config().max_target_len;
        for src in &sources {
            let hyp = greedy_ar_decode(&model, src, max)?;
            text.push_str(&vocab.decode(&hyp));
            text.push('\n');
        }
    } else {
        let opts = DecodeOptions {
            iterations: a.iterations,
            length_beam: a.length_beam,
            remask: match a.remask_threshold {
                Some(t) => RemaskRule::Threshold(t),
                None => RemaskRule::Count,
            },
            trace: a.trace.is_some(),
        };
        let results = mask_predict_batch(&model, &sources, &opts)?;
        for r in &results {
            text.push_str(&vocab.decode(r.output()));
            text.push('\n');
        }
        if let Some(path) = &a.trace {
            fs::write(path, format_trace(&results))?;
        }
    }
    write_output(a.output.as_deref(), &text, out)
}

fn read_pairs(files: &PairFiles) -> Result<(Vec<String>, Vec<String>)> {
    for p in [&files.reference, &files.hyp] {
        if !p.is_file() {
            return Err(Error::InvalidArgument(format!("`{}` not found", p.display())));
        }
    }
    Ok((read_lines(&files.reference)?, read_lines(&files.hyp)?))
}

fn tokens(lines: &[String]) -> Vec<Vec<&str>> {
    lines.iter().map(|l| l.split_whitespace().collect()).collect()
}

fn smoothing(smooth: bool) -> Smoothing {
    if smooth {
        Smoothing::AddOne
    } else {
        Smoothing::None
    }
}

fn print_records(records: &[MetricsRecord], out: &mut dyn Write) -> Result<()> {
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

fn cmd_eval(c: EvalCommand, out: &mut dyn Write) -> Result<()> {
    match c {
        EvalCommand::Bleu { files, smooth } => {
            let (refs, hyps) = read_pairs(&files)?;
            let score = bleu_text(&refs, &hyps, smoothing(smooth))?;
            let p: Vec<String> = score.precisions.iter().map(|p| format!("{:.1}", 100.0 * p)).collect();
            writeln!(
                out,
                "BLEU = {:.2}, {} (BP={:.3}, hyp_len={}, ref_len={})",
                score.score,
                p.join("/"),
                score.brevity_penalty,
                score.hyp_len,
                score.ref_len
            )?;
        }
        EvalCommand::Accuracy { files } => {
            let (refs, hyps) = read_pairs(&files)?;
            let (r, h) = (tokens(&refs), tokens(&hyps));
            let lengths_match = r.iter().zip(&h).filter(|(a, b)| a.len() == b.len()).count();
            print_records(
                &[
                    MetricsRecord::new("exact_match", exact_match(&r, &h)?),
                    MetricsRecord::new("token_accuracy", token_accuracy(&r, &h)?),
                    MetricsRecord::new("length_accuracy", 100.0 * lengths_match as f64 / r.len() as f64),
                ],
                out,
            )?;
        }
    }
    Ok(())
}

fn cmd_analyze(c: AnalyzeCommand, out: &mut dyn Write) -> Result<()> {
    match c {
        AnalyzeCommand::Flops(a) => cmd_flops(a, out),
        AnalyzeCommand::Cosine {
            checkpoint,
            input,
            vocab,
            line,
            iterations,
            length_beam,
            output,
        } => {
            let (model, vocab) = load_model(&checkpoint, vocab)?;
            let lines = read_lines(&input)?;
            let sentence = lines
                .get(line)
                .ok_or_else(|| Error::InvalidArgument(format!("input has {} lines, asked for line {line}", lines.len())))?;
            let src = encode_source(&vocab, sentence);
            let opts = DecodeOptions {
                iterations,
                length_beam,
                ..DecodeOptions::default()
            };
            let result = mask_predict_batch(&model, &[src.clone()], &opts)?.remove(0);
            let h_enc = model.encode(&src)?;
            let states = model.decode(&h_enc, &result.best().final_input)?;
            let map = cosine_map(&states);
            write_output(output.as_deref(), &map.to_csv(), out)?;
            if output.is_some() {
                if let Some(mean) = map.adjacent_mean() {
                    print_records(
                        &[MetricsRecord::new("adjacent_cosine_mean", mean).tag("positions", states.rows())],
                        out,
                    )?;
                }
            }
            Ok(())
        }
        AnalyzeCommand::Repetition { hyp } => {
            let lines = read_lines(&hyp)?;
            let rate = repetition_rate(&tokens(&lines))?;
            print_records(
                &[MetricsRecord::new("repetition_rate", rate).tag("denominator", "all tokens")],
                out,
            )
        }
        AnalyzeCommand::Buckets { files, edges, smooth } => {
            let (refs, hyps) = read_pairs(&files)?;
            let report = length_bucket_scores(&tokens(&refs), &tokens(&hyps), &edges, smoothing(smooth))?;
            let mut records: Vec<MetricsRecord> = report
                .buckets
                .iter()
                .map(|b| {
                    MetricsRecord::new("bucket_bleu", b.bleu)
                        .tag("lo", b.lo)
                        .tag("hi", b.hi)
                        .tag("pairs", b.pairs)
                        .tag("low_confidence", b.low_confidence)
                })
                .collect();
            for (lo, hi) in &report.empty {
                records.push(MetricsRecord::new("bucket_empty", 0.0).tag("lo", lo).tag("hi", hi));
            }
            records.push(MetricsRecord::new("bucket_dropped", report.dropped as f64));
            print_records(&records, out)
        }
    }
}

fn cmd_flops(a: FlopsArgs, out: &mut dyn Write) -> Result<()> {
    let config = RunConfig::load(&a.config)?;
    let mut model = config.train.model.clone();
    model.vocab_size = match a.vocab_size {
        Some(v) => v,
        None => build_vocab(&config)?.len(),
    };
    let opts = FlopsOptions {
        include_nonlinear: a.include_nonlinear,
    };
    write!(out, "{}", format_flops_table(&model, a.src_len, a.tgt_len, opts))?;
    Ok(())
}

fn cmd_compare(a: CompareArgs, out: &mut dyn Write) -> Result<()> {
    let metric = match a.metric {
        MetricArg::TokenAccuracy => TargetMetric::TokenAccuracy,
        MetricArg::ExactMatch => TargetMetric::ExactMatch,
    };
    let report = compare_runs(&a.run_a, &a.run_b, metric, a.threshold)?;
    writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
    Ok(())
}
