//! The training loop: epoch batching, joint steps, periodic evaluation,
//! checkpoints with exact resume, and early stopping.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::metrics::{EvalRow, MetricsRow, TrainRow};
use super::optim::{lr_schedule, Adam, AdamConfig};
use super::step::{train_step, StepOptions, StepSeeds};
use crate::analysis::{batch_training_flops, exact_match, length_accuracy, token_accuracy};
use crate::corpus::{make_batches, Batch, BatchConfig, SentencePair, TokenId, Vocab, LEN};
use crate::decoding::{mask_predict_batch, DecodeOptions};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Model, ModelConfig, OPTIM_PREFIX};

/// Mixes a run seed with a stream tag and an index (splitmix64 finaliser).
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const EPOCH_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;
const SAMPLING_STREAM: u64 = 3;
const EMA_DECAY: f64 = 0.99;

/// Thresholds (percentages) that end training early once every given one
/// is met at an evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StopRule {
    pub token_accuracy: Option<f64>,
    pub exact_match: Option<f64>,
}

impl StopRule {
    pub fn is_set(&self) -> bool {
        self.token_accuracy.is_some() || self.exact_match.is_some()
    }

    fn met(&self, row: &EvalRow) -> bool {
        self.is_set()
            && self.token_accuracy.is_none_or(|t| row.token_accuracy >= t)
            && self.exact_match.is_none_or(|t| row.exact_match >= t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub steps: u64,
    pub batch: BatchConfig,
    pub warmup: u64,
    pub peak_lr: f64,
    pub adam: AdamConfig,
    pub step: StepOptions,
    /// Evaluate every this many steps; 0 disables periodic evaluation.
    pub eval_interval: u64,
    /// Dev examples decoded per evaluation (the first ones of the dev set).
    pub eval_examples: usize,
    pub eval_decode: DecodeOptions,
    pub stop: StopRule,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Updates applied so far.
    pub step: u64,
    pub epoch: u64,
    /// Next batch within the current epoch.
    pub batch_index: usize,
    pub adam: Adam,
    /// Exponential moving average of `l_dec`.
    pub loss_ema: Option<f64>,
    pub cumulative_flops: u64,
}

/// Where training ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Finish {
    Steps,
    EarlyStop,
    /// The observer asked to stop; the run can be resumed.
    Halted,
}

/// Receives every metrics row, then a call once all rows of a step are out
/// (the point where a checkpoint matches the log). Returning `false` from
/// `step_end` halts the run.
pub trait TrainObserver {
    fn row(&mut self, row: &MetricsRow) -> Result<()>;

    fn step_end(&mut self, _trainer: &Trainer) -> Result<bool> {
        Ok(true)
    }
}

/// Collects rows in memory.
impl TrainObserver for Vec<MetricsRow> {
    fn row(&mut self, row: &MetricsRow) -> Result<()> {
        self.push(row.clone());
        Ok(())
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub state: TrainState,
    vocab: Vocab,
    train: Vec<SentencePair>,
    dev: Vec<SentencePair>,
    epoch_batches: Option<(u64, Vec<Batch>)>,
}

impl Trainer {
    pub fn new(config: TrainConfig, vocab: &Vocab, train: Vec<SentencePair>, dev: Vec<SentencePair>) -> Result<Self> {
        if config.model.vocab_size != vocab.len() {
            return Err(Error::ConfigMismatch {
                field: "vocab_size".into(),
                expected: vocab.len().to_string(),
                actual: config.model.vocab_size.to_string(),
            });
        }
        if train.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let model = Model::new(config.model.clone(), config.seed)?;
        let state = TrainState {
            step: 0,
            epoch: 0,
            batch_index: 0,
            adam: Adam::new(config.adam, &model.params),
            loss_ema: None,
            cumulative_flops: 0,
        };
        Ok(Self {
            config,
            model,
            state,
            vocab: vocab.clone(),
            train,
            dev,
            epoch_batches: None,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(config: TrainConfig, vocab: &Vocab, train: Vec<SentencePair>, dev: Vec<SentencePair>, ckpt: &Checkpoint) -> Result<Self> {
        ckpt.config.ensure_compatible(&config.model)?;
        let meta = |key: &str| -> Result<&str> {
            ckpt.meta_value(key)
                .ok_or_else(|| Error::Checkpoint(format!("missing meta `{key}`")))
        };
        let num = |key: &str| -> Result<u64> {
            meta(key)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("meta `{key}` is not an integer")))
        };
        let seed = num("seed")?;
        if seed != config.seed {
            return Err(Error::ConfigMismatch {
                field: "seed".into(),
                expected: config.seed.to_string(),
                actual: seed.to_string(),
            });
        }
        let mut trainer = Self::new(config, vocab, train, dev)?;
        trainer.model = Model::from_checkpoint(ckpt)?;
        let mut adam = Adam::new(trainer.config.adam, &trainer.model.params);
        for (name, tensor) in &ckpt.tensors {
            let Some(rest) = name.strip_prefix(OPTIM_PREFIX) else {
                continue;
            };
            let (moments, param) = if let Some(p) = rest.strip_prefix("first.") {
                (&mut adam.first, p)
            } else if let Some(p) = rest.strip_prefix("second.") {
                (&mut adam.second, p)
            } else {
                return Err(Error::Checkpoint(format!("unknown optimiser tensor `{name}`")));
            };
            let slot = moments
                .get_mut(param)
                .filter(|t| t.shape() == tensor.shape())
                .ok_or_else(|| Error::Checkpoint(format!("optimiser tensor `{name}` does not match the model")))?;
            *slot = tensor.clone();
        }
        adam.updates = num("adam_updates")?;
        let ema = meta("loss_ema")?;
        trainer.state = TrainState {
            step: ckpt.step,
            epoch: num("epoch")?,
            batch_index: num("batch_index")? as usize,
            adam,
            loss_ema: if ema == "none" {
                None
            } else {
                Some(f64::from_bits(u64::from_str_radix(ema, 16).map_err(|_| {
                    Error::Checkpoint("meta `loss_ema` is not hex bits".into())
                })?))
            },
            cumulative_flops: num("cumulative_flops")?,
        };
        Ok(trainer)
    }

    /// Parameters, optimiser moments and loop position, bit-exact.
    pub fn checkpoint(&self) -> Checkpoint {
        let s = &self.state;
        let meta = vec![
            ("seed".to_owned(), self.config.seed.to_string()),
            ("epoch".to_owned(), s.epoch.to_string()),
            ("batch_index".to_owned(), s.batch_index.to_string()),
            ("adam_updates".to_owned(), s.adam.updates.to_string()),
            ("cumulative_flops".to_owned(), s.cumulative_flops.to_string()),
            (
                "loss_ema".to_owned(),
                s.loss_ema.map_or("none".to_owned(), |v| format!("{:016x}", v.to_bits())),
            ),
        ];
        let mut ckpt = self.model.to_checkpoint(s.step, meta);
        for (kind, moments) in [("first", &s.adam.first), ("second", &s.adam.second)] {
            for (name, t) in moments.named() {
                ckpt.tensors.push((format!("{OPTIM_PREFIX}{kind}.{name}"), t.clone()));
            }
        }
        ckpt
    }

    fn batches_for(&self, epoch: u64) -> Result<Vec<Batch>> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, EPOCH_STREAM, epoch));
        let out = make_batches(&self.train, &self.vocab, &self.config.batch, &mut rng)?.batches;
        if out.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(out)
    }

    fn next_batch(&mut self) -> Result<Batch> {
        loop {
            let epoch = self.state.epoch;
            if self.epoch_batches.as_ref().is_none_or(|(e, _)| *e != epoch) {
                self.epoch_batches = Some((epoch, self.batches_for(epoch)?));
            }
            let batches = &self.epoch_batches.as_ref().expect("just filled").1;
            if let Some(b) = batches.get(self.state.batch_index) {
                self.state.batch_index += 1;
                return Ok(b.clone());
            }
            self.state.epoch += 1;
            self.state.batch_index = 0;
        }
    }

    /// One optimiser update on the next batch.
    pub fn step(&mut self) -> Result<TrainRow> {
        let batch = self.next_batch()?;
        let step = self.state.step;
        let seeds = StepSeeds {
            dropout: derive_seed(self.config.seed, DROPOUT_STREAM, step),
            sampling: derive_seed(self.config.seed, SAMPLING_STREAM, step),
        };
        let lr = lr_schedule(step + 1, self.config.warmup, self.config.peak_lr);
        let loss = train_step(&mut self.model, &mut self.state.adam, &batch, &self.config.step, seeds, lr, step)?;
        self.state.step += 1;
        self.state.cumulative_flops += batch_training_flops(self.model.config(), &batch, self.config.step.review_active());
        self.state.loss_ema = Some(match self.state.loss_ema {
            None => loss.l_dec,
            Some(e) => EMA_DECAY * e + (1.0 - EMA_DECAY) * loss.l_dec,
        });
        Ok(TrainRow {
            step: self.state.step,
            lr,
            l_dec: loss.l_dec,
            l_rev: loss.l_rev,
            l_len: loss.l_len,
            total: loss.total,
            tokens: batch.target_tokens(),
            cumulative_flops: self.state.cumulative_flops,
        })
    }

    /// Mask-Predict on the first `eval_examples` dev pairs.
    pub fn evaluate(&self) -> Result<EvalRow> {
        let n = self.config.eval_examples.min(self.dev.len());
        if n == 0 {
            return Err(Error::InvalidArgument("no dev examples to evaluate".into()));
        }
        let scores = evaluate_pairs(&self.model, &self.dev[..n], &self.config.eval_decode)?;
        Ok(EvalRow {
            step: self.state.step,
            examples: n,
            exact_match: scores.exact_match,
            token_accuracy: scores.token_accuracy,
            length_accuracy: scores.length_accuracy,
            cumulative_flops: self.state.cumulative_flops,
        })
    }

    /// Trains until `steps` or the stop rule, reporting to `observer`.
    pub fn run(&mut self, observer: &mut impl TrainObserver) -> Result<Finish> {
        let interval = self.config.eval_interval;
        let can_eval = interval > 0 && !self.dev.is_empty() && self.config.eval_examples > 0;
        while self.state.step < self.config.steps {
            let row = self.step()?;
            observer.row(&MetricsRow::Train(row))?;
            let last = self.state.step == self.config.steps;
            let mut stop = false;
            if can_eval && (self.state.step % interval == 0 || last) {
                let eval = self.evaluate()?;
                stop = self.config.stop.met(&eval);
                observer.row(&MetricsRow::Eval(eval))?;
            }
            let go_on = observer.step_end(self)?;
            if stop {
                return Ok(Finish::EarlyStop);
            }
            if !go_on {
                return Ok(Finish::Halted);
            }
        }
        Ok(Finish::Steps)
    }

    pub fn dev(&self) -> &[SentencePair] {
        &self.dev
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairScores {
    pub exact_match: f64,
    pub token_accuracy: f64,
    pub length_accuracy: f64,
}

/// Decodes every pair's source and scores against its target (without
/// `<EOS>`). Length accuracy compares the top-1 length with `|y| + 1`.
pub fn evaluate_pairs(model: &Model, pairs: &[SentencePair], opts: &DecodeOptions) -> Result<PairScores> {
    let (hyps, predicted) = decode_pairs(model, pairs, opts)?;
    let refs: Vec<Vec<TokenId>> = pairs.iter().map(|p| p.target.clone()).collect();
    let actual: Vec<usize> = pairs.iter().map(|p| p.target.len() + 1).collect();
    Ok(PairScores {
        exact_match: exact_match(&refs, &hyps)?,
        token_accuracy: token_accuracy(&refs, &hyps)?,
        length_accuracy: length_accuracy(&predicted, &actual)?,
    })
}

const DECODE_CHUNK: usize = 64;

/// Mask-Predict outputs and top-1 predicted lengths, in input order.
pub fn decode_pairs(model: &Model, pairs: &[SentencePair], opts: &DecodeOptions) -> Result<(Vec<Vec<TokenId>>, Vec<usize>)> {
    let mut hyps = Vec::with_capacity(pairs.len());
    let mut lengths = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(DECODE_CHUNK) {
        let sources: Vec<Vec<TokenId>> = chunk
            .iter()
            .map(|p| std::iter::once(LEN).chain(p.source.iter().copied()).collect())
            .collect();
        for r in mask_predict_batch(model, &sources, opts)? {
            hyps.push(r.output().to_vec());
            lengths.push(r.predicted_length);
        }
    }
    Ok((hyps, lengths))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{encode_pairs, generate_split, Task};

    fn setup(steps: u64) -> (TrainConfig, Vocab, Vec<SentencePair>, Vec<SentencePair>) {
        let (train, dev) = generate_split(Task::Copy, 60, 8, 5, 11).unwrap();
        let vocab = Vocab::build(train.iter().map(|p| (p.source.as_str(), p.target.as_str())), 1).unwrap();
        let model = ModelConfig {
            layers: 1,
            model_dim: 8,
            ffn_dim: 16,
            heads: 2,
            vocab_size: vocab.len(),
            max_source_len: 8,
            max_target_len: 8,
            ..ModelConfig::default()
        };
        let config = TrainConfig {
            batch: BatchConfig {
                batch_tokens: 160,
                max_source_len: 8,
                max_target_len: 8,
                mask_eos: true,
            },
            model,
            seed: 5,
            steps,
            warmup: 4,
            peak_lr: 1e-3,
            adam: AdamConfig::default(),
            step: StepOptions::default(),
            eval_interval: 3,
            eval_examples: 4,
            eval_decode: DecodeOptions {
                iterations: 2,
                length_beam: 2,
                ..DecodeOptions::default()
            },
            stop: StopRule::default(),
        };
        let train = encode_pairs(&train, &vocab).unwrap();
        let dev = encode_pairs(&dev, &vocab).unwrap();
        (config, vocab, train, dev)
    }

    struct HaltAt(u64, Vec<MetricsRow>);

    impl TrainObserver for HaltAt {
        fn row(&mut self, row: &MetricsRow) -> Result<()> {
            self.1.push(row.clone());
            Ok(())
        }

        fn step_end(&mut self, trainer: &Trainer) -> Result<bool> {
            Ok(trainer.state.step < self.0)
        }
    }

    #[test]
    fn derived_seeds_differ_across_streams_and_indices() {
        let seeds = [
            derive_seed(1, EPOCH_STREAM, 0),
            derive_seed(1, EPOCH_STREAM, 1),
            derive_seed(1, DROPOUT_STREAM, 0),
            derive_seed(1, SAMPLING_STREAM, 0),
            derive_seed(2, EPOCH_STREAM, 0),
        ];
        let unique: std::collections::HashSet<_> = seeds.iter().collect();
        assert_eq!(unique.len(), seeds.len());
        assert_eq!(derive_seed(1, 1, 0), seeds[0]);
    }

    #[test]
    fn identical_runs_log_identical_rows() {
        let run = || {
            let (c, v, t, d) = setup(7);
            let mut rows = Vec::new();
            let mut trainer = Trainer::new(c, &v, t, d).unwrap();
            assert_eq!(trainer.run(&mut rows).unwrap(), Finish::Steps);
            (rows, trainer.checkpoint().to_bytes())
        };
        let (a, ca) = run();
        let (b, cb) = run();
        assert_eq!(a, b);
        assert!(ca == cb);
        // evals at 3, 6 and the final step
        let evals: Vec<u64> = a
            .iter()
            .filter_map(|r| match r {
                MetricsRow::Eval(e) => Some(e.step),
                _ => None,
            })
            .collect();
        assert_eq!(evals, vec![3, 6, 7]);
    }

    #[test]
    fn resume_continues_bit_exactly() {
        let (c, v, t, d) = setup(9);
        let mut rows = Vec::new();
        let mut straight = Trainer::new(c.clone(), &v, t.clone(), d.clone()).unwrap();
        straight.run(&mut rows).unwrap();

        // 60 short pairs in 160-token batches cross an epoch boundary before step 5
        let mut first = Trainer::new(c.clone(), &v, t.clone(), d.clone()).unwrap();
        let mut halt = HaltAt(5, Vec::new());
        assert_eq!(first.run(&mut halt).unwrap(), Finish::Halted);
        assert!(first.state.epoch >= 1, "epoch {}", first.state.epoch);
        let bytes = first.checkpoint().to_bytes();
        let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
        let mut second = Trainer::resume(c, &v, t, d, &ckpt).unwrap();
        assert_eq!(second.state, first.state);
        let mut rest = Vec::new();
        second.run(&mut rest).unwrap();
        let mut joined = halt.1;
        joined.extend(rest);
        assert_eq!(joined, rows);
        assert!(second.checkpoint().to_bytes() == straight.checkpoint().to_bytes());
    }

    #[test]
    fn resume_rejects_another_seed_or_shape() {
        let (c, v, t, d) = setup(2);
        let mut trainer = Trainer::new(c.clone(), &v, t.clone(), d.clone()).unwrap();
        trainer.run(&mut Vec::new()).unwrap();
        let ckpt = trainer.checkpoint();
        let other_seed = TrainConfig { seed: 6, ..c.clone() };
        match Trainer::resume(other_seed, &v, t.clone(), d.clone(), &ckpt) {
            Err(Error::ConfigMismatch { field, .. }) => assert_eq!(field, "seed"),
            other => panic!("{:?}", other.map(|_| ())),
        }
        let mut wider = c;
        wider.model.ffn_dim = 32;
        match Trainer::resume(wider, &v, t, d, &ckpt) {
            Err(Error::ConfigMismatch { field, .. }) => assert_eq!(field, "ffn_dim"),
            other => panic!("{:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn stop_rule_ends_at_the_first_qualifying_eval() {
        let (mut c, v, t, d) = setup(12);
        c.stop = StopRule {
            token_accuracy: Some(0.0),
            exact_match: None,
        };
        let mut rows = Vec::new();
        let mut trainer = Trainer::new(c, &v, t, d).unwrap();
        assert_eq!(trainer.run(&mut rows).unwrap(), Finish::EarlyStop);
        assert_eq!(trainer.state.step, 3);
        assert!(matches!(rows.last(), Some(MetricsRow::Eval(_))));
    }

    #[test]
    fn flops_accumulate_and_ablation_costs_less() {
        let (c, v, t, d) = setup(4);
        let mut full = Trainer::new(c.clone(), &v, t.clone(), d.clone()).unwrap();
        let mut ablated_config = c;
        ablated_config.step.weights.rev = 0.0;
        let mut ablated = Trainer::new(ablated_config, &v, t, d).unwrap();
        let mut last = 0;
        for _ in 0..4 {
            let row = full.step().unwrap();
            assert!(row.cumulative_flops > last);
            last = row.cumulative_flops;
            ablated.step().unwrap();
        }
        assert!(full.state.cumulative_flops > ablated.state.cumulative_flops);
    }

    #[test]
    fn vocab_size_must_match() {
        let (mut c, v, t, d) = setup(1);
        c.model.vocab_size += 1;
        assert!(matches!(Trainer::new(c, &v, t, d), Err(Error::ConfigMismatch { .. })));
    }
}
