//! One joint forward/backward pass over a batch.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optim::Adam;
use super::loss::{argmax, bce, bce_logit_grad, cross_entropy_with_grad, review_labels};
use crate::corpus::{Batch, TokenId, MASK};
use crate::error::{Error, Result};
use crate::model::tensor::{matmul, matmul_nt, matmul_tn_acc, sigmoid, softmax_in_place, Tensor};
use crate::model::{DecoderPath, Dropout, Model, Packed, Parameters};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub dec: f64,
    pub len: f64,
    pub rev: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            dec: 1.0,
            len: 1.0,
            rev: 1.0,
        }
    }
}

/// How masked slots of `ŷ` are filled for review.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReviewSampling {
    Argmax,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOptions {
    pub weights: LossWeights,
    pub sampling: ReviewSampling,
    /// Keep the review loss from reaching the encoder. Only tests turn this off.
    pub detach_review: bool,
}

impl Default for StepOptions {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            sampling: ReviewSampling::Argmax,
            detach_review: true,
        }
    }
}

impl StepOptions {
    pub fn review_active(&self) -> bool {
        self.weights.rev != 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_dec: f64,
    pub l_rev: f64,
    pub l_len: f64,
    /// Weighted sum of the three terms.
    pub total: f64,
    pub masked_count: usize,
    pub reviewed_count: usize,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.l_dec.is_finite() && self.l_rev.is_finite() && self.l_len.is_finite() && self.total.is_finite()
    }
}

/// Per-step randomness: dropout and review sampling streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepSeeds {
    pub dropout: u64,
    pub sampling: u64,
}

impl StepSeeds {
    pub fn fixed(seed: u64) -> Self {
        Self {
            dropout: seed,
            sampling: seed ^ 0x5eed_5eed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: LossBreakdown,
    pub grads: Parameters,
    /// The reviewed sequences `ŷ` (unshifted), one segment per row.
    pub y_hat: Packed,
    pub labels: Vec<f64>,
}

struct Prepared {
    src: Packed,
    dec_in: Packed,
    gold: Packed,
    masked: Vec<bool>,
}

fn prepare(batch: &Batch) -> Result<Prepared> {
    let mut src_rows = Vec::with_capacity(batch.len());
    let mut in_rows = Vec::with_capacity(batch.len());
    let mut gold_rows = Vec::with_capacity(batch.len());
    let mut masked = Vec::with_capacity(batch.target_tokens());
    for r in 0..batch.len() {
        let tgt = batch.tgt_row(r);
        let mut row_in = tgt.to_vec();
        let mut row_mask = vec![false; tgt.len()];
        if batch.mask_positions[r].is_empty() {
            return Err(Error::InvalidArgument(format!("row {r} has no masked positions")));
        }
        for &t in &batch.mask_positions[r] {
            if t >= tgt.len() {
                return Err(Error::LengthMismatch {
                    expected: tgt.len(),
                    actual: t + 1,
                });
            }
            row_in[t] = MASK;
            row_mask[t] = true;
        }
        src_rows.push(batch.src_row(r));
        in_rows.push(row_in);
        gold_rows.push(tgt);
        masked.extend(row_mask);
    }
    Ok(Prepared {
        src: Packed::from_rows(&src_rows),
        dec_in: Packed::from_rows(&in_rows),
        gold: Packed::from_rows(&gold_rows),
        masked,
    })
}

struct Forward {
    prep: Prepared,
    enc: crate::model::EncoderPass,
    dec: crate::model::DecoderPass,
    d_logits: Tensor,
    len_states: Tensor,
    d_len_logits: Tensor,
    review: Option<(crate::model::DecoderPass, Tensor)>,
    y_hat: Packed,
    labels: Vec<f64>,
    loss: LossBreakdown,
}

fn fill_y_hat(logits: &Tensor, prep: &Prepared, sampling: ReviewSampling, seed: u64) -> Packed {
    let mut ids = prep.gold.ids.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (t, &is_masked) in prep.masked.iter().enumerate() {
        if !is_masked {
            continue;
        }
        ids[t] = match sampling {
            ReviewSampling::Argmax => argmax(logits.row(t)) as TokenId,
            ReviewSampling::Sample => {
                let mut p = logits.row(t).to_vec();
                softmax_in_place(&mut p);
                WeightedIndex::new(&p)
                    .map(|d| d.sample(&mut rng) as TokenId)
                    .unwrap_or_else(|_| argmax(logits.row(t)) as TokenId)
            }
        };
    }
    Packed {
        ids,
        segments: prep.gold.segments.clone(),
    }
}

fn forward(
    model: &Model,
    batch: &Batch,
    opts: &StepOptions,
    seeds: StepSeeds,
    fixed_y_hat: Option<&Packed>,
) -> Result<Forward> {
    let net = model.network();
    let params = &model.params;
    let cfg = model.config();
    let prep = prepare(batch)?;
    let mut dropout = Dropout::new(cfg.dropout, seeds.dropout);
    let w = opts.weights;
    let mut loss = LossBreakdown::default();

    let enc = net.encoder_forward(params, &prep.src, &mut dropout)?;
    let dec = net.decoder_forward(params, &prep.dec_in, &enc.output, &prep.src.segments, DecoderPath::Decode, &mut dropout)?;
    let logits = matmul(&dec.output, &params.token_head);

    let masked_count = prep.masked.iter().filter(|&&m| m).count();
    let mut d_logits = Tensor::zeros(logits.rows(), logits.cols());
    for (t, &is_masked) in prep.masked.iter().enumerate() {
        if is_masked {
            let (l, g) = cross_entropy_with_grad(logits.row(t), prep.gold.ids[t] as usize);
            loss.l_dec += l;
            let scale = w.dec / masked_count as f64;
            for (d, gg) in d_logits.row_mut(t).iter_mut().zip(&g) {
                *d = gg * scale;
            }
        }
    }
    loss.l_dec /= masked_count as f64;
    loss.masked_count = masked_count;

    // length prediction reads the <LEN> state of each source row
    let rows = batch.len();
    let n_len = cfg.max_target_len;
    let mut len_states = Tensor::zeros(rows, cfg.model_dim);
    for (r, s) in prep.src.segments.iter().enumerate() {
        len_states.row_mut(r).copy_from_slice(enc.output.row(s.start));
    }
    let len_logits = matmul(&len_states, &params.length_head);
    let mut d_len_logits = Tensor::zeros(rows, n_len);
    for r in 0..rows {
        let true_len = batch.tgt_len[r];
        if true_len == 0 || true_len > n_len {
            return Err(Error::SequenceTooLong { len: true_len, max: n_len });
        }
        let (l, g) = cross_entropy_with_grad(len_logits.row(r), true_len - 1);
        loss.l_len += l;
        for (d, gg) in d_len_logits.row_mut(r).iter_mut().zip(&g) {
            *d = gg * w.len / rows as f64;
        }
    }
    loss.l_len /= rows as f64;

    let y_hat = match fixed_y_hat {
        Some(y) => {
            if y.segments != prep.gold.segments {
                return Err(Error::InvalidArgument("review input does not match the batch layout".into()));
            }
            y.clone()
        }
        None => fill_y_hat(&logits, &prep, opts.sampling, seeds.sampling),
    };
    let labels = review_labels(&y_hat.ids, &prep.gold.ids);

    let review = if opts.review_active() {
        let rev_in = net.review_input(&y_hat);
        let rev = net.decoder_forward(params, &rev_in, &enc.output, &prep.src.segments, DecoderPath::Review, &mut dropout)?;
        let z = matmul(&rev.output, &params.review_head);
        let n = z.rows();
        let mut dz = Tensor::zeros(n, 1);
        for t in 0..n {
            let p = sigmoid(z.data()[t]);
            loss.l_rev += bce(p, labels[t]);
            dz.data_mut()[t] = bce_logit_grad(p, labels[t]) * w.rev / n as f64;
        }
        loss.l_rev /= n as f64;
        loss.reviewed_count = n;
        Some((rev, dz))
    } else {
        None
    };

    loss.total = w.dec * loss.l_dec + w.len * loss.l_len + w.rev * loss.l_rev;
    Ok(Forward {
        prep,
        enc,
        dec,
        d_logits,
        len_states,
        d_len_logits,
        review,
        y_hat,
        labels,
        loss,
    })
}

fn backward(model: &Model, f: &Forward, opts: &StepOptions) -> Parameters {
    let net = model.network();
    let params = &model.params;
    let mut grads = params.zeros_like();

    // review loss: W2 and the shared decoder layers; ŷ is a constant and
    // the encoder output is detached unless a test asks otherwise
    let mut d_enc_review = None;
    if let Some((rev, dz)) = &f.review {
        matmul_tn_acc(&rev.output, dz, &mut grads.review_head);
        let d_rev = matmul_nt(dz, &params.review_head);
        d_enc_review = net.decoder_backward(params, rev, &f.enc.output, &d_rev, &mut grads, !opts.detach_review);
    }

    matmul_tn_acc(&f.dec.output, &f.d_logits, &mut grads.token_head);
    let d_dec = matmul_nt(&f.d_logits, &params.token_head);
    let mut d_enc = net
        .decoder_backward(params, &f.dec, &f.enc.output, &d_dec, &mut grads, true)
        .expect("encoder gradient requested");

    matmul_tn_acc(&f.len_states, &f.d_len_logits, &mut grads.length_head);
    let d_len_states = matmul_nt(&f.d_len_logits, &params.length_head);
    for (r, s) in f.prep.src.segments.iter().enumerate() {
        for (a, b) in d_enc.row_mut(s.start).iter_mut().zip(d_len_states.row(r)) {
            *a += b;
        }
    }
    if let Some(extra) = d_enc_review {
        d_enc.add_assign(&extra);
    }
    net.encoder_backward(params, &f.enc, &d_enc, &mut grads);
    grads
}

/// Joint loss and its gradient. The review term reaches W2, the shared
/// decoder layers and the embedding; the encoder stack, W1 and the length
/// head only see the decoder and length terms.
pub fn compute_gradients(model: &Model, batch: &Batch, opts: &StepOptions, seeds: StepSeeds) -> Result<StepOutput> {
    let f = forward(model, batch, opts, seeds, None)?;
    let grads = backward(model, &f, opts);
    Ok(StepOutput {
        loss: f.loss,
        grads,
        y_hat: f.y_hat,
        labels: f.labels,
    })
}

/// Same as [`compute_gradients`] with `ŷ` held fixed.
pub fn loss_and_grad(
    model: &Model,
    batch: &Batch,
    opts: &StepOptions,
    seeds: StepSeeds,
    y_hat: &Packed,
) -> Result<(LossBreakdown, Parameters)> {
    let f = forward(model, batch, opts, seeds, Some(y_hat))?;
    let grads = backward(model, &f, opts);
    Ok((f.loss, grads))
}

/// Forward only. With `y_hat` given, the review input is held fixed, which
/// is what finite differences need since `ŷ` carries no gradient.
pub fn compute_loss(
    model: &Model,
    batch: &Batch,
    opts: &StepOptions,
    seeds: StepSeeds,
    y_hat: Option<&Packed>,
) -> Result<LossBreakdown> {
    Ok(forward(model, batch, opts, seeds, y_hat)?.loss)
}

/// Gradient step with Adam. Aborts before touching the parameters if any
/// loss term is not finite.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &Batch,
    opts: &StepOptions,
    seeds: StepSeeds,
    lr: f64,
    step: u64,
) -> Result<LossBreakdown> {
    let out = compute_gradients(model, batch, opts, seeds)?;
    if !out.loss.is_finite() || !out.grads.named().iter().all(|(_, t)| t.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step,
            batch_hash: batch.content_hash(),
            l_dec: out.loss.l_dec,
            l_len: out.loss.l_len,
            l_rev: out.loss.l_rev,
        });
    }
    adam.step(&mut model.params, &out.grads, lr);
    Ok(out.loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::training::gradcheck::{check_gradients, GradCheckConfig};
    use crate::training::AdamConfig;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            layers: 2,
            model_dim: 8,
            ffn_dim: 16,
            heads: 2,
            vocab_size: 14,
            max_target_len: 8,
            max_source_len: 8,
            ..ModelConfig::default()
        }
    }

    fn tiny_batch() -> Batch {
        Batch::from_rows(
            vec![vec![4, 6, 7, 8], vec![4, 9, 10, 11, 12, 13]],
            vec![vec![6, 7, 8, 2], vec![9, 10, 11, 12, 13, 2]],
            vec![vec![1, 2], vec![0, 3, 5]],
            vec![0, 1],
        )
    }

    fn attached() -> StepOptions {
        StepOptions {
            detach_review: false,
            ..StepOptions::default()
        }
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let model = Model::new(tiny_config(), 3).unwrap();
        let checks = check_gradients(&model, &tiny_batch(), &attached(), StepSeeds::fixed(1), &GradCheckConfig::default()).unwrap();
        let worst = checks
            .iter()
            .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
            .unwrap();
        assert!(worst.relative_error <= 1e-3, "{worst:?}");
        let names: std::collections::BTreeSet<_> = checks.iter().map(|c| c.tensor.as_str()).collect();
        assert_eq!(names.len(), model.params.named().len());
    }

    #[test]
    fn gradient_check_covers_shifted_mode_and_uniform_init() {
        let config = ModelConfig {
            review_mask_mode: crate::model::ReviewMaskMode::Shifted,
            init: crate::model::InitScheme::Uniform,
            ..tiny_config()
        };
        let model = Model::new(config, 8).unwrap();
        let checks = check_gradients(&model, &tiny_batch(), &attached(), StepSeeds::fixed(2), &GradCheckConfig::default()).unwrap();
        assert!(checks.iter().all(|c| c.relative_error <= 1e-3));
    }

    #[test]
    fn review_loss_stops_at_the_encoder() {
        let model = Model::new(tiny_config(), 5).unwrap();
        let batch = tiny_batch();
        let seeds = StepSeeds::fixed(0);
        let review_only = |detach| StepOptions {
            weights: LossWeights { dec: 0.0, len: 0.0, rev: 1.0 },
            detach_review: detach,
            ..StepOptions::default()
        };
        let detached = compute_gradients(&model, &batch, &review_only(true), seeds).unwrap();
        for (name, g) in detached.grads.named() {
            let zero = g.sum_abs() == 0.0;
            let expect_zero = name.starts_with("encoder.") || name == "token_head" || name == "length_head";
            assert_eq!(zero, expect_zero, "{name}");
        }
        // the witness: without the stop the encoder would move
        let leaky = compute_gradients(&model, &batch, &review_only(false), seeds).unwrap();
        assert!(leaky.grads.get("encoder.0.self_attn.query.weight").unwrap().sum_abs() > 0.0);
    }

    #[test]
    fn detached_encoder_gradient_ignores_the_review_loss() {
        let model = Model::new(tiny_config(), 6).unwrap();
        let batch = tiny_batch();
        let seeds = StepSeeds::fixed(3);
        let full = compute_gradients(&model, &batch, &StepOptions::default(), seeds).unwrap();
        let without = StepOptions {
            weights: LossWeights { rev: 0.0, ..LossWeights::default() },
            ..StepOptions::default()
        };
        let base = compute_gradients(&model, &batch, &without, seeds).unwrap();
        assert!(full.loss.l_rev > 0.0);
        let mut checked = 0;
        for ((name, a), (_, b)) in full.grads.named().into_iter().zip(base.grads.named()) {
            if name.starts_with("encoder.") || name == "length_head" || name == "token_head" {
                for (x, y) in a.data().iter().zip(b.data()) {
                    assert!((x - y).abs() <= 1e-9, "{name}: {x} vs {y}");
                }
                checked += 1;
            }
        }
        assert!(checked > 2);
    }

    #[test]
    fn decoder_stack_is_shared_between_paths() {
        let model = Model::new(tiny_config(), 5).unwrap();
        let batch = tiny_batch();
        let seeds = StepSeeds::fixed(0);
        let grads = |w: LossWeights| {
            compute_gradients(&model, &batch, &StepOptions { weights: w, ..StepOptions::default() }, seeds)
                .unwrap()
                .grads
        };
        let dec = grads(LossWeights { dec: 1.0, len: 0.0, rev: 0.0 });
        let rev = grads(LossWeights { dec: 0.0, len: 0.0, rev: 1.0 });
        let both = grads(LossWeights { dec: 1.0, len: 0.0, rev: 1.0 });
        let name = "decoder.1.ffn.expand.weight";
        let (a, b, c) = (dec.get(name).unwrap(), rev.get(name).unwrap(), both.get(name).unwrap());
        assert!(a.sum_abs() > 0.0 && b.sum_abs() > 0.0);
        for i in 0..c.len() {
            assert!((a.data()[i] + b.data()[i] - c.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn total_is_the_sum_with_unit_weights() {
        let model = Model::new(tiny_config(), 1).unwrap();
        let out = compute_gradients(&model, &tiny_batch(), &StepOptions::default(), StepSeeds::fixed(4)).unwrap();
        let l = out.loss;
        assert!((l.total - (l.l_dec + l.l_len + l.l_rev)).abs() < 1e-6);
        assert_eq!(l.masked_count, 5);
        assert_eq!(l.reviewed_count, 10);
    }

    #[test]
    fn review_labels_follow_the_argmax() {
        let model = Model::new(tiny_config(), 1).unwrap();
        let batch = tiny_batch();
        let out = compute_gradients(&model, &batch, &StepOptions::default(), StepSeeds::fixed(4)).unwrap();
        let mut t = 0;
        for r in 0..batch.len() {
            for (p, &gold) in batch.tgt_row(r).iter().enumerate() {
                let masked = batch.mask_positions[r].contains(&p);
                if !masked {
                    assert_eq!(out.y_hat.ids[t], gold);
                    assert_eq!(out.labels[t], 1.0);
                }
                assert_eq!(out.labels[t] == 1.0, out.y_hat.ids[t] == gold);
                t += 1;
            }
        }
    }

    #[test]
    fn ablation_skips_the_review_path() {
        let model = Model::new(tiny_config(), 1).unwrap();
        let opts = StepOptions {
            weights: LossWeights { rev: 0.0, ..LossWeights::default() },
            ..StepOptions::default()
        };
        let out = compute_gradients(&model, &tiny_batch(), &opts, StepSeeds::fixed(4)).unwrap();
        assert_eq!(out.loss.l_rev, 0.0);
        assert_eq!(out.loss.reviewed_count, 0);
        assert_eq!(out.grads.review_head.sum_abs(), 0.0);
    }

    #[test]
    fn sampled_review_input_is_reproducible() {
        let model = Model::new(tiny_config(), 1).unwrap();
        let opts = StepOptions {
            sampling: ReviewSampling::Sample,
            ..StepOptions::default()
        };
        let a = compute_gradients(&model, &tiny_batch(), &opts, StepSeeds::fixed(9)).unwrap();
        let b = compute_gradients(&model, &tiny_batch(), &opts, StepSeeds::fixed(9)).unwrap();
        assert_eq!(a.y_hat, b.y_hat);
    }

    #[test]
    fn non_finite_loss_aborts_without_updating() {
        let mut model = Model::new(tiny_config(), 1).unwrap();
        model.params.token_head.data_mut()[0] = f64::NAN;
        let before = model.params.clone();
        let mut adam = Adam::new(AdamConfig::default(), &model.params);
        let batch = tiny_batch();
        let err = train_step(&mut model, &mut adam, &batch, &StepOptions::default(), StepSeeds::fixed(0), 1e-3, 7).unwrap_err();
        match err {
            Error::NonFiniteLoss { step, batch_hash, .. } => {
                assert_eq!(step, 7);
                assert_eq!(batch_hash, batch.content_hash());
            }
            other => panic!("{other}"),
        }
        assert_eq!(adam.updates, 0);
        assert_eq!(model.params.embedding, before.embedding);
    }

    #[test]
    fn repeated_steps_fit_a_single_batch() {
        let mut model = Model::new(tiny_config(), 2).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &model.params);
        let batch = tiny_batch();
        let opts = StepOptions::default();
        let first = compute_gradients(&model, &batch, &opts, StepSeeds::fixed(0)).unwrap().loss.total;
        for s in 0..60 {
            train_step(&mut model, &mut adam, &batch, &opts, StepSeeds::fixed(s), 3e-3, s).unwrap();
        }
        let last = compute_gradients(&model, &batch, &opts, StepSeeds::fixed(0)).unwrap().loss.total;
        assert!(last < 0.5 * first, "{first} -> {last}");
    }
}
