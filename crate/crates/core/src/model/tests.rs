use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::{EOS, MASK};
use crate::training::{Adam, AdamConfig};

fn config() -> ModelConfig {
    ModelConfig {
        layers: 2,
        model_dim: 16,
        ffn_dim: 32,
        heads: 2,
        vocab_size: 20,
        max_target_len: 12,
        max_source_len: 12,
        ..ModelConfig::default()
    }
}

fn model(seed: u64) -> Model {
    Model::new(config(), seed).unwrap()
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn random_row(rng: &mut ChaCha8Rng, len: usize) -> Vec<TokenId> {
    (0..len).map(|_| rng.random_range(6..20)).collect()
}

#[test]
fn encoder_shape_includes_len_slot() {
    let m = model(0);
    let h = m.encode(&[LEN, 7, 8, 9]).unwrap();
    assert_eq!(h.shape(), (4, 16));
    assert!(m.encode(&[7, 8]).is_err());
}

#[test]
fn over_long_sequences_are_rejected() {
    let m = model(0);
    let mut src = vec![LEN];
    src.extend(std::iter::repeat_n(7, 13));
    assert!(matches!(m.encode(&src), Err(Error::SequenceTooLong { .. })));
    let h = m.encode(&[LEN, 7]).unwrap();
    assert!(m.decode(&h, &[MASK; 13]).is_err());
    assert!(matches!(
        m.decode_checked(&h, &[MASK; 3], 4),
        Err(Error::LengthMismatch { .. })
    ));
}

#[test]
fn out_of_range_token_is_rejected() {
    let m = model(0);
    assert!(matches!(
        m.encode(&[LEN, 20]),
        Err(Error::TokenOutOfRange { id: 20, .. })
    ));
}

#[test]
fn padding_content_never_reaches_real_positions() {
    let m = model(1);
    let rows = [vec![LEN, 7, 8, 9, 10], vec![LEN, 11, 12]];
    let mut a = IdMatrix { rows: 2, cols: 5, data: vec![0; 10] };
    a.data[..5].copy_from_slice(&rows[0]);
    a.data[5..8].copy_from_slice(&rows[1]);
    let mut b = a.clone();
    b.data[8] = 19;
    b.data[9] = 6;
    let ha = m.encode_batch(&a, &[5, 3]).unwrap();
    let hb = m.encode_batch(&b, &[5, 3]).unwrap();
    assert!(max_diff(&ha[1], &hb[1]) < 1e-6);
    assert_eq!(ha[1].rows(), 3);
}

#[test]
fn encoding_is_batch_invariant() {
    let m = model(2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rows: Vec<Vec<TokenId>> = (0..8)
        .map(|i| {
            let mut r = vec![LEN];
            r.extend(random_row(&mut rng, 2 + i));
            r
        })
        .collect();
    let cols = rows.iter().map(Vec::len).max().unwrap();
    let mut data = vec![0; 8 * cols];
    for (r, row) in rows.iter().enumerate() {
        data[r * cols..r * cols + row.len()].copy_from_slice(row);
    }
    let lens: Vec<usize> = rows.iter().map(Vec::len).collect();
    let batch = m
        .encode_batch(&IdMatrix { rows: 8, cols, data }, &lens)
        .unwrap();
    for (row, h) in rows.iter().zip(&batch) {
        assert!(max_diff(&m.encode(row).unwrap(), h) < 1e-5);
    }
}

#[test]
fn decoding_is_batch_invariant() {
    let m = model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let srcs: Vec<Vec<TokenId>> = (0..8)
        .map(|_| {
            let mut r = vec![LEN];
            r.extend(random_row(&mut rng, 4));
            r
        })
        .collect();
    let tgts: Vec<Vec<TokenId>> = (0..8).map(|i| random_row(&mut rng, 3 + i % 4)).collect();
    let net = m.network();
    let src = Packed::from_rows(&srcs);
    let tgt = Packed::from_rows(&tgts);
    let enc = net.encoder_forward(&m.params, &src, &mut Dropout::disabled()).unwrap();
    let dec = net
        .decoder_forward(&m.params, &tgt, &enc.output, &src.segments, DecoderPath::Decode, &mut Dropout::disabled())
        .unwrap();
    let h_enc = m.encode(&srcs[5]).unwrap();
    let alone = m.decode(&h_enc, &tgts[5]).unwrap();
    let s = tgt.segments[5];
    assert!(max_diff(&alone, &dec.output.slice_rows(s.start, s.len)) < 1e-5);
}

#[test]
fn decode_path_is_bidirectional() {
    let m = model(4);
    let h = m.encode(&[LEN, 7, 8, 9]).unwrap();
    let a = m.decode(&h, &[MASK, MASK, MASK, MASK, 10]).unwrap();
    let b = m.decode(&h, &[MASK, MASK, MASK, MASK, 11]).unwrap();
    let first = |t: &Tensor| t.row(0).to_vec();
    let delta: f64 = first(&a).iter().zip(first(&b)).map(|(x, y)| (x - y).abs()).sum();
    assert!(delta > 1e-9);
}

#[test]
fn fully_masked_input_is_valid() {
    let m = model(4);
    let h = m.encode(&[LEN, 7, 8]).unwrap();
    let d = m.decode(&h, &[MASK; 5]).unwrap();
    assert_eq!(d.shape(), (5, 16));
    assert!(d.is_finite());
}

fn causality_trials(mode: ReviewMaskMode, unchanged_through: impl Fn(usize) -> usize) {
    let m = Model::new(ModelConfig { review_mask_mode: mode, ..config() }, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let h = m.encode(&[LEN, 7, 8, 9, 10]).unwrap();
    for _ in 0..50 {
        let len = rng.random_range(2..=10);
        let y = random_row(&mut rng, len);
        let t = rng.random_range(0..len);
        let mut z = y.clone();
        for v in &mut z[t..] {
            *v = rng.random_range(6..20);
        }
        z[t] = if y[t] == 19 { 6 } else { y[t] + 1 };
        let a = m.review(&h, &y).unwrap();
        let b = m.review(&h, &z).unwrap();
        let keep = unchanged_through(t);
        if keep > 0 {
            assert!(max_diff(&a.slice_rows(0, keep), &b.slice_rows(0, keep)) < 1e-6);
        }
        if mode == ReviewMaskMode::Inclusive {
            let row_t = |x: &Tensor| x.slice_rows(t, 1);
            assert!(max_diff(&row_t(&a), &row_t(&b)) > 1e-9, "row {t} must see its own token");
        }
    }
}

#[test]
fn inclusive_review_is_causal() {
    causality_trials(ReviewMaskMode::Inclusive, |t| t);
}

#[test]
fn shifted_review_hides_the_current_token() {
    causality_trials(ReviewMaskMode::Shifted, |t| t + 1);
}

#[test]
fn decode_sees_future_positions_in_random_trials() {
    let m = model(6);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = m.encode(&[LEN, 7, 8, 9, 10]).unwrap();
    for _ in 0..50 {
        let len = rng.random_range(2..=10);
        let y = random_row(&mut rng, len);
        let t = rng.random_range(1..len);
        let mut z = y.clone();
        z[t] = if y[t] == 19 { 6 } else { y[t] + 1 };
        let a = m.decode(&h, &y).unwrap();
        let b = m.decode(&h, &z).unwrap();
        assert!(max_diff(&a.slice_rows(0, 1), &b.slice_rows(0, 1)) > 1e-9);
    }
}

#[test]
fn diagonal_attention_makes_masks_irrelevant() {
    // One layer, one head. Token embeddings are tiny so the first-layer
    // inputs are essentially positional rows, which all share one norm;
    // scaled identity query/key projections then put all weight on the
    // diagonal.
    let cfg = ModelConfig {
        layers: 1,
        heads: 1,
        model_dim: 8,
        ffn_dim: 16,
        ..config()
    };
    let mut m = Model::new(cfg, 2).unwrap();
    for v in m.params.embedding.data_mut() {
        *v *= 1e-3;
    }
    let attn = &mut m.params.decoder[0].self_attn;
    for lin in [&mut attn.query, &mut attn.key] {
        lin.weight.fill(0.0);
        for i in 0..8 {
            lin.weight.row_mut(i)[i] = 100.0;
        }
    }
    let h = m.encode(&[LEN, 7, 8, 9]).unwrap();
    let y = [9, 10, 11, 12, 13, EOS];
    let dec = m.decode(&h, &y).unwrap();
    let rev = m.review(&h, &y).unwrap();
    assert!(max_diff(&dec, &rev) < 1e-9);
}

#[test]
fn token_probabilities_are_normalised() {
    let m = model(7);
    let h = m.encode(&[LEN, 7, 8]).unwrap();
    let p = m.token_probs(&m.decode(&h, &[MASK, 9, MASK]).unwrap());
    for r in 0..p.rows() {
        let s: f64 = p.row(r).iter().sum();
        assert!((s - 1.0).abs() < 1e-5);
    }
}

#[test]
fn zero_heads_give_uniform_outputs() {
    let mut m = model(7);
    m.params.token_head.fill(0.0);
    m.params.review_head.fill(0.0);
    m.params.length_head.fill(0.0);
    let h = m.encode(&[LEN, 7, 8]).unwrap();
    let p = m.token_probs(&m.decode(&h, &[MASK, 9]).unwrap());
    assert!(p.data().iter().all(|&x| (x - 1.0 / 20.0).abs() < 1e-12));
    let r = m.review_probs(&m.review(&h, &[9, 10]).unwrap());
    assert!(r.iter().all(|&x| x == 0.5));
    let mut l = m.length_logits(&h);
    crate::model::tensor::softmax_in_place(&mut l);
    assert!(l.iter().all(|&x| (x - 1.0 / 12.0).abs() < 1e-12));
}

#[test]
fn argmax_is_invariant_to_positive_scaling() {
    let m = model(8);
    let h = m.encode(&[LEN, 7, 8]).unwrap();
    let d = m.decode(&h, &[MASK, 9, MASK]).unwrap();
    let mut scaled = d.clone();
    scaled.data_mut().iter_mut().for_each(|v| *v *= 3.5);
    let am = |t: &Tensor| {
        (0..t.rows())
            .map(|r| crate::training::argmax(t.row(r)))
            .collect::<Vec<_>>()
    };
    assert_eq!(am(&m.token_logits(&d)), am(&m.token_logits(&scaled)));
}

#[test]
fn review_probabilities_saturate() {
    let mut m = model(9);
    let h = m.encode(&[LEN, 7, 8]).unwrap();
    let rev = m.review(&h, &[9, 10, 11]).unwrap();
    // align W2 with each state direction so every projection is large
    let d = m.config().model_dim;
    let mut w = vec![0.0; d];
    for r in 0..rev.rows() {
        for (a, b) in w.iter_mut().zip(rev.row(r)) {
            *a += b;
        }
    }
    m.params.review_head = Tensor::from_vec(d, 1, w.iter().map(|x| x * 1e3).collect());
    let p = m.review_probs(&rev);
    assert!(p.iter().all(|&x| x >= 1.0 - 1e-6), "{p:?}");
}

#[test]
fn identical_sources_give_identical_length_logits() {
    let m = model(10);
    let a = m.length_logits(&m.encode(&[LEN, 7, 8, 9]).unwrap());
    let b = m.length_logits(&m.encode(&[LEN, 7, 8, 9]).unwrap());
    assert_eq!(a.len(), 12);
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-5));
}

#[test]
fn forwards_are_deterministic() {
    let a = model(11);
    let b = model(11);
    assert_eq!(a.params, b.params);
    let h = a.encode(&[LEN, 7, 8]).unwrap();
    assert_eq!(h, b.encode(&[LEN, 7, 8]).unwrap());
    assert_eq!(a.decode(&h, &[MASK, 9]).unwrap(), b.decode(&h, &[MASK, 9]).unwrap());
}

#[test]
fn heads_have_distinct_storage_and_shapes() {
    let m = model(12);
    assert_eq!(m.params.token_head.shape(), (16, 20));
    assert_eq!(m.params.review_head.shape(), (16, 1));
    assert_eq!(m.params.length_head.shape(), (16, 12));
    assert!(std::ptr::eq(
        m.params.decoder_layers(DecoderPath::Decode),
        m.params.decoder_layers(DecoderPath::Review)
    ));
}

#[test]
fn review_path_sees_updates_made_through_decode() {
    use crate::corpus::Batch;
    use crate::training::{train_step, LossWeights, StepOptions, StepSeeds};
    let mut m = model(13);
    let h = m.encode(&[LEN, 7, 8, 9]).unwrap();
    let before = m.review(&h, &[7, 8, 9, EOS]).unwrap();
    let batch = Batch::from_rows(vec![vec![LEN, 7, 8, 9]], vec![vec![7, 8, 9, EOS]], vec![vec![0, 2]], vec![0]);
    let opts = StepOptions {
        weights: LossWeights { dec: 1.0, len: 0.0, rev: 0.0 },
        ..StepOptions::default()
    };
    let mut adam = Adam::new(AdamConfig::default(), &m.params);
    let enc_before = m.params.encoder.clone();
    train_step(&mut m, &mut adam, &batch, &opts, StepSeeds::fixed(0), 1e-2, 0).unwrap();
    // same encoder output, so any change comes from the shared decoder layers
    m.params.encoder = enc_before;
    m.params.embedding = model(13).params.embedding;
    let after = m.review(&h, &[7, 8, 9, EOS]).unwrap();
    assert!(max_diff(&before, &after) > 1e-6);
}

#[test]
fn checkpoint_round_trip_preserves_forwards() {
    let m = model(14);
    let ckpt = m.to_checkpoint(42, vec![("seed".into(), "14".into())]);
    let restored = Model::from_checkpoint(&Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap()).unwrap();
    let h = m.encode(&[LEN, 7, 8]).unwrap();
    assert_eq!(h, restored.encode(&[LEN, 7, 8]).unwrap());
    assert_eq!(m.decode(&h, &[MASK, 9]).unwrap(), restored.decode(&h, &[MASK, 9]).unwrap());
    assert_eq!(m.review(&h, &[9, 9]).unwrap(), restored.review(&h, &[9, 9]).unwrap());
}

#[test]
fn checkpoint_with_missing_or_unknown_tensors_is_rejected() {
    let m = model(14);
    let mut ckpt = m.to_checkpoint(0, Vec::new());
    ckpt.tensors.pop();
    assert!(Model::from_checkpoint(&ckpt).is_err());
    let mut ckpt = m.to_checkpoint(0, Vec::new());
    ckpt.tensors[0].0 = "bogus".into();
    assert!(Model::from_checkpoint(&ckpt).is_err());
    let mut ckpt = m.to_checkpoint(0, Vec::new());
    ckpt.tensors.push(("optim.first.embedding".into(), Tensor::zeros(1, 1)));
    assert!(Model::from_checkpoint(&ckpt).is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn review_probabilities_lie_strictly_inside_unit_interval(
        seed in 0u64..1000,
        ys in prop::collection::vec(6u32..20, 1..10),
    ) {
        let m = model(seed);
        let h = m.encode(&[LEN, 7, 8]).unwrap();
        let p = m.review_probs(&m.review(&h, &ys).unwrap());
        prop_assert!(p.iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn token_rows_sum_to_one(seed in 0u64..1000, ys in prop::collection::vec(3u32..20, 1..10)) {
        let m = model(seed);
        let h = m.encode(&[LEN, 9]).unwrap();
        let p = m.token_probs(&m.decode(&h, &ys).unwrap());
        for r in 0..p.rows() {
            let s: f64 = p.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-5);
        }
    }
}
