//! Mask-Predict iterative refinement over length candidates, and a greedy
//! left-to-right baseline through the causal path.

use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, EOS, LEN, MASK, NUM_SPECIALS};
use crate::error::{Error, Result};
use crate::model::tensor::{matmul, softmax_in_place, Tensor};
use crate::model::{DecoderPath, Dropout, Model, Packed, Segment};

/// Top-`k` target lengths (1-based) by logit, highest first; ties go to the
/// shorter length.
pub fn select_lengths(length_logits: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > length_logits.len() {
        return Err(Error::InvalidArgument(format!(
            "length beam {k} outside 1..={}",
            length_logits.len()
        )));
    }
    let mut order: Vec<usize> = (0..length_logits.len()).collect();
    order.sort_by(|&a, &b| length_logits[b].total_cmp(&length_logits[a]).then(a.cmp(&b)));
    Ok(order.into_iter().take(k).map(|i| i + 1).collect())
}

/// Slots re-predicted in iteration `t` of `iterations`: all of them at
/// `t = 1`, then `floor(len · (T − t) / T)`.
pub fn remask_count(len: usize, iterations: usize, t: usize) -> usize {
    assert!(iterations >= 1 && (1..=iterations).contains(&t), "iteration {t} outside 1..={iterations}");
    if t == 1 {
        len
    } else {
        len * (iterations - t) / iterations
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RemaskRule {
    /// Linearly decaying number of lowest-confidence slots.
    Count,
    /// Every slot whose confidence is below the threshold.
    Threshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeOptions {
    pub iterations: usize,
    pub length_beam: usize,
    pub remask: RemaskRule,
    pub trace: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            iterations: 10,
            length_beam: 5,
            remask: RemaskRule::Count,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub iteration: usize,
    /// Slots filled by the decoder in this iteration.
    pub predicted: Vec<usize>,
    pub tokens: Vec<TokenId>,
    pub confidences: Vec<f64>,
    /// Slots masked again for the next iteration.
    pub remasked: Vec<usize>,
}

/// One length candidate after refinement. `tokens` keeps every slot,
/// including a final `<EOS>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub length: usize,
    pub length_rank: usize,
    pub tokens: Vec<TokenId>,
    pub confidences: Vec<f64>,
    /// Mean log-confidence, the ranking score.
    pub score: f64,
    /// Decoder input of the final iteration.
    pub final_input: Vec<TokenId>,
    pub trace: Vec<IterationTrace>,
}

impl Hypothesis {
    /// Tokens without the trailing `<EOS>`.
    pub fn output(&self) -> &[TokenId] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub hypotheses: Vec<Hypothesis>,
    /// Index of the winning hypothesis.
    pub best: usize,
    /// Top-1 predicted target length, `<EOS>` included.
    pub predicted_length: usize,
}

impl DecodeResult {
    pub fn best(&self) -> &Hypothesis {
        &self.hypotheses[self.best]
    }

    pub fn output(&self) -> &[TokenId] {
        self.best().output()
    }
}

/// Argmax over non-special tokens; `<EOS>` competes only at the last slot.
/// Returns the token and its probability under the full softmax.
fn choose(probs: &[f64], last: bool) -> (TokenId, f64) {
    let mut best = NUM_SPECIALS;
    for i in NUM_SPECIALS..probs.len() {
        if probs[i] > probs[best] {
            best = i;
        }
    }
    if last && (best >= probs.len() || probs[EOS as usize] >= probs[best]) {
        best = EOS as usize;
    }
    if best >= probs.len() {
        // vocabulary holds nothing but specials
        best = EOS as usize;
    }
    (best as TokenId, probs[best])
}

fn lowest_confidence(confidences: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..confidences.len()).collect();
    order.sort_by(|&a, &b| confidences[a].total_cmp(&confidences[b]).then(a.cmp(&b)));
    let mut picked: Vec<usize> = order.into_iter().take(n).collect();
    picked.sort_unstable();
    picked
}

fn check_source(model: &Model, src: &[TokenId]) -> Result<()> {
    if src.first() != Some(&LEN) {
        return Err(Error::InvalidArgument("source rows must start with <LEN>".into()));
    }
    if src.len() > model.config().max_source_len + 1 {
        return Err(Error::SequenceTooLong {
            len: src.len() - 1,
            max: model.config().max_source_len,
        });
    }
    Ok(())
}

struct Live {
    sentence: usize,
    hyp: Hypothesis,
    masked: Vec<usize>,
}

/// Mask-Predict for one source row (`<LEN>` first).
pub fn mask_predict(model: &Model, src: &[TokenId], opts: &DecodeOptions) -> Result<DecodeResult> {
    Ok(mask_predict_batch(model, &[src.to_vec()], opts)?.remove(0))
}

/// Mask-Predict for many sources. Every hypothesis of every sentence is
/// packed into one decoder forward per iteration.
pub fn mask_predict_batch(model: &Model, sources: &[Vec<TokenId>], opts: &DecodeOptions) -> Result<Vec<DecodeResult>> {
    if opts.iterations == 0 {
        return Err(Error::InvalidArgument("iterations must be at least 1".into()));
    }
    if let RemaskRule::Threshold(th) = opts.remask {
        if !(0.0..=1.0).contains(&th) {
            return Err(Error::InvalidArgument(format!("remask threshold {th} outside [0, 1]")));
        }
    }
    if sources.is_empty() {
        return Ok(Vec::new());
    }
    for s in sources {
        check_source(model, s)?;
    }
    let net = model.network();
    let params = &model.params;
    let src = Packed::from_rows(sources);
    let enc = net.encoder_forward(params, &src, &mut Dropout::disabled())?.output;

    let mut live = Vec::new();
    let mut predicted_length = Vec::with_capacity(sources.len());
    for (i, seg) in src.segments.iter().enumerate() {
        let logits = model.length_logits(&enc.slice_rows(seg.start, 1));
        let lengths = select_lengths(&logits, opts.length_beam)?;
        predicted_length.push(lengths[0]);
        for (rank, len) in lengths.into_iter().enumerate() {
            live.push(Live {
                sentence: i,
                hyp: Hypothesis {
                    length: len,
                    length_rank: rank,
                    tokens: vec![MASK; len],
                    confidences: vec![0.0; len],
                    score: 0.0,
                    final_input: Vec::new(),
                    trace: Vec::new(),
                },
                masked: (0..len).collect(),
            });
        }
    }

    let total = opts.iterations;
    for t in 1..=total {
        let inputs: Vec<&[TokenId]> = live.iter().map(|h| h.hyp.tokens.as_slice()).collect();
        let packed = Packed::from_rows(&inputs);
        let src_segments: Vec<Segment> = live.iter().map(|h| src.segments[h.sentence]).collect();
        let dec = net.decoder_forward(params, &packed, &enc, &src_segments, DecoderPath::Decode, &mut Dropout::disabled())?;
        let rows: Vec<usize> = live
            .iter()
            .zip(&packed.segments)
            .flat_map(|(h, s)| h.masked.iter().map(move |&p| s.start + p))
            .collect();
        let mut states = Tensor::zeros(rows.len(), dec.output.cols());
        for (i, &r) in rows.iter().enumerate() {
            states.row_mut(i).copy_from_slice(dec.output.row(r));
        }
        let mut probs = matmul(&states, &params.token_head);
        let mut cursor = 0;
        for h in live.iter_mut() {
            let len = h.hyp.length;
            if t == total {
                h.hyp.final_input = h.hyp.tokens.clone();
            }
            for &p in &h.masked {
                let row = probs.row_mut(cursor);
                cursor += 1;
                softmax_in_place(row);
                let (tok, conf) = choose(row, p + 1 == len);
                h.hyp.tokens[p] = tok;
                h.hyp.confidences[p] = conf;
            }
            let predicted = std::mem::take(&mut h.masked);
            let snapshot = opts.trace.then(|| (h.hyp.tokens.clone(), h.hyp.confidences.clone()));
            if t < total {
                h.masked = match opts.remask {
                    RemaskRule::Count => lowest_confidence(&h.hyp.confidences, remask_count(len, total, t + 1)),
                    RemaskRule::Threshold(th) => (0..len).filter(|&i| h.hyp.confidences[i] < th).collect(),
                };
                for &p in &h.masked {
                    h.hyp.tokens[p] = MASK;
                }
            }
            if let Some((tokens, confidences)) = snapshot {
                h.hyp.trace.push(IterationTrace {
                    iteration: t,
                    predicted,
                    tokens,
                    confidences,
                    remasked: h.masked.clone(),
                });
            }
        }
    }

    let mut results: Vec<DecodeResult> = predicted_length
        .into_iter()
        .map(|predicted_length| DecodeResult {
            hypotheses: Vec::new(),
            best: 0,
            predicted_length,
        })
        .collect();
    for mut h in live {
        let n = h.hyp.confidences.len() as f64;
        h.hyp.score = h.hyp.confidences.iter().map(|c| c.ln()).sum::<f64>() / n;
        let r = &mut results[h.sentence];
        if r.hypotheses.is_empty() || h.hyp.score > r.hypotheses[r.best].score {
            r.best = r.hypotheses.len();
        }
        r.hypotheses.push(h.hyp);
    }
    Ok(results)
}

/// Left-to-right argmax through the causal path with W1 as the output head.
/// Step `t` feeds the prefix followed by `<MASK>` and reads slot `t`.
/// Stops at `<EOS>` (not returned) or after `max_len` tokens.
pub fn greedy_ar_decode(model: &Model, src: &[TokenId], max_len: usize) -> Result<Vec<TokenId>> {
    check_source(model, src)?;
    let h_enc = model.encode(src)?;
    let limit = max_len.min(model.config().max_target_len);
    let mut out: Vec<TokenId> = Vec::new();
    while out.len() < limit {
        let mut input = out.clone();
        input.push(MASK);
        let h = model.review(&h_enc, &input)?;
        let t = out.len();
        let mut row = matmul(&h.slice_rows(t, 1), &model.params.token_head).into_vec();
        softmax_in_place(&mut row);
        let mut best = EOS as usize;
        for i in NUM_SPECIALS..row.len() {
            if row[i] > row[best] {
                best = i;
            }
        }
        if best == EOS as usize {
            break;
        }
        out.push(best as TokenId);
    }
    Ok(out)
}
