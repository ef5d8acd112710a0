//! Encoder and decoder stacks over packed sequences, with the caches needed
//! for the backward pass.

use super::config::{ModelConfig, ReviewMaskMode};
use super::layers::{
    dropout_backward, AttentionCache, AttentionLayout, Dropout, DropoutMask, FeedForwardCache,
    MaskKind, NormCache, Segment,
};
use super::params::{DecoderLayer, DecoderPath, EncoderLayer, Parameters};
use super::tensor::Tensor;
use crate::corpus::{TokenId, SOS};
use crate::error::{Error, Result};

/// Several sequences concatenated, with their boundaries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packed {
    pub ids: Vec<TokenId>,
    pub segments: Vec<Segment>,
}

impl Packed {
    pub fn from_rows<R: AsRef<[TokenId]>>(rows: &[R]) -> Self {
        let mut ids = Vec::new();
        let mut segments = Vec::with_capacity(rows.len());
        for row in rows {
            let row = row.as_ref();
            segments.push(Segment {
                start: ids.len(),
                len: row.len(),
            });
            ids.extend_from_slice(row);
        }
        Self { ids, segments }
    }

    pub fn row(&self, i: usize) -> &[TokenId] {
        let s = self.segments[i];
        &self.ids[s.start..s.start + s.len]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `<SOS>`-prepended, last token dropped, per segment.
    pub fn shifted_right(&self) -> Packed {
        let mut ids = Vec::with_capacity(self.ids.len());
        for s in &self.segments {
            if s.len > 0 {
                ids.push(SOS);
                ids.extend_from_slice(&self.ids[s.start..s.start + s.len - 1]);
            }
        }
        Packed {
            ids,
            segments: self.segments.clone(),
        }
    }
}

/// Sinusoidal position table `[positions × d]`.
pub fn sinusoidal_table(positions: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(positions, d);
    for p in 0..positions {
        let row = t.row_mut(p);
        for i in 0..d / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            row[2 * i] = angle.sin();
            row[2 * i + 1] = angle.cos();
        }
        if d % 2 == 1 {
            row[d - 1] = (p as f64 / 10000f64.powf((d - 1) as f64 / d as f64)).sin();
        }
    }
    t
}

#[derive(Debug, Clone)]
struct EncoderLayerCache {
    input: Tensor,
    attn: AttentionCache,
    attn_drop: DropoutMask,
    attn_norm: NormCache,
    mid: Tensor,
    ffn: FeedForwardCache,
    ffn_drop: DropoutMask,
    ffn_norm: NormCache,
}

#[derive(Debug, Clone)]
struct DecoderLayerCache {
    input: Tensor,
    self_attn: AttentionCache,
    self_drop: DropoutMask,
    self_norm: NormCache,
    after_self: Tensor,
    cross_attn: AttentionCache,
    cross_drop: DropoutMask,
    cross_norm: NormCache,
    after_cross: Tensor,
    ffn: FeedForwardCache,
    ffn_drop: DropoutMask,
    ffn_norm: NormCache,
}

#[derive(Debug, Clone)]
pub struct EncoderPass {
    pub input: Packed,
    embed_drop: DropoutMask,
    layers: Vec<EncoderLayerCache>,
    pub output: Tensor,
}

#[derive(Debug, Clone)]
pub struct DecoderPass {
    /// Token ids actually fed to the stack (already shifted if applicable).
    pub input: Packed,
    pub source_segments: Vec<Segment>,
    pub mask: MaskKind,
    embed_drop: DropoutMask,
    layers: Vec<DecoderLayerCache>,
    pub output: Tensor,
}

impl DecoderPass {
    /// Self-attention weights of the last layer for one segment and head.
    pub fn last_self_attention(&self, heads: usize, segment: usize, head: usize) -> Tensor {
        let cache = &self.layers.last().expect("at least one layer").self_attn;
        cache.weights(&self.input.segments, &self.input.segments, heads, segment, head)
    }
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = a.clone();
    out.add_assign(b);
    out
}

/// Stateless forward/backward over a parameter set.
#[derive(Debug, Clone)]
pub struct Network {
    pub config: ModelConfig,
    positions: Tensor,
}

impl Network {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let positions = sinusoidal_table(config.positions(), config.model_dim);
        Ok(Self { config, positions })
    }

    fn check_ids(&self, packed: &Packed, max_len: usize) -> Result<()> {
        for s in &packed.segments {
            if s.len > max_len {
                return Err(Error::SequenceTooLong { len: s.len, max: max_len });
            }
        }
        if let Some(&id) = packed
            .ids
            .iter()
            .find(|&&id| id as usize >= self.config.vocab_size)
        {
            return Err(Error::TokenOutOfRange {
                id,
                size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn embed(&self, params: &Parameters, packed: &Packed, dropout: &mut Dropout) -> (Tensor, DropoutMask) {
        let d = self.config.model_dim;
        let scale = (d as f64).sqrt();
        let mut x = Tensor::zeros(packed.len(), d);
        for s in &packed.segments {
            for p in 0..s.len {
                let r = s.start + p;
                let e = params.embedding.row(packed.ids[r] as usize);
                let pe = self.positions.row(p);
                let out = x.row_mut(r);
                for k in 0..d {
                    out[k] = e[k] * scale + pe[k];
                }
            }
        }
        let mask = dropout.apply(&mut x);
        (x, mask)
    }

    fn embed_backward(&self, packed: &Packed, mask: &DropoutMask, dx: &Tensor, grads: &mut Parameters) {
        let dx = dropout_backward(mask, dx);
        let scale = (self.config.model_dim as f64).sqrt();
        for (r, &id) in packed.ids.iter().enumerate() {
            let g = grads.embedding.row_mut(id as usize);
            for (a, b) in g.iter_mut().zip(dx.row(r)) {
                *a += scale * b;
            }
        }
    }

    pub fn encoder_forward(&self, params: &Parameters, src: &Packed, dropout: &mut Dropout) -> Result<EncoderPass> {
        self.check_ids(src, self.config.max_source_len + 1)?;
        let (mut x, embed_drop) = self.embed(params, src, dropout);
        let layout = AttentionLayout {
            queries: &src.segments,
            keys: &src.segments,
            mask: MaskKind::Bidirectional,
            heads: self.config.heads,
        };
        let mut layers = Vec::with_capacity(params.encoder.len());
        for layer in &params.encoder {
            let (y, cache) = encoder_layer_forward(layer, x, &layout, dropout);
            layers.push(cache);
            x = y;
        }
        Ok(EncoderPass {
            input: src.clone(),
            embed_drop,
            layers,
            output: x,
        })
    }

    pub fn encoder_backward(&self, params: &Parameters, pass: &EncoderPass, d_out: &Tensor, grads: &mut Parameters) {
        let layout = AttentionLayout {
            queries: &pass.input.segments,
            keys: &pass.input.segments,
            mask: MaskKind::Bidirectional,
            heads: self.config.heads,
        };
        let mut dx = d_out.clone();
        for (i, cache) in pass.layers.iter().enumerate().rev() {
            dx = encoder_layer_backward(&params.encoder[i], cache, &dx, &layout, &mut grads.encoder[i]);
        }
        self.embed_backward(&pass.input, &pass.embed_drop, &dx, grads);
    }

    /// Prepares review-path input: unchanged in inclusive mode, shifted by
    /// `<SOS>` in shifted mode.
    pub fn review_input(&self, y_hat: &Packed) -> Packed {
        match self.config.review_mask_mode {
            ReviewMaskMode::Inclusive => y_hat.clone(),
            ReviewMaskMode::Shifted => y_hat.shifted_right(),
        }
    }

    /// Runs the decoder stack. `Decode` uses the bidirectional mask,
    /// `Review` the causal one; both read the same layer weights. `input`
    /// must already be prepared for the path (see [`Network::review_input`]).
    pub fn decoder_forward(
        &self,
        params: &Parameters,
        input: &Packed,
        enc: &Tensor,
        source_segments: &[Segment],
        path: DecoderPath,
        dropout: &mut Dropout,
    ) -> Result<DecoderPass> {
        self.check_ids(input, self.config.max_target_len)?;
        if input.segments.len() != source_segments.len() {
            return Err(Error::LengthMismatch {
                expected: source_segments.len(),
                actual: input.segments.len(),
            });
        }
        let mask = match path {
            DecoderPath::Decode => MaskKind::Bidirectional,
            DecoderPath::Review => MaskKind::Causal,
        };
        let (mut x, embed_drop) = self.embed(params, input, dropout);
        let heads = self.config.heads;
        let self_layout = AttentionLayout {
            queries: &input.segments,
            keys: &input.segments,
            mask,
            heads,
        };
        let cross_layout = AttentionLayout {
            queries: &input.segments,
            keys: source_segments,
            mask: MaskKind::Bidirectional,
            heads,
        };
        let stack = params.decoder_layers(path);
        let mut layers = Vec::with_capacity(stack.len());
        for layer in stack {
            let (y, cache) = decoder_layer_forward(layer, x, enc, &self_layout, &cross_layout, dropout);
            layers.push(cache);
            x = y;
        }
        Ok(DecoderPass {
            input: input.clone(),
            source_segments: source_segments.to_vec(),
            mask,
            embed_drop,
            layers,
            output: x,
        })
    }

    /// Backpropagates `d_out` into `grads`. Returns the gradient with respect
    /// to the encoder output only when `need_enc_grad`.
    pub fn decoder_backward(
        &self,
        params: &Parameters,
        pass: &DecoderPass,
        enc: &Tensor,
        d_out: &Tensor,
        grads: &mut Parameters,
        need_enc_grad: bool,
    ) -> Option<Tensor> {
        let heads = self.config.heads;
        let self_layout = AttentionLayout {
            queries: &pass.input.segments,
            keys: &pass.input.segments,
            mask: pass.mask,
            heads,
        };
        let cross_layout = AttentionLayout {
            queries: &pass.input.segments,
            keys: &pass.source_segments,
            mask: MaskKind::Bidirectional,
            heads,
        };
        let mut d_enc = need_enc_grad.then(|| Tensor::zeros(enc.rows(), enc.cols()));
        let mut dx = d_out.clone();
        for (i, cache) in pass.layers.iter().enumerate().rev() {
            let (d_in, d_enc_layer) = decoder_layer_backward(
                &params.decoder[i],
                cache,
                enc,
                &dx,
                &self_layout,
                &cross_layout,
                &mut grads.decoder[i],
                need_enc_grad,
            );
            if let (Some(acc), Some(g)) = (d_enc.as_mut(), d_enc_layer) {
                acc.add_assign(&g);
            }
            dx = d_in;
        }
        self.embed_backward(&pass.input, &pass.embed_drop, &dx, grads);
        d_enc
    }
}

fn encoder_layer_forward(
    layer: &EncoderLayer,
    x: Tensor,
    layout: &AttentionLayout,
    dropout: &mut Dropout,
) -> (Tensor, EncoderLayerCache) {
    let (mut a, attn) = layer.self_attn.forward(&x, &x, layout);
    let attn_drop = dropout.apply(&mut a);
    let (mid, attn_norm) = layer.self_norm.forward(&add(&x, &a));
    let (mut f, ffn) = layer.ffn.forward(&mid);
    let ffn_drop = dropout.apply(&mut f);
    let (y, ffn_norm) = layer.ffn_norm.forward(&add(&mid, &f));
    (
        y,
        EncoderLayerCache {
            input: x,
            attn,
            attn_drop,
            attn_norm,
            mid,
            ffn,
            ffn_drop,
            ffn_norm,
        },
    )
}

fn encoder_layer_backward(
    layer: &EncoderLayer,
    cache: &EncoderLayerCache,
    dy: &Tensor,
    layout: &AttentionLayout,
    grad: &mut EncoderLayer,
) -> Tensor {
    let d_res2 = layer.ffn_norm.backward(&cache.ffn_norm, dy, &mut grad.ffn_norm);
    let df = dropout_backward(&cache.ffn_drop, &d_res2);
    let mut d_mid = layer.ffn.backward(&cache.mid, &cache.ffn, &df, &mut grad.ffn);
    d_mid.add_assign(&d_res2);
    let d_res1 = layer.self_norm.backward(&cache.attn_norm, &d_mid, &mut grad.self_norm);
    let da = dropout_backward(&cache.attn_drop, &d_res1);
    let (mut dx, dkv) = layer.self_attn.backward(
        &cache.input,
        &cache.input,
        &cache.attn,
        &da,
        layout,
        &mut grad.self_attn,
        true,
    );
    dx.add_assign(&dkv.expect("requested"));
    dx.add_assign(&d_res1);
    dx
}

fn decoder_layer_forward(
    layer: &DecoderLayer,
    x: Tensor,
    enc: &Tensor,
    self_layout: &AttentionLayout,
    cross_layout: &AttentionLayout,
    dropout: &mut Dropout,
) -> (Tensor, DecoderLayerCache) {
    let (mut a, self_attn) = layer.self_attn.forward(&x, &x, self_layout);
    let self_drop = dropout.apply(&mut a);
    let (after_self, self_norm) = layer.self_norm.forward(&add(&x, &a));
    let (mut c, cross_attn) = layer.cross_attn.forward(&after_self, enc, cross_layout);
    let cross_drop = dropout.apply(&mut c);
    let (after_cross, cross_norm) = layer.cross_norm.forward(&add(&after_self, &c));
    let (mut f, ffn) = layer.ffn.forward(&after_cross);
    let ffn_drop = dropout.apply(&mut f);
    let (y, ffn_norm) = layer.ffn_norm.forward(&add(&after_cross, &f));
    (
        y,
        DecoderLayerCache {
            input: x,
            self_attn,
            self_drop,
            self_norm,
            after_self,
            cross_attn,
            cross_drop,
            cross_norm,
            after_cross,
            ffn,
            ffn_drop,
            ffn_norm,
        },
    )
}

#[allow(clippy::too_many_arguments)]
fn decoder_layer_backward(
    layer: &DecoderLayer,
    cache: &DecoderLayerCache,
    enc: &Tensor,
    dy: &Tensor,
    self_layout: &AttentionLayout,
    cross_layout: &AttentionLayout,
    grad: &mut DecoderLayer,
    need_enc_grad: bool,
) -> (Tensor, Option<Tensor>) {
    let d_res3 = layer.ffn_norm.backward(&cache.ffn_norm, dy, &mut grad.ffn_norm);
    let df = dropout_backward(&cache.ffn_drop, &d_res3);
    let mut d_cross_out = layer.ffn.backward(&cache.after_cross, &cache.ffn, &df, &mut grad.ffn);
    d_cross_out.add_assign(&d_res3);
    let d_res2 = layer.cross_norm.backward(&cache.cross_norm, &d_cross_out, &mut grad.cross_norm);
    let dc = dropout_backward(&cache.cross_drop, &d_res2);
    let (mut d_self_out, d_enc) = layer.cross_attn.backward(
        &cache.after_self,
        enc,
        &cache.cross_attn,
        &dc,
        cross_layout,
        &mut grad.cross_attn,
        need_enc_grad,
    );
    d_self_out.add_assign(&d_res2);
    let d_res1 = layer.self_norm.backward(&cache.self_norm, &d_self_out, &mut grad.self_norm);
    let da = dropout_backward(&cache.self_drop, &d_res1);
    let (mut dx, dkv) = layer.self_attn.backward(
        &cache.input,
        &cache.input,
        &cache.self_attn,
        &da,
        self_layout,
        &mut grad.self_attn,
        true,
    );
    dx.add_assign(&dkv.expect("requested"));
    dx.add_assign(&d_res1);
    (dx, d_enc)
}
