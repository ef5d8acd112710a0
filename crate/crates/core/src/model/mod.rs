//! Transformer encoder, the shared decoder stack (bidirectional decode path
//! and causal review path) and the three output heads.

pub mod checkpoint;
mod config;
pub mod layers;
mod network;
mod params;
pub mod tensor;

pub use config::{InitScheme, ModelConfig, ReviewMaskMode};
pub use layers::{Dropout, MaskKind, Segment};
pub use network::{sinusoidal_table, DecoderPass, EncoderPass, Network, Packed};
pub use params::{
    Attention, DecoderLayer, DecoderPath, EncoderLayer, FeedForward, LayerNorm, Linear, Parameters,
    Visit,
};
pub use tensor::Tensor;

pub use checkpoint::Checkpoint;

/// Tensor-name prefix reserved for optimiser state inside checkpoints.
pub const OPTIM_PREFIX: &str = "optim.";

use crate::corpus::{IdMatrix, TokenId, LEN};
use crate::error::{Error, Result};
use tensor::{matmul, sigmoid, softmax_in_place};

/// Parameters plus the network that interprets them.
#[derive(Debug, Clone)]
pub struct Model {
    network: Network,
    pub params: Parameters,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = Parameters::init(&config, seed);
        Self::from_parts(config, params)
    }

    /// Checks every tensor's shape against `config`.
    pub fn from_parts(config: ModelConfig, params: Parameters) -> Result<Self> {
        let reference = Parameters::init(&config, 0);
        let expected = reference.named();
        let actual = params.named();
        if expected.len() != actual.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                actual.len()
            )));
        }
        for ((en, et), (an, at)) in expected.iter().zip(&actual) {
            if en != an || et.shape() != at.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{an}` has shape {:?}, expected `{en}` {:?}",
                    at.shape(),
                    et.shape()
                )));
            }
        }
        Ok(Self {
            network: Network::new(config)?,
            params,
        })
    }

    /// Parameters from a checkpoint's tensors. Names under `optim.` belong
    /// to the optimiser and are skipped here.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut params = Parameters::init(&ckpt.config, 0);
        let mut seen = std::collections::BTreeSet::new();
        for (name, tensor) in &ckpt.tensors {
            if name.starts_with(OPTIM_PREFIX) {
                continue;
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
            }
            let slot = params
                .get_mut(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{name}`")))?;
            if slot.shape() != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    tensor.shape(),
                    slot.shape()
                )));
            }
            *slot = tensor.clone();
        }
        let expected = params.named().len();
        if seen.len() != expected {
            return Err(Error::Checkpoint(format!(
                "expected {expected} parameter tensors, found {}",
                seen.len()
            )));
        }
        Self::from_parts(ckpt.config.clone(), params)
    }

    pub fn to_checkpoint(&self, step: u64, meta: Vec<(String, String)>) -> Checkpoint {
        Checkpoint {
            config: self.config().clone(),
            step,
            meta,
            tensors: self
                .params
                .named()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.network.config
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    /// Contextual states for one source row that starts with `<LEN>`.
    pub fn encode(&self, src_row: &[TokenId]) -> Result<Tensor> {
        if src_row.first() != Some(&LEN) {
            return Err(Error::InvalidArgument(
                "source rows must start with <LEN>".into(),
            ));
        }
        let packed = Packed::from_rows(&[src_row]);
        Ok(self
            .network
            .encoder_forward(&self.params, &packed, &mut Dropout::disabled())?
            .output)
    }

    /// Encodes a padded batch; each result has `src_len[r]` rows.
    pub fn encode_batch(&self, src: &IdMatrix, src_len: &[usize]) -> Result<Vec<Tensor>> {
        if src_len.len() != src.rows {
            return Err(Error::LengthMismatch {
                expected: src.rows,
                actual: src_len.len(),
            });
        }
        let rows: Vec<&[TokenId]> = (0..src.rows)
            .map(|r| {
                if src_len[r] > src.cols || src_len[r] == 0 {
                    Err(Error::LengthMismatch {
                        expected: src.cols,
                        actual: src_len[r],
                    })
                } else if src.row(r)[0] != LEN {
                    Err(Error::InvalidArgument("source rows must start with <LEN>".into()))
                } else {
                    Ok(&src.row(r)[..src_len[r]])
                }
            })
            .collect::<Result<_>>()?;
        let packed = Packed::from_rows(&rows);
        let out = self
            .network
            .encoder_forward(&self.params, &packed, &mut Dropout::disabled())?
            .output;
        Ok(packed
            .segments
            .iter()
            .map(|s| out.slice_rows(s.start, s.len))
            .collect())
    }

    fn run_decoder(&self, h_enc: &Tensor, input: &[TokenId], path: DecoderPath) -> Result<Tensor> {
        if input.is_empty() {
            return Err(Error::InvalidArgument("empty target input".into()));
        }
        let packed = Packed::from_rows(&[input]);
        let src = [Segment {
            start: 0,
            len: h_enc.rows(),
        }];
        Ok(self
            .network
            .decoder_forward(&self.params, &packed, h_enc, &src, path, &mut Dropout::disabled())?
            .output)
    }

    /// Bidirectional decoder states; `y_in` carries `<MASK>` at masked slots.
    pub fn decode(&self, h_enc: &Tensor, y_in: &[TokenId]) -> Result<Tensor> {
        self.run_decoder(h_enc, y_in, DecoderPath::Decode)
    }

    /// Like [`Model::decode`], checking `y_in` against a declared length.
    pub fn decode_checked(&self, h_enc: &Tensor, y_in: &[TokenId], tgt_len: usize) -> Result<Tensor> {
        if y_in.len() != tgt_len {
            return Err(Error::LengthMismatch {
                expected: tgt_len,
                actual: y_in.len(),
            });
        }
        self.decode(h_enc, y_in)
    }

    /// Causal states over the reviewed tokens, with the decoder's weights.
    pub fn review(&self, h_enc: &Tensor, y_hat: &[TokenId]) -> Result<Tensor> {
        if y_hat.is_empty() {
            return Err(Error::InvalidArgument("empty review input".into()));
        }
        let input = self.network.review_input(&Packed::from_rows(&[y_hat]));
        self.run_decoder(h_enc, &input.ids, DecoderPath::Review)
    }

    pub fn token_logits(&self, h_dec: &Tensor) -> Tensor {
        matmul(h_dec, &self.params.token_head)
    }

    /// Row-wise softmax of `h_dec · W1`.
    pub fn token_probs(&self, h_dec: &Tensor) -> Tensor {
        let mut logits = self.token_logits(h_dec);
        for r in 0..logits.rows() {
            softmax_in_place(logits.row_mut(r));
        }
        logits
    }

    pub fn review_logits(&self, h_rev: &Tensor) -> Vec<f64> {
        matmul(h_rev, &self.params.review_head).into_vec()
    }

    /// `σ(h_rev · W2)`: per-position probability that the token is kept.
    pub fn review_probs(&self, h_rev: &Tensor) -> Vec<f64> {
        self.review_logits(h_rev).into_iter().map(sigmoid).collect()
    }

    /// Logits over target lengths `1..=N` from the `<LEN>` state (row 0).
    pub fn length_logits(&self, h_enc: &Tensor) -> Vec<f64> {
        let h0 = Tensor::from_vec(1, h_enc.cols(), h_enc.row(0).to_vec());
        matmul(&h0, &self.params.length_head).into_vec()
    }
}

#[cfg(test)]
mod tests;
