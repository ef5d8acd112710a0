use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// How the review path sees the token under judgment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReviewMaskMode {
    /// Unshifted input; position `t` attends to `0..=t`, so it sees `ŷ_t`.
    Inclusive,
    /// `<SOS>`-shifted input; position `t` only sees `ŷ_{<t}`.
    Shifted,
}

impl FromStr for ReviewMaskMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inclusive" => Ok(Self::Inclusive),
            "shifted" => Ok(Self::Shifted),
            _ => Err(Error::InvalidArgument(format!(
                "review_mask_mode must be inclusive or shifted, got `{s}`"
            ))),
        }
    }
}

impl fmt::Display for ReviewMaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Inclusive => "inclusive",
            Self::Shifted => "shifted",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// N(0, scale²)
    Normal,
    /// U(-scale, scale)
    Uniform,
}

impl FromStr for InitScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Self::Normal),
            "uniform" => Ok(Self::Uniform),
            _ => Err(Error::InvalidArgument(format!(
                "init must be normal or uniform, got `{s}`"
            ))),
        }
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Normal => "normal",
            Self::Uniform => "uniform",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub vocab_size: usize,
    /// N: longest target, `<EOS>` included. The length head has N classes.
    pub max_target_len: usize,
    /// Longest source, excluding the `<LEN>` slot.
    pub max_source_len: usize,
    pub dropout: f64,
    pub review_mask_mode: ReviewMaskMode,
    pub init: InitScheme,
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            model_dim: 64,
            ffn_dim: 256,
            heads: 4,
            vocab_size: 0,
            max_target_len: 64,
            max_source_len: 64,
            dropout: 0.0,
            review_mask_mode: ReviewMaskMode::Inclusive,
            init: InitScheme::Normal,
            init_scale: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| {
            Err(Error::Config {
                key: key.into(),
                message: message.into(),
            })
        };
        if self.layers == 0 {
            return bad("layers", "must be positive");
        }
        if self.heads == 0 || self.model_dim == 0 || self.model_dim % self.heads != 0 {
            return bad("model_dim", "must be a positive multiple of heads");
        }
        if self.ffn_dim == 0 {
            return bad("ffn_dim", "must be positive");
        }
        if self.vocab_size <= crate::corpus::NUM_SPECIALS {
            return bad("vocab_size", "must exceed the number of reserved tokens");
        }
        if self.max_target_len == 0 {
            return bad("max_target_len", "must be positive");
        }
        if self.max_source_len == 0 {
            return bad("max_source_len", "must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must lie in [0, 1)");
        }
        if !(self.init_scale.is_finite() && self.init_scale > 0.0) {
            return bad("init_scale", "must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// Rows of the positional table: sources take one extra slot for `<LEN>`.
    pub fn positions(&self) -> usize {
        (self.max_source_len + 1).max(self.max_target_len)
    }

    /// Canonical `(key, value)` list; used for checkpoints and for naming
    /// the first mismatched field on resume.
    pub fn fields(&self) -> Vec<(&'static str, String)> {
        vec![
            ("layers", self.layers.to_string()),
            ("model_dim", self.model_dim.to_string()),
            ("ffn_dim", self.ffn_dim.to_string()),
            ("heads", self.heads.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("max_target_len", self.max_target_len.to_string()),
            ("max_source_len", self.max_source_len.to_string()),
            ("dropout", format!("{:?}", self.dropout)),
            ("review_mask_mode", self.review_mask_mode.to_string()),
            ("init", self.init.to_string()),
            ("init_scale", format!("{:?}", self.init_scale)),
        ]
    }

    pub fn set_field(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value.trim().parse().map_err(|_| Error::Config {
                key: key.into(),
                message: format!("cannot parse `{value}`"),
            })
        }
        let wrap = |e: Error| Error::Config {
            key: key.into(),
            message: e.to_string(),
        };
        match key {
            "layers" => self.layers = parse(key, value)?,
            "model_dim" => self.model_dim = parse(key, value)?,
            "ffn_dim" => self.ffn_dim = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "max_target_len" => self.max_target_len = parse(key, value)?,
            "max_source_len" => self.max_source_len = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "review_mask_mode" => self.review_mask_mode = value.trim().parse().map_err(wrap)?,
            "init" => self.init = value.trim().parse().map_err(wrap)?,
            "init_scale" => self.init_scale = parse(key, value)?,
            _ => {
                return Err(Error::Config {
                    key: key.into(),
                    message: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    /// Errors naming the first field that differs from `other`.
    pub fn ensure_compatible(&self, other: &ModelConfig) -> Result<()> {
        for ((key, mine), (_, theirs)) in self.fields().into_iter().zip(other.fields()) {
            if mine != theirs {
                return Err(Error::ConfigMismatch {
                    field: key.into(),
                    expected: mine,
                    actual: theirs,
                });
            }
        }
        Ok(())
    }
}
