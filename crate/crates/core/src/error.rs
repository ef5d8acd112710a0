use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("unknown task `{0}` (expected copy, reverse or toy_grammar)")]
    UnknownTask(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sequence of length {len} exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("token id {id} is out of range for a vocabulary of {size}")]
    TokenOutOfRange { id: u32, size: usize },

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("incompatible config: field `{field}` differs (checkpoint: {expected}, current: {actual})")]
    ConfigMismatch {
        field: String,
        expected: String,
        actual: String,
    },

    #[error("malformed {what} at line {line}: {message}")]
    Parse {
        what: &'static str,
        line: usize,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step} (batch {batch_hash:016x}): l_dec={l_dec} l_len={l_len} l_rev={l_rev}")]
    NonFiniteLoss {
        step: u64,
        batch_hash: u64,
        l_dec: f64,
        l_len: f64,
        l_rev: f64,
    },

    #[error("run directory {0} is incomplete")]
    IncompleteRun(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
