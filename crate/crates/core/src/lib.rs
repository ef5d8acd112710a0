//! A conditional masked translation model trained jointly with a
//! weight-tied causal reviewer that labels each predicted token as keep or
//! replace, plus Mask-Predict decoding and analysis instruments.

pub mod analysis;
pub mod cli;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod model;
pub mod training;

pub use error::{Error, Result};
