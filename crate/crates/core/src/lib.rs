//! Cycle-consistency training of a small attention ASR, an autoregressive
//! frame-regression TTS and a token language model on synthetic corpora.

pub mod anneal;
pub mod autodiff;
pub mod cycle;
pub mod data;
pub mod error;
pub mod harness;
pub mod models;
pub mod seed;

pub use error::{Error, Result};
