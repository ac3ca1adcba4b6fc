//! The three parametric models: an attention encoder-decoder recognizer, an
//! autoregressive frame-regression synthesizer and a token language model.
//!
//! Token id conventions: `0` is end-of-sequence, `1` is start-of-sequence.
//! Output distributions range over all `K` ids; the start symbol is never a
//! training target, so trained models give it vanishing probability.

mod asr;
mod gru;
mod lm;
mod tts;

pub use asr::{Asr, AsrConfig};
pub use lm::{Lm, LmConfig, LmState};
pub use tts::{Tts, TtsConfig, TtsLoss};

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Parameterized, Tensor};
use crate::error::{Error, Result};

macro_rules! parameterized {
    ($($model:ty),*) => {$(
        impl Parameterized for $model {
            fn params(&self) -> &ParamStore {
                <$model>::params(self)
            }

            fn params_mut(&mut self) -> &mut ParamStore {
                <$model>::params_mut(self)
            }
        }
    )*};
}

parameterized!(Asr, Tts, Lm);

pub const EOS: usize = 0;
pub const SOS: usize = 1;

/// Initialisation bound for every parameter.
pub const INIT_BOUND: f64 = 0.08;

/// A label sequence without the implicit leading start symbol.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(Vec<usize>);

impl TokenSeq {
    pub fn new(tokens: Vec<usize>, vocab: usize) -> Result<Self> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::contract(format!("token id {bad} out of range for vocab {vocab}")));
        }
        Ok(TokenSeq(tokens))
    }

    /// Builds a sequence without range validation (ids checked by the model).
    pub fn from_ids(tokens: Vec<usize>) -> Self {
        TokenSeq(tokens)
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        match self.0.iter().find(|&&t| t >= vocab) {
            Some(&bad) => Err(Error::contract(format!(
                "token id {bad} out of range for vocab {vocab}"
            ))),
            None => Ok(()),
        }
    }
}

/// A decoded or sampled sequence together with its log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub seq: TokenSeq,
    /// Sum of the per-step log-probabilities of every emitted id, including
    /// the terminating end symbol when `terminated` is true.
    pub log_prob: f64,
    /// True when decoding stopped on the end symbol rather than the length cap.
    pub terminated: bool,
}

/// `n_frames × dim` feature matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSeq {
    n_frames: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureSeq {
    pub fn new(n_frames: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if n_frames == 0 || dim == 0 || data.len() != n_frames * dim {
            return Err(Error::shape("feature_seq", &[n_frames, dim], &[data.len()]));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("feature values".into()));
        }
        Ok(FeatureSeq { n_frames, dim, data })
    }

    pub fn zeros(n_frames: usize, dim: usize) -> Self {
        FeatureSeq::new(n_frames, dim, vec![0.0; n_frames * dim]).expect("nonzero extents")
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.n_frames, self.dim], self.data.clone()).expect("validated on construction")
    }
}

/// Encoder output `H`, one row per input frame.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStates(pub Tensor);

impl EncoderStates {
    pub fn n_frames(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.0.shape()[1]
    }
}

/// Attention distribution over encoder frames.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights(pub Vec<f64>);

/// Attention-weighted (and possibly scaled) sum of encoder states.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextVector(pub Vec<f64>);

/// Uniform `(-bound, bound)` initialisation; a zero bound gives zeros.
pub(crate) fn init_tensor<R: rand::Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    if bound > 0.0 {
        Tensor::uniform(shape, bound, rng)
    } else {
        Tensor::zeros(shape)
    }
}

/// Copies parameter values from `src` into `dst` by name, checking shapes.
pub(crate) fn load_params(dst: &mut ParamStore, src: &ParamStore, what: &str) -> Result<()> {
    let ids: Vec<_> = dst.ids().collect();
    for id in ids {
        let name = dst.name(id).to_string();
        let sid = src
            .find(&name)
            .ok_or_else(|| Error::Config(format!("{what}: missing parameter {name}")))?;
        let (want, got) = (dst.get(id).shape().to_vec(), src.get(sid).shape().to_vec());
        if want != got {
            return Err(Error::shape("load_params", &want, &got));
        }
        dst.set_values(id, src.get(sid).data())?;
    }
    if src.len() != dst.len() {
        return Err(Error::Config(format!(
            "{what}: expected {} parameters, found {}",
            dst.len(),
            src.len()
        )));
    }
    Ok(())
}

/// Index of the largest entry; ties go to the lowest index.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Draws an index from log-probabilities by inverse CDF.
pub(crate) fn sample_index<R: rand::Rng>(log_probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, lp) in log_probs.iter().enumerate() {
        let p = lp.exp();
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_ids_are_range_checked() {
        assert!(TokenSeq::new(vec![2, 3], 4).is_ok());
        assert!(TokenSeq::new(vec![2, 4], 4).is_err());
    }

    #[test]
    fn feature_seq_needs_frames() {
        assert!(FeatureSeq::new(0, 3, vec![]).is_err());
        assert!(FeatureSeq::new(2, 3, vec![0.0; 5]).is_err());
        let f = FeatureSeq::new(2, 3, (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(f.frame(1), &[3.0, 4.0, 5.0]);
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
