//! Attention encoder-decoder recognizer.
//!
//! Encoder: one bidirectional GRU layer over feature frames. Attention:
//! single-head additive scoring `vᵀ tanh(W_k h_t + W_q s + b)`. Decoder: one
//! GRU layer fed `[embed(y_{l-1}); c_l]`, with output logits computed from
//! `[s_l; c_l]`. The context is `c_l = α Σ_t a_lt h_t`; `α = 1` is the plain
//! attention context and `α = 0` removes all acoustic input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gru::GruCell;
use super::{
    argmax, init_tensor, load_params, sample_index, AttentionWeights, ContextVector, EncoderStates, FeatureSeq,
    Hypothesis, TokenSeq, EOS, INIT_BOUND, SOS,
};
use crate::autodiff::{log_softmax_in_place, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsrConfig {
    pub vocab: usize,
    pub feat_dim: usize,
    pub enc_hidden: usize,
    pub att_dim: usize,
    pub dec_hidden: usize,
    pub embed: usize,
}

impl AsrConfig {
    pub fn new(vocab: usize, feat_dim: usize) -> Self {
        AsrConfig {
            vocab,
            feat_dim,
            enc_hidden: 32,
            att_dim: 32,
            dec_hidden: 64,
            embed: 16,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Asr {
    cfg: AsrConfig,
    params: ParamStore,
    enc_fwd: GruCell,
    enc_bwd: GruCell,
    att_key: ParamId,
    att_query: ParamId,
    att_bias: ParamId,
    att_score: ParamId,
    embed: ParamId,
    dec: GruCell,
    out_w: ParamId,
    out_b: ParamId,
}

/// Encoder output placed on a tape, with the attention keys precomputed.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    pub states: Var,
    keys: Var,
    n_frames: usize,
}

/// Encoder output detached from any tape, reusable across many decodes.
#[derive(Clone, Debug)]
pub struct EncoderCache {
    states: Tensor,
    keys: Tensor,
}

impl EncoderCache {
    pub fn states(&self) -> EncoderStates {
        EncoderStates(self.states.clone())
    }
}

impl Asr {
    pub fn new<R: Rng>(cfg: AsrConfig, rng: &mut R) -> Self {
        Self::with_init(cfg, INIT_BOUND, rng)
    }

    /// Builds the model with parameters uniform in `(-bound, bound)`; a bound
    /// of zero yields the all-zero model.
    pub fn with_init<R: Rng>(cfg: AsrConfig, bound: f64, rng: &mut R) -> Self {
        let mut p = ParamStore::new();
        let u = |p: &mut ParamStore, name: &str, shape: &[usize], rng: &mut R| {
            p.add(name, init_tensor(shape, bound, rng))
        };
        let two_h = 2 * cfg.enc_hidden;
        let enc_fwd = GruCell::new(&mut p, "enc.fwd", cfg.feat_dim, cfg.enc_hidden, bound, rng);
        let enc_bwd = GruCell::new(&mut p, "enc.bwd", cfg.feat_dim, cfg.enc_hidden, bound, rng);
        let att_key = u(&mut p, "att.key", &[two_h, cfg.att_dim], rng);
        let att_query = u(&mut p, "att.query", &[cfg.dec_hidden, cfg.att_dim], rng);
        let att_bias = u(&mut p, "att.bias", &[cfg.att_dim], rng);
        let att_score = u(&mut p, "att.score", &[cfg.att_dim, 1], rng);
        let embed = u(&mut p, "dec.embed", &[cfg.vocab, cfg.embed], rng);
        let dec = GruCell::new(&mut p, "dec.gru", cfg.embed + two_h, cfg.dec_hidden, bound, rng);
        let out_w = u(&mut p, "dec.out.w", &[cfg.dec_hidden + two_h, cfg.vocab], rng);
        let out_b = u(&mut p, "dec.out.b", &[cfg.vocab], rng);
        Asr {
            cfg,
            params: p,
            enc_fwd,
            enc_bwd,
            att_key,
            att_query,
            att_bias,
            att_score,
            embed,
            dec,
            out_w,
            out_b,
        }
    }

    /// Rebuilds a model from saved parameters.
    pub fn from_params(cfg: AsrConfig, saved: &ParamStore) -> Result<Self> {
        let mut model = Self::with_init(cfg, 0.0, &mut rand::rngs::mock::StepRng::new(0, 0));
        load_params(&mut model.params, saved, "asr")?;
        Ok(model)
    }

    pub fn config(&self) -> &AsrConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    // ---- tape-level building blocks -------------------------------------

    pub fn encode_on(&self, tape: &mut Tape, x: &FeatureSeq) -> Result<EncodedVars> {
        if x.dim() != self.cfg.feat_dim {
            return Err(Error::shape("encode", &[x.n_frames(), x.dim()], &[self.cfg.feat_dim]));
        }
        let n = x.n_frames();
        let p = &self.params;
        let xv = tape.constant(&[n, x.dim()], x.data().to_vec())?;
        let h0 = tape.constant(&[1, self.cfg.enc_hidden], vec![0.0; self.cfg.enc_hidden])?;

        let gi_f = self.enc_fwd.project(tape, p, xv)?;
        let mut h = h0;
        let mut fwd = Vec::with_capacity(n);
        for t in 0..n {
            let gi = tape.gather_rows(gi_f, &[t])?;
            h = self.enc_fwd.step(tape, p, gi, h)?;
            fwd.push(h);
        }
        let gi_b = self.enc_bwd.project(tape, p, xv)?;
        let mut h = h0;
        let mut bwd = vec![h0; n];
        for t in (0..n).rev() {
            let gi = tape.gather_rows(gi_b, &[t])?;
            h = self.enc_bwd.step(tape, p, gi, h)?;
            bwd[t] = h;
        }
        let f = tape.concat_rows(&fwd)?;
        let b = tape.concat_rows(&bwd)?;
        let states = tape.concat(&[f, b])?;
        let wk = tape.param(p, self.att_key);
        let keys = tape.matmul(states, wk)?;
        Ok(EncodedVars {
            states,
            keys,
            n_frames: n,
        })
    }

    fn cache_on(&self, tape: &mut Tape, cache: &EncoderCache) -> EncodedVars {
        EncodedVars {
            states: tape.leaf(&cache.states),
            keys: tape.leaf(&cache.keys),
            n_frames: cache.states.shape()[0],
        }
    }

    /// Attention distribution `[1, T]` for decoder state `state` (`[1, H_dec]`).
    pub fn attend_on(&self, tape: &mut Tape, state: Var, enc: &EncodedVars) -> Result<Var> {
        let p = &self.params;
        let wq = tape.param(p, self.att_query);
        let b = tape.param(p, self.att_bias);
        let v = tape.param(p, self.att_score);
        let q = tape.matmul(state, wq)?;
        let q = tape.add(q, b)?;
        let e = tape.add(enc.keys, q)?;
        let e = tape.tanh(e)?;
        let scores = tape.matmul(e, v)?;
        let scores = tape.transpose(scores)?;
        tape.softmax(scores)
    }

    /// `α · a·H`; `None` skips the scaling node entirely.
    pub fn context_on(&self, tape: &mut Tape, weights: Var, states: Var, alpha: Option<f64>) -> Result<Var> {
        let c = tape.matmul(weights, states)?;
        match alpha {
            Some(a) => tape.scale(c, a),
            None => Ok(c),
        }
    }

    /// One decoder recurrence; returns `(logits [1, K], new state)`.
    pub fn decode_step_on(&self, tape: &mut Tape, context: Var, y_prev: usize, state: Var) -> Result<(Var, Var)> {
        if y_prev >= self.cfg.vocab {
            return Err(Error::contract(format!("previous token {y_prev} out of range")));
        }
        let p = &self.params;
        let emb = tape.param(p, self.embed);
        let e = tape.embedding(emb, &[y_prev])?;
        let inp = tape.concat(&[e, context])?;
        let gi = self.dec.project(tape, p, inp)?;
        let new_state = self.dec.step(tape, p, gi, state)?;
        let oc = tape.concat(&[new_state, context])?;
        let w = tape.param(p, self.out_w);
        let b = tape.param(p, self.out_b);
        let logits = tape.matmul(oc, w)?;
        let logits = tape.add(logits, b)?;
        Ok((logits, new_state))
    }

    fn initial_state(&self, tape: &mut Tape) -> Result<Var> {
        tape.constant(&[1, self.cfg.dec_hidden], vec![0.0; self.cfg.dec_hidden])
    }

    /// Teacher-forced log-probability of `tokens` (plus the end symbol when
    /// `terminated`), as a scalar node.
    pub fn log_prob_on(
        &self,
        tape: &mut Tape,
        enc: &EncodedVars,
        tokens: &[usize],
        terminated: bool,
        alpha: Option<f64>,
    ) -> Result<Var> {
        let k = self.cfg.vocab;
        let mut targets = tokens.to_vec();
        if terminated {
            targets.push(EOS);
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::contract(format!("target token {bad} out of range")));
        }
        if targets.is_empty() {
            return tape.constant(&[], vec![0.0]);
        }
        let mut state = self.initial_state(tape)?;
        let mut prev = SOS;
        let mut rows = Vec::with_capacity(targets.len());
        for &y in &targets {
            let a = self.attend_on(tape, state, enc)?;
            let c = self.context_on(tape, a, enc.states, alpha)?;
            let (logits, s) = self.decode_step_on(tape, c, prev, state)?;
            rows.push(logits);
            state = s;
            prev = y;
        }
        let logits = tape.concat_rows(&rows)?;
        let lp = tape.log_softmax(logits)?;
        let mut onehot = vec![0.0; targets.len() * k];
        for (i, &y) in targets.iter().enumerate() {
            onehot[i * k + y] = 1.0;
        }
        let mask = tape.constant(&[targets.len(), k], onehot)?;
        let picked = tape.mul(lp, mask)?;
        tape.sum(picked)
    }

    /// Teacher-forced negative log-likelihood of `y` followed by the end symbol.
    pub fn nll_on(&self, tape: &mut Tape, x: &FeatureSeq, y: &TokenSeq, alpha: f64) -> Result<Var> {
        let enc = self.encode_on(tape, x)?;
        let lp = self.log_prob_on(tape, &enc, y.tokens(), true, Some(alpha))?;
        tape.scale(lp, -1.0)
    }

    // ---- value-level API --------------------------------------------------

    pub fn encode_cache(&self, x: &FeatureSeq) -> Result<EncoderCache> {
        let mut tape = Tape::new();
        let enc = self.encode_on(&mut tape, x)?;
        Ok(EncoderCache {
            states: tape.to_tensor(enc.states),
            keys: tape.to_tensor(enc.keys),
        })
    }

    pub fn encode(&self, x: &FeatureSeq) -> Result<EncoderStates> {
        Ok(self.encode_cache(x)?.states())
    }

    /// Attention weights for a decoder state over already-encoded frames.
    pub fn attend(&self, state: &[f64], states: &EncoderStates) -> Result<AttentionWeights> {
        if state.len() != self.cfg.dec_hidden {
            return Err(Error::shape("attend", &[state.len()], &[self.cfg.dec_hidden]));
        }
        let mut tape = Tape::new();
        let sv = tape.leaf(&states.0);
        let wk = tape.param(&self.params, self.att_key);
        let keys = tape.matmul(sv, wk)?;
        let enc = EncodedVars {
            states: sv,
            keys,
            n_frames: states.n_frames(),
        };
        let s = tape.constant(&[1, state.len()], state.to_vec())?;
        let a = self.attend_on(&mut tape, s, &enc)?;
        Ok(AttentionWeights(tape.value(a).to_vec()))
    }

    /// `α Σ_t a_t h_t`.
    pub fn context(weights: &AttentionWeights, states: &EncoderStates, alpha: f64) -> Result<ContextVector> {
        let (n, h) = (states.n_frames(), states.hidden());
        if weights.0.len() != n {
            return Err(Error::shape("context", &[weights.0.len()], &[n, h]));
        }
        let mut tape = Tape::new();
        let a = tape.constant(&[1, n], weights.0.clone())?;
        let hs = tape.leaf(&states.0);
        let c = tape.matmul(a, hs)?;
        let c = tape.scale(c, alpha)?;
        Ok(ContextVector(tape.value(c).to_vec()))
    }

    /// One decoder step from explicit values; returns `(logits, new state)`.
    pub fn decode_step(&self, context: &ContextVector, y_prev: usize, state: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let c = tape.constant(&[1, context.0.len()], context.0.clone())?;
        let s = tape.constant(&[1, state.len()], state.to_vec())?;
        let (logits, ns) = self.decode_step_on(&mut tape, c, y_prev, s)?;
        Ok((tape.value(logits).to_vec(), tape.value(ns).to_vec()))
    }

    pub fn initial_decoder_state(&self) -> Vec<f64> {
        vec![0.0; self.cfg.dec_hidden]
    }

    pub fn nll(&self, x: &FeatureSeq, y: &TokenSeq, alpha: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let v = self.nll_on(&mut tape, x, y, alpha)?;
        Ok(tape.scalar(v))
    }

    /// The α-free attention path (no scaling node at all).
    pub fn nll_unscaled(&self, x: &FeatureSeq, y: &TokenSeq) -> Result<f64> {
        let mut tape = Tape::new();
        let enc = self.encode_on(&mut tape, x)?;
        let lp = self.log_prob_on(&mut tape, &enc, y.tokens(), true, None)?;
        let v = tape.scale(lp, -1.0)?;
        Ok(tape.scalar(v))
    }

    /// Per-step log-probabilities `[steps, K]` along a teacher-forced path.
    pub fn step_log_probs(&self, x: &FeatureSeq, y: &TokenSeq, alpha: f64) -> Result<Vec<Vec<f64>>> {
        let cache = self.encode_cache(x)?;
        let mut tape = Tape::new();
        let enc = self.cache_on(&mut tape, &cache);
        let mut state = self.initial_state(&mut tape)?;
        let mut prev = SOS;
        let mut out = Vec::new();
        for &target in y.tokens().iter().chain(std::iter::once(&EOS)) {
            let (lp, s) = self.step_from(&mut tape, &enc, state, prev, Some(alpha))?;
            out.push(lp);
            state = s;
            prev = target;
        }
        Ok(out)
    }

    fn step_from(
        &self,
        tape: &mut Tape,
        enc: &EncodedVars,
        state: Var,
        prev: usize,
        alpha: Option<f64>,
    ) -> Result<(Vec<f64>, Var)> {
        let a = self.attend_on(tape, state, enc)?;
        let c = self.context_on(tape, a, enc.states, alpha)?;
        let (logits, s) = self.decode_step_on(tape, c, prev, state)?;
        let mut lp = tape.value(logits).to_vec();
        log_softmax_in_place(&mut lp);
        Ok((lp, s))
    }

    fn decode_with<F>(&self, cache: &EncoderCache, alpha: f64, max_len: usize, mut choose: F) -> Result<Hypothesis>
    where
        F: FnMut(&[f64]) -> usize,
    {
        let mut tape = Tape::new();
        let enc = self.cache_on(&mut tape, cache);
        debug_assert!(enc.n_frames > 0);
        let mut state = self.initial_state(&mut tape)?;
        let mut prev = SOS;
        let mut tokens = Vec::new();
        let mut log_prob = 0.0;
        let mut terminated = false;
        for _ in 0..max_len {
            let (lp, s) = self.step_from(&mut tape, &enc, state, prev, Some(alpha))?;
            let k = choose(&lp);
            log_prob += lp[k];
            if k == EOS {
                terminated = true;
                break;
            }
            tokens.push(k);
            state = s;
            prev = k;
        }
        Ok(Hypothesis {
            seq: TokenSeq::from_ids(tokens),
            log_prob,
            terminated,
        })
    }

    /// `n` ancestral samples at temperature 1 from `p(·|x)`.
    pub fn sample<R: Rng>(&self, x: &FeatureSeq, n: usize, max_len: usize, rng: &mut R) -> Result<Vec<Hypothesis>> {
        let cache = self.encode_cache(x)?;
        self.sample_cached(&cache, n, max_len, rng)
    }

    pub fn sample_cached<R: Rng>(&self, cache: &EncoderCache, n: usize, max_len: usize, rng: &mut R) -> Result<Vec<Hypothesis>> {
        if n == 0 {
            return Err(Error::contract("sample count must be at least 1"));
        }
        (0..n)
            .map(|_| self.decode_with(cache, 1.0, max_len, |lp| sample_index(lp, rng)))
            .collect()
    }

    pub fn greedy(&self, x: &FeatureSeq, alpha: f64, max_len: usize) -> Result<Hypothesis> {
        let cache = self.encode_cache(x)?;
        self.decode_with(&cache, alpha, max_len, argmax)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> Asr {
        let cfg = AsrConfig {
            vocab: 5,
            feat_dim: 3,
            enc_hidden: 4,
            att_dim: 3,
            dec_hidden: 5,
            embed: 2,
        };
        Asr::new(cfg, &mut ChaCha8Rng::seed_from_u64(3))
    }

    fn feats(n: usize, seed: u64) -> FeatureSeq {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureSeq::new(n, 3, (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn one_state_row_per_frame() {
        let m = small();
        let h = m.encode(&feats(5, 1)).unwrap();
        assert_eq!(h.n_frames(), 5);
        assert_eq!(h.hidden(), 8);
        assert_eq!(h, m.encode(&feats(5, 1)).unwrap());
    }

    #[test]
    fn zero_encoder_gives_zero_states() {
        let cfg = small().config().clone();
        let m = Asr::with_init(cfg, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
        let h = m.encode(&feats(4, 2)).unwrap();
        assert!(h.0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_feature_dim_is_shape_error() {
        let m = small();
        let x = FeatureSeq::zeros(3, 4);
        assert!(matches!(m.encode(&x), Err(Error::Shape { .. })));
    }

    #[test]
    fn attention_cases() {
        let m = small();
        let one = EncoderStates(Tensor::new(&[1, 8], vec![0.3; 8]).unwrap());
        let a = m.attend(&m.initial_decoder_state(), &one).unwrap();
        assert_eq!(a.0, vec![1.0]);

        let four = EncoderStates(Tensor::new(&[4, 8], vec![0.5; 32]).unwrap());
        let a = m.attend(&[0.1, -0.2, 0.3, 0.0, 0.4], &four).unwrap();
        for w in a.0 {
            assert!((w - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn context_cases() {
        let h = EncoderStates(Tensor::new(&[1, 2], vec![2.0, 7.0]).unwrap());
        let c = Asr::context(&AttentionWeights(vec![1.0]), &h, 1.0).unwrap();
        assert_eq!(c.0, vec![2.0, 7.0]);

        let h = EncoderStates(Tensor::new(&[2, 2], vec![1.0, 3.0, 3.0, 5.0]).unwrap());
        let c = Asr::context(&AttentionWeights(vec![0.5, 0.5]), &h, 0.5).unwrap();
        assert_eq!(c.0, vec![1.0, 2.0]);
        let c = Asr::context(&AttentionWeights(vec![0.3, 0.7]), &h, 0.0).unwrap();
        assert!(c.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decode_step_is_deterministic_with_k_logits() {
        let m = small();
        let c = ContextVector(vec![0.1; 8]);
        let s = m.initial_decoder_state();
        let (l1, s1) = m.decode_step(&c, SOS, &s).unwrap();
        let (l2, s2) = m.decode_step(&c, SOS, &s).unwrap();
        assert_eq!(l1.len(), 5);
        assert_eq!((l1, s1), (l2, s2));
    }

    #[test]
    fn uniform_logits_give_closed_form_nll() {
        let cfg = AsrConfig {
            vocab: 4,
            ..small().config().clone()
        };
        let m = Asr::with_init(cfg, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
        let y = TokenSeq::new(vec![2, 3], 4).unwrap();
        let nll = m.nll(&feats(3, 4), &y, 1.0).unwrap();
        assert!((nll - 3.0 * 4f64.ln()).abs() < 1e-12);
        assert!((nll - 4.15888).abs() < 1e-5);
    }

    #[test]
    fn alpha_zero_ignores_features() {
        let m = small();
        let y = TokenSeq::new(vec![2, 4, 3], 5).unwrap();
        let a = m.nll(&feats(6, 10), &y, 0.0).unwrap();
        let b = m.nll(&feats(6, 11), &y, 0.0).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_ne!(m.nll(&feats(6, 10), &y, 1.0).unwrap(), m.nll(&feats(6, 11), &y, 1.0).unwrap());
    }

    #[test]
    fn alpha_one_matches_unscaled_path() {
        let m = small();
        let y = TokenSeq::new(vec![3, 2], 5).unwrap();
        let x = feats(4, 9);
        assert_eq!(m.nll(&x, &y, 1.0).unwrap().to_bits(), m.nll_unscaled(&x, &y).unwrap().to_bits());
    }

    #[test]
    fn sampling_contracts() {
        let m = small();
        let x = feats(4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let hyps = m.sample(&x, 7, 4, &mut rng).unwrap();
        assert_eq!(hyps.len(), 7);
        for h in &hyps {
            assert!(h.log_prob <= 0.0);
            assert!(h.seq.len() <= 4);
            assert!(h.terminated || h.seq.len() == 4);
        }
        let again = m.sample(&x, 7, 4, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(hyps, again);
        assert!(m.sample(&x, 0, 4, &mut rng).is_err());
    }

    #[test]
    fn sampled_log_prob_matches_teacher_forcing() {
        let m = small();
        let x = feats(4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for h in m.sample(&x, 5, 3, &mut rng).unwrap() {
            let mut tape = Tape::new();
            let enc = m.encode_on(&mut tape, &x).unwrap();
            let lp = m.log_prob_on(&mut tape, &enc, h.seq.tokens(), h.terminated, Some(1.0)).unwrap();
            assert!((tape.scalar(lp) - h.log_prob).abs() < 1e-12);
        }
    }

    #[test]
    fn greedy_takes_argmax_each_step() {
        let m = small();
        let x = feats(4, 5);
        let g = m.greedy(&x, 1.0, 6).unwrap();
        assert_eq!(g, m.greedy(&x, 1.0, 6).unwrap());
        let steps = m.step_log_probs(&x, &g.seq, 1.0).unwrap();
        for (i, lp) in steps.iter().enumerate().take(g.seq.len()) {
            assert_eq!(argmax(lp), g.seq.tokens()[i]);
        }
    }
}
