use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gru::GruCell;
use super::{init_tensor, load_params, TokenSeq, EOS, INIT_BOUND, SOS};
use crate::autodiff::{log_softmax_in_place, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
}

impl LmConfig {
    pub fn new(vocab: usize) -> Self {
        LmConfig {
            vocab,
            embed: 16,
            hidden: 64,
        }
    }
}

/// Recurrent state after consuming a prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct LmState {
    hidden: Vec<f64>,
    prev: usize,
}

/// Next-token language model over label sequences.
#[derive(Clone, Debug)]
pub struct Lm {
    cfg: LmConfig,
    params: ParamStore,
    embed: ParamId,
    gru: GruCell,
    out_w: ParamId,
    out_b: ParamId,
}

impl Lm {
    pub fn new<R: Rng>(cfg: LmConfig, rng: &mut R) -> Self {
        Self::with_init(cfg, INIT_BOUND, rng)
    }

    pub fn with_init<R: Rng>(cfg: LmConfig, bound: f64, rng: &mut R) -> Self {
        let mut p = ParamStore::new();
        let embed = p.add("embed", init_tensor(&[cfg.vocab, cfg.embed], bound, rng));
        let gru = GruCell::new(&mut p, "gru", cfg.embed, cfg.hidden, bound, rng);
        let out_w = p.add("out.w", init_tensor(&[cfg.hidden, cfg.vocab], bound, rng));
        let out_b = p.add("out.b", init_tensor(&[cfg.vocab], bound, rng));
        Lm {
            cfg,
            params: p,
            embed,
            gru,
            out_w,
            out_b,
        }
    }

    pub fn from_params(cfg: LmConfig, saved: &ParamStore) -> Result<Self> {
        let mut model = Self::with_init(cfg, 0.0, &mut rand::rngs::mock::StepRng::new(0, 0));
        load_params(&mut model.params, saved, "lm")?;
        Ok(model)
    }

    pub fn config(&self) -> &LmConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Negative log-probability of `tokens`, followed by the end symbol when
    /// `terminated` is set.
    pub fn nll_on(&self, tape: &mut Tape, tokens: &[usize], terminated: bool) -> Result<Var> {
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
        let p = &self.params;
        let n = targets.len();
        let mut inputs = Vec::with_capacity(n);
        inputs.push(SOS);
        inputs.extend_from_slice(&targets[..n - 1]);
        let table = tape.param(p, self.embed);
        let emb = tape.embedding(table, &inputs)?;
        let gi_all = self.gru.project(tape, p, emb)?;
        let mut h = tape.constant(&[1, self.cfg.hidden], vec![0.0; self.cfg.hidden])?;
        let mut states = Vec::with_capacity(n);
        for t in 0..n {
            let gi = tape.gather_rows(gi_all, &[t])?;
            h = self.gru.step(tape, p, gi, h)?;
            states.push(h);
        }
        let hs = tape.concat_rows(&states)?;
        let (w, b) = (tape.param(p, self.out_w), tape.param(p, self.out_b));
        let logits = tape.matmul(hs, w)?;
        let logits = tape.add(logits, b)?;
        let lp = tape.log_softmax(logits)?;
        let mut onehot = vec![0.0; n * k];
        for (i, &y) in targets.iter().enumerate() {
            onehot[i * k + y] = 1.0;
        }
        let mask = tape.constant(&[n, k], onehot)?;
        let picked = tape.mul(lp, mask)?;
        let total = tape.sum(picked)?;
        tape.scale(total, -1.0)
    }

    /// Negative log-probability of a complete sequence (end symbol included).
    pub fn nll(&self, y: &TokenSeq) -> Result<f64> {
        self.score(y.tokens(), true)
    }

    pub fn score(&self, tokens: &[usize], terminated: bool) -> Result<f64> {
        let mut tape = Tape::new();
        let v = self.nll_on(&mut tape, tokens, terminated)?;
        Ok(tape.scalar(v))
    }

    pub fn initial_state(&self) -> LmState {
        LmState {
            hidden: vec![0.0; self.cfg.hidden],
            prev: SOS,
        }
    }

    /// Log-probabilities of the next token given the consumed prefix.
    pub fn next_log_probs(&self, state: &LmState) -> Result<Vec<f64>> {
        let (_, h) = self.advance(state)?;
        let mut tape = Tape::new();
        let p = &self.params;
        let hv = tape.constant(&[1, self.cfg.hidden], h)?;
        let (w, b) = (tape.param(p, self.out_w), tape.param(p, self.out_b));
        let logits = tape.matmul(hv, w)?;
        let logits = tape.add(logits, b)?;
        let mut row = tape.value(logits).to_vec();
        log_softmax_in_place(&mut row);
        Ok(row)
    }

    /// Consumes `token`, returning its log-probability and the new state.
    pub fn step(&self, state: &LmState, token: usize) -> Result<(f64, LmState)> {
        if token >= self.cfg.vocab {
            return Err(Error::contract(format!("token {token} out of range")));
        }
        let lp = self.next_log_probs(state)?[token];
        let (_, hidden) = self.advance(state)?;
        Ok((lp, LmState { hidden, prev: token }))
    }

    fn advance(&self, state: &LmState) -> Result<(Tape, Vec<f64>)> {
        let mut tape = Tape::new();
        let p = &self.params;
        let table = tape.param(p, self.embed);
        let e = tape.embedding(table, &[state.prev])?;
        let gi = self.gru.project(&mut tape, p, e)?;
        let h = tape.constant(&[1, self.cfg.hidden], state.hidden.clone())?;
        let h = self.gru.step(&mut tape, p, gi, h)?;
        let out = tape.value(h).to_vec();
        Ok((tape, out))
    }
}
