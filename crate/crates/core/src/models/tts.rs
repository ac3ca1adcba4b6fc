//! Autoregressive frame regressor with a stop flag.
//!
//! Tokens (plus a trailing end symbol) are embedded into a memory `M`. Each
//! output frame attends to `M` through a Gaussian-shaped window centred on a
//! monotone position `κ_t`; the window contributes a context vector to a GRU
//! that also sees the previous frame. The GRU state, concatenated with the
//! context, yields the frame mean `μ_t`, a stop logit, and the advance
//! `κ_{t+1} - κ_t = σ(·) ∈ (0, 1)`.
//!
//! The likelihood is a unit-variance Gaussian on frames (constant dropped)
//! plus a per-frame binary cross-entropy on the stop flag, which is 1 only on
//! the final frame.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gru::GruCell;
use super::{init_tensor, load_params, FeatureSeq, TokenSeq, EOS, INIT_BOUND};
use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TtsConfig {
    pub vocab: usize,
    pub feat_dim: usize,
    pub embed: usize,
    pub hidden: usize,
    /// Inverse squared width of the attention window over token positions.
    pub window_sharpness: f64,
}

impl TtsConfig {
    pub fn new(vocab: usize, feat_dim: usize) -> Self {
        TtsConfig {
            vocab,
            feat_dim,
            embed: 16,
            hidden: 64,
            window_sharpness: 4.0,
        }
    }
}

/// Components of the teacher-forced TTS negative log-likelihood.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TtsLoss {
    /// `½ Σ_t ‖x_t − μ_t‖²`
    pub squared_error: f64,
    /// `Σ_t BCE(stop_t)`
    pub stop_xent: f64,
}

impl TtsLoss {
    pub fn total(&self) -> f64 {
        self.squared_error + self.stop_xent
    }
}

#[derive(Clone, Debug)]
pub struct Tts {
    cfg: TtsConfig,
    params: ParamStore,
    embed: ParamId,
    gru: GruCell,
    mu_w: ParamId,
    mu_b: ParamId,
    stop_w: ParamId,
    stop_b: ParamId,
    adv_w: ParamId,
    adv_b: ParamId,
}

/// Per-step tape handles produced while unrolling the decoder.
struct Unrolled {
    mu: Var,
    stop_logits: Var,
}

struct Memory {
    mem: Var,
    positions: Var,
}

impl Tts {
    pub fn new<R: Rng>(cfg: TtsConfig, rng: &mut R) -> Self {
        Self::with_init(cfg, INIT_BOUND, rng)
    }

    pub fn with_init<R: Rng>(cfg: TtsConfig, bound: f64, rng: &mut R) -> Self {
        let mut p = ParamStore::new();
        let u = |p: &mut ParamStore, name: &str, shape: &[usize], rng: &mut R| {
            p.add(name, init_tensor(shape, bound, rng))
        };
        let out_in = cfg.hidden + cfg.embed;
        let embed = u(&mut p, "embed", &[cfg.vocab, cfg.embed], rng);
        let gru = GruCell::new(&mut p, "gru", cfg.feat_dim + cfg.embed, cfg.hidden, bound, rng);
        let mu_w = u(&mut p, "mu.w", &[out_in, cfg.feat_dim], rng);
        let mu_b = u(&mut p, "mu.b", &[cfg.feat_dim], rng);
        let stop_w = u(&mut p, "stop.w", &[out_in, 1], rng);
        let stop_b = u(&mut p, "stop.b", &[1], rng);
        let adv_w = u(&mut p, "advance.w", &[cfg.hidden, 1], rng);
        let adv_b = u(&mut p, "advance.b", &[1], rng);
        Tts {
            cfg,
            params: p,
            embed,
            gru,
            mu_w,
            mu_b,
            stop_w,
            stop_b,
            adv_w,
            adv_b,
        }
    }

    pub fn from_params(cfg: TtsConfig, saved: &ParamStore) -> Result<Self> {
        let mut model = Self::with_init(cfg, 0.0, &mut rand::rngs::mock::StepRng::new(0, 0));
        load_params(&mut model.params, saved, "tts")?;
        Ok(model)
    }

    pub fn config(&self) -> &TtsConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn memory(&self, tape: &mut Tape, y: &TokenSeq) -> Result<Memory> {
        y.validate(self.cfg.vocab)?;
        let mut ids = y.tokens().to_vec();
        ids.push(EOS);
        let table = tape.param(&self.params, self.embed);
        let mem = tape.embedding(table, &ids)?;
        let centres = (0..ids.len()).map(|j| j as f64 + 0.5).collect();
        let positions = tape.constant(&[ids.len(), 1], centres)?;
        Ok(Memory { mem, positions })
    }

    /// One decoder frame. Returns `(μ, stop logit, new state, new κ)`.
    fn frame(&self, tape: &mut Tape, memory: &Memory, prev: Var, state: Var, kappa: Var) -> Result<(Var, Var, Var, Var)> {
        let p = &self.params;
        let d = tape.sub(memory.positions, kappa)?;
        let d2 = tape.mul(d, d)?;
        let scores = tape.scale(d2, -self.cfg.window_sharpness)?;
        let scores = tape.transpose(scores)?;
        let w = tape.softmax(scores)?;
        let ctx = tape.matmul(w, memory.mem)?;

        let inp = tape.concat(&[prev, ctx])?;
        let gi = self.gru.project(tape, p, inp)?;
        let s = self.gru.step(tape, p, gi, state)?;

        let oc = tape.concat(&[s, ctx])?;
        let (mw, mb) = (tape.param(p, self.mu_w), tape.param(p, self.mu_b));
        let mu = tape.matmul(oc, mw)?;
        let mu = tape.add(mu, mb)?;
        let (sw, sb) = (tape.param(p, self.stop_w), tape.param(p, self.stop_b));
        let stop = tape.matmul(oc, sw)?;
        let stop = tape.add(stop, sb)?;

        let (aw, ab) = (tape.param(p, self.adv_w), tape.param(p, self.adv_b));
        let adv = tape.matmul(s, aw)?;
        let adv = tape.add(adv, ab)?;
        let adv = tape.sigmoid(adv)?;
        let next_kappa = tape.add(kappa, adv)?;
        Ok((mu, stop, s, next_kappa))
    }

    fn start(&self, tape: &mut Tape) -> Result<(Var, Var, Var)> {
        let frame = tape.constant(&[1, self.cfg.feat_dim], vec![0.0; self.cfg.feat_dim])?;
        let state = tape.constant(&[1, self.cfg.hidden], vec![0.0; self.cfg.hidden])?;
        let kappa = tape.constant(&[1, 1], vec![0.0])?;
        Ok((frame, state, kappa))
    }

    /// Unrolls over the true frames of `x` (teacher forcing).
    fn unroll_teacher_forced(&self, tape: &mut Tape, y: &TokenSeq, x: &FeatureSeq) -> Result<Unrolled> {
        if x.dim() != self.cfg.feat_dim {
            return Err(Error::shape("tts", &[x.n_frames(), x.dim()], &[self.cfg.feat_dim]));
        }
        let memory = self.memory(tape, y)?;
        let (go, mut state, mut kappa) = self.start(tape)?;
        let xv = tape.constant(&[x.n_frames(), x.dim()], x.data().to_vec())?;
        let mut prev = go;
        let mut mus = Vec::with_capacity(x.n_frames());
        let mut stops = Vec::with_capacity(x.n_frames());
        for t in 0..x.n_frames() {
            let (mu, stop, s, k) = self.frame(tape, &memory, prev, state, kappa)?;
            mus.push(mu);
            stops.push(stop);
            state = s;
            kappa = k;
            prev = tape.gather_rows(xv, &[t])?;
        }
        Ok(Unrolled {
            mu: tape.concat_rows(&mus)?,
            stop_logits: tape.concat_rows(&stops)?,
        })
    }

    /// Teacher-forced loss as a scalar node, plus the two terms as nodes.
    pub fn nll_parts_on(&self, tape: &mut Tape, y: &TokenSeq, x: &FeatureSeq) -> Result<(Var, Var, Var)> {
        let n = x.n_frames();
        let u = self.unroll_teacher_forced(tape, y, x)?;
        let target = tape.constant(&[n, x.dim()], x.data().to_vec())?;
        let diff = tape.sub(u.mu, target)?;
        let sq = tape.mul(diff, diff)?;
        let sq = tape.sum(sq)?;
        let sq = tape.scale(sq, 0.5)?;

        // Binary cross-entropy through a two-way log-softmax over [0, z].
        let zeros = tape.constant(&[n, 1], vec![0.0; n])?;
        let pair = tape.concat(&[zeros, u.stop_logits])?;
        let lp = tape.log_softmax(pair)?;
        let mut onehot = vec![0.0; 2 * n];
        for t in 0..n {
            onehot[2 * t + usize::from(t + 1 == n)] = 1.0;
        }
        let mask = tape.constant(&[n, 2], onehot)?;
        let picked = tape.mul(lp, mask)?;
        let picked = tape.sum(picked)?;
        let stop = tape.scale(picked, -1.0)?;
        let total = tape.add(sq, stop)?;
        Ok((total, sq, stop))
    }

    pub fn nll_on(&self, tape: &mut Tape, y: &TokenSeq, x: &FeatureSeq) -> Result<Var> {
        Ok(self.nll_parts_on(tape, y, x)?.0)
    }

    pub fn teacher_forced_nll(&self, y: &TokenSeq, x: &FeatureSeq) -> Result<TtsLoss> {
        let mut tape = Tape::new();
        let (_, sq, stop) = self.nll_parts_on(&mut tape, y, x)?;
        Ok(TtsLoss {
            squared_error: tape.scalar(sq),
            stop_xent: tape.scalar(stop),
        })
    }

    /// Frame means predicted under teacher forcing.
    pub fn teacher_forced_means(&self, y: &TokenSeq, x: &FeatureSeq) -> Result<FeatureSeq> {
        let mut tape = Tape::new();
        let u = self.unroll_teacher_forced(&mut tape, y, x)?;
        FeatureSeq::new(x.n_frames(), x.dim(), tape.value(u.mu).to_vec())
    }

    /// Free-running greedy generation: each frame is fed the previously
    /// generated mean. Stops after the first frame whose stop probability
    /// exceeds 0.5, or at `max_frames`.
    pub fn generate(&self, y: &TokenSeq, max_frames: usize) -> Result<FeatureSeq> {
        self.free_run(y, max_frames, true)
    }

    /// Exactly `n_frames` free-running frames, ignoring the stop flag.
    pub fn generate_frames(&self, y: &TokenSeq, n_frames: usize) -> Result<FeatureSeq> {
        self.free_run(y, n_frames, false)
    }

    fn free_run(&self, y: &TokenSeq, max_frames: usize, honour_stop: bool) -> Result<FeatureSeq> {
        let dim = self.cfg.feat_dim;
        if max_frames == 0 {
            return Err(Error::contract("max_frames must be at least 1"));
        }
        let mut tape = Tape::new();
        let memory = self.memory(&mut tape, y)?;
        let (go, mut state, mut kappa) = self.start(&mut tape)?;
        let mut prev = go;
        let mut frames = Vec::new();
        for _ in 0..max_frames {
            let (mu, stop, s, k) = self.frame(&mut tape, &memory, prev, state, kappa)?;
            frames.extend_from_slice(tape.value(mu));
            state = s;
            kappa = k;
            prev = mu;
            if honour_stop && tape.scalar(stop) > 0.0 {
                break;
            }
        }
        FeatureSeq::new(frames.len() / dim, dim, frames)
    }
}
