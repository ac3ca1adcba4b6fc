//! Pretraining, cycle training, evaluation and run bookkeeping.

mod checkpoint;
mod metrics;

pub use checkpoint::Checkpoint;
pub use metrics::{edit_distance, MetricsLog, MetricsRow, CSV_HEADER};

use std::fs;
use std::path::Path;

use log::{info, warn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anneal::{filter_supervised, GateFlags, Schedule, ScheduleKind};
use crate::autodiff::{clip_grad_norm, Adadelta, ParamStore, Sgd};
use crate::cycle::{self, CycleConfig};
use crate::data::{augment, Corpus, MaskFill};
use crate::error::{Error, Result};
use crate::models::{Asr, AsrConfig, FeatureSeq, Lm, LmConfig, TokenSeq, Tts, TtsConfig};
use crate::seed::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    So,
    To,
    St,
}

impl Mode {
    pub fn uses_speech(self) -> bool {
        matches!(self, Mode::So | Mode::St)
    }

    pub fn uses_text(self) -> bool {
        matches!(self, Mode::To | Mode::St)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Which {
    Asr,
    Tts,
    Lm,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adadelta { rho: f64, eps: f64 },
    Sgd { lr: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adadelta { rho: 0.95, eps: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub f_width: usize,
    pub t_width: usize,
    pub fill: MaskFill,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            f_width: 2,
            t_width: 6,
            fill: MaskFill::Mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub flags: GateFlags,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            kind: ScheduleKind::Log,
            flags: GateFlags::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSizes {
    pub enc_hidden: usize,
    pub att_dim: usize,
    pub dec_hidden: usize,
    pub asr_embed: usize,
    pub tts_embed: usize,
    pub tts_hidden: usize,
    pub tts_window_sharpness: f64,
    pub lm_embed: usize,
    pub lm_hidden: usize,
}

impl Default for ModelSizes {
    fn default() -> Self {
        ModelSizes {
            enc_hidden: 32,
            att_dim: 32,
            dec_hidden: 64,
            asr_embed: 16,
            tts_embed: 16,
            tts_hidden: 64,
            tts_window_sharpness: 4.0,
            lm_embed: 16,
            lm_hidden: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub asr_steps: usize,
    pub tts_steps: usize,
    pub lm_steps: usize,
    /// Paired split the TTS is pretrained on.
    pub tts_split: String,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            asr_steps: 2000,
            tts_steps: 2000,
            lm_steps: 1000,
            tts_split: "paired".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitNames {
    pub paired: String,
    pub speech_only: String,
    pub text_only: String,
    pub dev: String,
}

impl Default for SplitNames {
    fn default() -> Self {
        SplitNames {
            paired: "paired".into(),
            speech_only: "speech_only".into(),
            text_only: "text_only".into(),
            dev: "dev".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub cycle: CycleConfig,
    pub schedule: ScheduleConfig,
    /// Paired utterances per step.
    pub batch_size: usize,
    /// Unpaired utterances per step; defaults to `batch_size`.
    pub unsup_batch_size: Option<usize>,
    pub total_steps: usize,
    pub optimizer: OptimizerConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
    pub eval_interval: usize,
    /// Cap on dev utterances scored per evaluation.
    pub eval_limit: Option<usize>,
    pub clip_norm: f64,
    /// Alternate unsupervised and supervised steps instead of summing them.
    pub interleave: bool,
    pub max_decode_len: usize,
    pub model: ModelSizes,
    pub pretrain: PretrainConfig,
    pub splits: SplitNames,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::St,
            cycle: CycleConfig::default(),
            schedule: ScheduleConfig::default(),
            batch_size: 20,
            unsup_batch_size: None,
            total_steps: 5000,
            optimizer: OptimizerConfig::default(),
            augment: AugmentConfig::default(),
            seed: 1,
            eval_interval: 200,
            eval_limit: None,
            clip_norm: 5.0,
            interleave: false,
            max_decode_len: 12,
            model: ModelSizes::default(),
            pretrain: PretrainConfig::default(),
            splits: SplitNames::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.cycle.validate()?;
        if self.batch_size == 0 || self.unsup_batch_size == Some(0) {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if self.total_steps == 0 || self.eval_interval == 0 {
            return Err(Error::Config("total_steps and eval_interval must be at least 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        make_optimizer(&self.optimizer)?;
        Ok(())
    }

    pub fn unsup_batch(&self) -> usize {
        self.unsup_batch_size.unwrap_or(self.batch_size)
    }

    /// Stable 64-bit digest of the canonical JSON form.
    pub fn hash(&self) -> u64 {
        let text = serde_json::to_string(self).expect("config serialises");
        let d = Sha256::digest(text.as_bytes());
        u64::from_le_bytes(d[..8].try_into().expect("32-byte digest"))
    }

    pub fn schedule(&self, vocab: usize) -> Result<Schedule> {
        Ok(Schedule::new(self.schedule.kind, self.total_steps, vocab)?.with_flags(self.schedule.flags))
    }

    pub fn asr_config(&self, vocab: usize, feat_dim: usize) -> AsrConfig {
        AsrConfig {
            vocab,
            feat_dim,
            enc_hidden: self.model.enc_hidden,
            att_dim: self.model.att_dim,
            dec_hidden: self.model.dec_hidden,
            embed: self.model.asr_embed,
        }
    }

    pub fn tts_config(&self, vocab: usize, feat_dim: usize) -> TtsConfig {
        TtsConfig {
            vocab,
            feat_dim,
            embed: self.model.tts_embed,
            hidden: self.model.tts_hidden,
            window_sharpness: self.model.tts_window_sharpness,
        }
    }

    pub fn lm_config(&self, vocab: usize) -> LmConfig {
        LmConfig {
            vocab,
            embed: self.model.lm_embed,
            hidden: self.model.lm_hidden,
        }
    }
}

/// Optimizer with its per-model state.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Adadelta(Adadelta),
    Sgd(Sgd),
}

pub fn make_optimizer(cfg: &OptimizerConfig) -> Result<Optimizer> {
    match *cfg {
        OptimizerConfig::Adadelta { rho, eps } => Ok(Optimizer::Adadelta(Adadelta::new(rho, eps)?)),
        OptimizerConfig::Sgd { lr } if lr > 0.0 && lr.is_finite() => Ok(Optimizer::Sgd(Sgd { lr })),
        OptimizerConfig::Sgd { lr } => Err(Error::Config(format!("sgd learning rate {lr} must be positive"))),
    }
}

impl Optimizer {
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        match self {
            Optimizer::Adadelta(o) => o.step(store),
            Optimizer::Sgd(o) => o.step(store),
        }
    }

    fn slots(&self) -> Option<Vec<crate::autodiff::AdadeltaSlot>> {
        match self {
            Optimizer::Adadelta(o) if !o.slots().is_empty() => Some(o.slots().to_vec()),
            _ => None,
        }
    }

    fn restore(&mut self, slots: Option<&Vec<crate::autodiff::AdadeltaSlot>>) {
        if let (Optimizer::Adadelta(o), Some(s)) = (self, slots) {
            o.set_slots(s.clone());
        }
    }
}

fn has_grads(store: &ParamStore) -> bool {
    store.iter().any(|(_, t)| t.grad().is_some())
}

fn step_if_grads(opt: &mut Optimizer, store: &mut ParamStore) -> Result<()> {
    if has_grads(store) {
        opt.step(store)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub ter: f64,
    /// Mean teacher-forced NLL per reference token, end symbol included.
    pub nll: f64,
}

/// Token error rate of greedy decoding plus teacher-forced NLL.
pub fn evaluate(asr: &Asr, pairs: &[(&FeatureSeq, &TokenSeq)], max_len: usize) -> Result<EvalResult> {
    if pairs.is_empty() {
        return Err(Error::contract("cannot evaluate an empty split"));
    }
    let (mut edits, mut ref_tokens, mut nll, mut scored) = (0usize, 0usize, 0.0, 0usize);
    for (x, y) in pairs {
        let hyp = asr.greedy(x, 1.0, max_len)?;
        edits += edit_distance(y.tokens(), hyp.seq.tokens());
        ref_tokens += y.len();
        nll += asr.nll(x, y, 1.0)?;
        scored += y.len() + 1;
    }
    let ter = if ref_tokens == 0 {
        if edits == 0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        edits as f64 / ref_tokens as f64
    };
    Ok(EvalResult {
        ter,
        nll: nll / scored as f64,
    })
}

pub fn evaluate_split(asr: &Asr, corpus: &Corpus, split: &str, limit: Option<usize>, max_len: usize) -> Result<EvalResult> {
    let mut pairs = corpus.pairs(split)?;
    if let Some(n) = limit {
        pairs.truncate(n);
    }
    evaluate(asr, &pairs, max_len)
}

/// Mean per-frame teacher-forced TTS loss over a paired split.
pub fn evaluate_tts(tts: &Tts, pairs: &[(&FeatureSeq, &TokenSeq)]) -> Result<f64> {
    let (mut total, mut frames) = (0.0, 0);
    for (x, y) in pairs {
        total += tts.teacher_forced_nll(y, x)?.total();
        frames += x.n_frames();
    }
    Ok(total / frames.max(1) as f64)
}

/// Mean per-token LM NLL, end symbol included.
pub fn evaluate_lm(lm: &Lm, texts: &[&TokenSeq]) -> Result<f64> {
    let (mut total, mut tokens) = (0.0, 0);
    for y in texts {
        total += lm.nll(y)?;
        tokens += y.len() + 1;
    }
    Ok(total / tokens.max(1) as f64)
}

fn maybe_augment(x: &FeatureSeq, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> FeatureSeq {
    if cfg.enabled {
        augment(x, cfg.f_width, cfg.t_width, cfg.fill, rng)
    } else {
        x.clone()
    }
}

fn limited<T: Copy>(items: &[T], limit: Option<usize>) -> Vec<T> {
    items[..limit.map_or(items.len(), |n| n.min(items.len()))].to_vec()
}

fn pick<T: Copy>(items: &[T], rng: &mut ChaCha8Rng) -> T {
    items[rng.gen_range(0..items.len())]
}

fn nonempty<T>(items: Vec<T>, what: &str) -> Result<Vec<T>> {
    if items.is_empty() {
        Err(Error::Config(format!("split {what} is empty")))
    } else {
        Ok(items)
    }
}

fn is_eval_step(t: usize, cfg: &TrainConfig, total: usize) -> bool {
    t % cfg.eval_interval == 0 || t == total
}

/// Outcome of a pretraining run. On divergence `checkpoint` holds the last
/// parameters that produced a finite loss.
#[derive(Debug)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: MetricsLog,
    pub diverged: Option<Error>,
}

/// Fresh model initialised from the run seed.
pub fn init_checkpoint(which: Which, cfg: &TrainConfig, corpus: &Corpus) -> Checkpoint {
    let (k, f) = (corpus.manifest.vocab_size, corpus.manifest.feature_dim);
    let mut ck = Checkpoint {
        config_hash: cfg.hash(),
        ..Checkpoint::default()
    };
    match which {
        Which::Asr => ck.asr = Some(Asr::new(cfg.asr_config(k, f), &mut rng_for(cfg.seed, "init.asr"))),
        Which::Tts => ck.tts = Some(Tts::new(cfg.tts_config(k, f), &mut rng_for(cfg.seed, "init.tts"))),
        Which::Lm => ck.lm = Some(Lm::new(cfg.lm_config(k), &mut rng_for(cfg.seed, "init.lm"))),
    }
    ck
}

/// Minimises the supervised loss of one model by mini-batch steps.
pub fn pretrain(which: Which, cfg: &TrainConfig, corpus: &Corpus) -> Result<PretrainOutcome> {
    let mut ck = init_checkpoint(which, cfg, corpus);
    let mut opt = make_optimizer(&cfg.optimizer)?;
    let mut metrics = MetricsLog::default();
    let label = format!("{which:?}").to_lowercase();
    let mut batch_rng = rng_for(cfg.seed, &format!("pretrain.{label}.batches"));
    let mut aug_rng = rng_for(cfg.seed, &format!("pretrain.{label}.augment"));
    let bs = cfg.batch_size;
    let w = 1.0 / bs as f64;

    let asr_pairs = nonempty(corpus.pairs(&cfg.splits.paired)?, &cfg.splits.paired)?;
    let dev_pairs = corpus.pairs(&cfg.splits.dev).unwrap_or_default();
    let tts_pairs = match which {
        Which::Tts => nonempty(corpus.pairs(&cfg.pretrain.tts_split)?, &cfg.pretrain.tts_split)?,
        _ => Vec::new(),
    };
    let lm_texts: Vec<&TokenSeq> = match which {
        Which::Lm => {
            let mut t = corpus.texts(&cfg.splits.text_only)?;
            t.extend(asr_pairs.iter().map(|(_, y)| *y));
            t
        }
        _ => Vec::new(),
    };
    let steps = match which {
        Which::Asr => cfg.pretrain.asr_steps,
        Which::Tts => cfg.pretrain.tts_steps,
        Which::Lm => cfg.pretrain.lm_steps,
    };

    let mut window = (0.0, 0usize);
    for t in 1..=steps {
        let snapshot = ck.clone();
        let result: Result<f64> = (|| {
            let mut loss = 0.0;
            match which {
                Which::Asr => {
                    let asr = ck.asr.as_mut().expect("initialised");
                    asr.params_mut().zero_grad();
                    for _ in 0..bs {
                        let (x, y) = pick(&asr_pairs, &mut batch_rng);
                        let xa = maybe_augment(x, &cfg.augment, &mut aug_rng);
                        loss += cycle::supervised_loss(asr, &xa, y, w)? * w;
                    }
                    clip_grad_norm(&mut [asr.params_mut()], cfg.clip_norm);
                    opt.step(asr.params_mut())?;
                }
                Which::Tts => {
                    let tts = ck.tts.as_mut().expect("initialised");
                    tts.params_mut().zero_grad();
                    for _ in 0..bs {
                        let (x, y) = pick(&tts_pairs, &mut batch_rng);
                        loss += cycle::tts_supervised_loss(tts, y, x, w)? * w;
                    }
                    clip_grad_norm(&mut [tts.params_mut()], cfg.clip_norm);
                    opt.step(tts.params_mut())?;
                }
                Which::Lm => {
                    let lm = ck.lm.as_mut().expect("initialised");
                    lm.params_mut().zero_grad();
                    for _ in 0..bs {
                        let y = pick(&lm_texts, &mut batch_rng);
                        loss += cycle::lm_supervised_loss(lm, y, w)? * w;
                    }
                    clip_grad_norm(&mut [lm.params_mut()], cfg.clip_norm);
                    opt.step(lm.params_mut())?;
                }
            }
            if loss.is_finite() {
                Ok(loss)
            } else {
                Err(Error::Numeric(format!("{label} pretraining loss at step {t}")))
            }
        })();
        let loss = match result {
            Ok(l) => l,
            Err(e @ Error::Numeric(_)) => {
                warn!("{label} pretraining diverged at step {t}: {e}");
                return Ok(PretrainOutcome {
                    checkpoint: snapshot,
                    metrics,
                    diverged: Some(e),
                });
            }
            Err(e) => return Err(e),
        };
        window.0 += loss;
        window.1 += 1;
        if is_eval_step(t, cfg, steps) {
            metrics.push(MetricsRow::Train {
                step: t,
                loss: window.0 / window.1 as f64,
                reward_mean: 0.0,
                released_frac: 1.0,
            });
            window = (0.0, 0);
            let row = match which {
                Which::Asr if !dev_pairs.is_empty() => {
                    let pairs = limited(&dev_pairs, cfg.eval_limit);
                    let r = evaluate(ck.asr.as_ref().expect("initialised"), &pairs, cfg.max_decode_len)?;
                    Some((Some(r.ter), r.nll))
                }
                Which::Tts if !dev_pairs.is_empty() => {
                    Some((None, evaluate_tts(ck.tts.as_ref().expect("initialised"), &limited(&dev_pairs, cfg.eval_limit))?))
                }
                Which::Lm if !dev_pairs.is_empty() => {
                    let texts: Vec<&TokenSeq> = limited(&dev_pairs, cfg.eval_limit).iter().map(|(_, y)| *y).collect();
                    Some((None, evaluate_lm(ck.lm.as_ref().expect("initialised"), &texts)?))
                }
                _ => None,
            };
            if let Some((ter, nll)) = row {
                match ter {
                    Some(ter) => info!("{label} step {t}: dev ter {ter:.4} nll {nll:.4}"),
                    None => info!("{label} step {t}: dev nll {nll:.4}"),
                }
                metrics.push(MetricsRow::Eval { step: t, ter, nll });
            } else {
                info!("{label} step {t}: loss {loss:.4}");
            }
        }
        ck.step = t as u64;
    }
    if let Some(s) = opt.slots() {
        ck.optim.insert(label, s);
    }
    Ok(PretrainOutcome {
        checkpoint: ck,
        metrics,
        diverged: None,
    })
}

/// The three models a cycle run operates on.
#[derive(Clone, Debug)]
pub struct Models {
    pub asr: Asr,
    pub tts: Tts,
    pub lm: Lm,
}

#[derive(Debug)]
pub struct CycleOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: MetricsLog,
}

/// Cycle training with gated supervised batches; see [`Mode`].
pub fn train_cycle(cfg: &TrainConfig, corpus: &Corpus, models: Models, resume: Option<&Checkpoint>) -> Result<CycleOutcome> {
    cfg.validate()?;
    let Models { mut asr, mut tts, mut lm } = models;
    lm.params_mut().set_frozen(true);
    let mut schedule = cfg.schedule(corpus.manifest.vocab_size)?;
    if cfg.mode == Mode::Baseline {
        schedule.flags.force_open = true;
    }
    let mut asr_opt = make_optimizer(&cfg.optimizer)?;
    let mut tts_opt = make_optimizer(&cfg.optimizer)?;
    if let Some(r) = resume {
        asr_opt.restore(r.optim.get("asr"));
        tts_opt.restore(r.optim.get("tts"));
    }

    let paired = nonempty(corpus.pairs(&cfg.splits.paired)?, &cfg.splits.paired)?;
    let speech = if cfg.mode.uses_speech() {
        nonempty(corpus.speech(&cfg.splits.speech_only)?, &cfg.splits.speech_only)?
    } else {
        Vec::new()
    };
    let texts = if cfg.mode.uses_text() {
        nonempty(corpus.texts(&cfg.splits.text_only)?, &cfg.splits.text_only)?
    } else {
        Vec::new()
    };
    let mut dev = nonempty(corpus.pairs(&cfg.splits.dev)?, &cfg.splits.dev)?;
    if let Some(n) = cfg.eval_limit {
        dev.truncate(n);
    }

    let mut batch_rng = rng_for(cfg.seed, "cycle.batches");
    let mut sample_rng = rng_for(cfg.seed, "cycle.sampling");
    let mut aug_rng = rng_for(cfg.seed, "cycle.augment");
    let (bs, bu) = (cfg.batch_size, cfg.unsup_batch());
    let total = cfg.total_steps;
    let mut metrics = MetricsLog::default();
    let mut window = [0.0f64; 3];
    let mut window_n = 0usize;

    for t in 0..total {
        asr.params_mut().zero_grad();
        tts.params_mut().zero_grad();
        let run_unsup = cfg.mode != Mode::Baseline && !(cfg.interleave && t % 2 == 1);
        let run_sup = !(cfg.interleave && cfg.mode != Mode::Baseline && t % 2 == 0);

        let mut loss = 0.0;
        let mut reward = 0.0;
        if run_unsup {
            let (mut value, mut rsum) = (0.0, 0.0);
            for _ in 0..bu {
                let r = match cfg.mode {
                    Mode::So => {
                        let x = maybe_augment(pick(&speech, &mut batch_rng), &cfg.augment, &mut aug_rng);
                        cycle::so_loss(&mut asr, &mut tts, &lm, &x, &cfg.cycle, &mut sample_rng)?
                    }
                    Mode::To => cycle::to_loss(&mut asr, &tts, pick(&texts, &mut batch_rng), &cfg.cycle)?,
                    Mode::St => {
                        let x = maybe_augment(pick(&speech, &mut batch_rng), &cfg.augment, &mut aug_rng);
                        let y = pick(&texts, &mut batch_rng);
                        cycle::st_loss(&mut asr, &mut tts, &lm, &x, y, &cfg.cycle, &mut sample_rng)?
                    }
                    Mode::Baseline => unreachable!("no unsupervised term"),
                };
                value += r.value;
                rsum += r.reward_mean;
            }
            let inv = 1.0 / bu as f64;
            asr.params_mut().scale_grads(inv);
            tts.params_mut().scale_grads(inv);
            loss += value * inv;
            reward = rsum * inv;
        }

        let mut released = 0usize;
        if run_sup {
            let batch: Vec<(&FeatureSeq, &TokenSeq)> = (0..bs).map(|_| pick(&paired, &mut batch_rng)).collect();
            let kept = filter_supervised(&batch, &asr, &schedule, t)?;
            released = kept.len();
            let w = 1.0 / bs as f64;
            for i in kept {
                let (x, y) = batch[i];
                let xa = maybe_augment(x, &cfg.augment, &mut aug_rng);
                loss += cycle::supervised_loss(&mut asr, &xa, y, w)? * w;
            }
        }
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("cycle loss at step {t}")));
        }

        clip_grad_norm(&mut [asr.params_mut(), tts.params_mut()], cfg.clip_norm);
        step_if_grads(&mut asr_opt, asr.params_mut())?;
        if cfg.mode.uses_speech() && cfg.cycle.tts_update {
            step_if_grads(&mut tts_opt, tts.params_mut())?;
        }

        window[0] += loss;
        window[1] += reward;
        window[2] += if run_sup { released as f64 / bs as f64 } else { 0.0 };
        window_n += 1;
        let done = t + 1;
        if is_eval_step(done, cfg, total) {
            let n = window_n as f64;
            metrics.push(MetricsRow::Train {
                step: done,
                loss: window[0] / n,
                reward_mean: window[1] / n,
                released_frac: window[2] / n,
            });
            window = [0.0; 3];
            window_n = 0;
            let r = evaluate(&asr, &dev, cfg.max_decode_len)?;
            info!("{:?} step {done}: dev ter {:.4} nll {:.4}", cfg.mode, r.ter, r.nll);
            metrics.push(MetricsRow::Eval {
                step: done,
                ter: Some(r.ter),
                nll: r.nll,
            });
        }
    }

    let mut checkpoint = Checkpoint {
        step: resume.map_or(0, |r| r.step) + total as u64,
        config_hash: cfg.hash(),
        ..Checkpoint::default()
    };
    if let Some(s) = asr_opt.slots() {
        checkpoint.optim.insert("asr".into(), s);
    }
    if let Some(s) = tts_opt.slots() {
        checkpoint.optim.insert("tts".into(), s);
    }
    lm.params_mut().set_frozen(false);
    checkpoint.asr = Some(asr);
    checkpoint.tts = Some(tts);
    checkpoint.lm = Some(lm);
    Ok(CycleOutcome { checkpoint, metrics })
}
