//! Unpaired training objectives.
//!
//! Sign convention: the reward `R = L_TTS + β·L_LM` is a loss. The ASR update
//! descends `(1/N) Σ (R_i − b_i)·∇log p(Y_i|x)`, which lowers the probability
//! of hypotheses whose reconstruction is worse than the baseline. With the
//! mean baseline `b_i` averages the other `N − 1` rewards of the same
//! utterance, which keeps the estimator unbiased; with `N = 1` no baseline
//! is applied.
//!
//! All functions accumulate gradients into the model stores and never call
//! `zero_grad`; the caller owns the optimizer step.

use std::collections::BTreeMap;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::models::{Asr, FeatureSeq, Lm, TokenSeq, Tts};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    #[default]
    Mean,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CycleConfig {
    pub alpha: f64,
    pub beta: f64,
    pub n_samples: usize,
    pub max_hyp_len: usize,
    pub max_frames: usize,
    pub baseline: Baseline,
    /// Whether the speech-only loss also trains the TTS.
    pub tts_update: bool,
}

impl Default for CycleConfig {
    fn default() -> Self {
        CycleConfig {
            alpha: 1.0,
            beta: 0.1,
            n_samples: 4,
            max_hyp_len: 12,
            max_frames: 60,
            baseline: Baseline::Mean,
            tts_update: true,
        }
    }
}

impl CycleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta {} must be nonnegative", self.beta)));
        }
        if self.n_samples == 0 || self.max_hyp_len == 0 || self.max_frames == 0 {
            return Err(Error::Config("n_samples, max_hyp_len and max_frames must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub value: f64,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub n_used: usize,
}

/// Distinct hypotheses with their multiplicities, in first-seen order.
struct Groups {
    keys: Vec<(TokenSeq, bool)>,
    counts: Vec<usize>,
    /// Group index of every sample.
    member: Vec<usize>,
}

fn group(hyps: &[crate::models::Hypothesis]) -> Groups {
    let mut index = BTreeMap::new();
    let mut g = Groups {
        keys: Vec::new(),
        counts: Vec::new(),
        member: Vec::with_capacity(hyps.len()),
    };
    for h in hyps {
        let key = (h.seq.clone(), h.terminated);
        let i = *index.entry(key.clone()).or_insert_with(|| {
            g.keys.push(key);
            g.counts.push(0);
            g.keys.len() - 1
        });
        g.counts[i] += 1;
        g.member.push(i);
    }
    g
}

/// Speech-only loss: ASR → TTS round trip scored by the TTS likelihood of
/// the original features plus a β-weighted LM penalty.
pub fn so_loss<R: Rng>(asr: &mut Asr, tts: &mut Tts, lm: &Lm, x: &FeatureSeq, cfg: &CycleConfig, rng: &mut R) -> Result<LossReport> {
    cfg.validate()?;
    let n = cfg.n_samples;
    let cache = asr.encode_cache(x)?;
    let hyps = asr.sample_cached(&cache, n, cfg.max_hyp_len, rng)?;
    if hyps.iter().all(|h| h.seq.is_empty()) {
        warn!("all {n} sampled hypotheses are empty; skipping speech-only step");
        return Ok(LossReport::default());
    }
    let groups = group(&hyps);
    let inv_n = 1.0 / n as f64;

    // TTS terms, pathwise; one forward per distinct hypothesis.
    let mut tape = Tape::new();
    let mut tts_vals = Vec::with_capacity(groups.keys.len());
    let mut tts_total = None;
    for (key, &count) in groups.keys.iter().zip(&groups.counts) {
        let v = tts.nll_on(&mut tape, &key.0, x)?;
        tts_vals.push(tape.scalar(v));
        let w = tape.scale(v, count as f64 * inv_n)?;
        tts_total = Some(match tts_total {
            Some(acc) => tape.add(acc, w)?,
            None => w,
        });
    }
    if cfg.tts_update && !tts.params().is_frozen() {
        tape.backward(tts_total.expect("at least one group"))?;
        tape.accumulate_param_grads(tts.params_mut());
    }

    let lm_vals = groups
        .keys
        .iter()
        .map(|(y, _)| lm.nll(y))
        .collect::<Result<Vec<_>>>()?;

    let rewards: Vec<f64> = groups
        .member
        .iter()
        .map(|&g| tts_vals[g] + cfg.beta * lm_vals[g])
        .collect();
    let reward_mean = rewards.iter().sum::<f64>() * inv_n;
    let reward_var = rewards.iter().map(|r| (r - reward_mean).powi(2)).sum::<f64>() * inv_n;
    let tts_mean = groups.member.iter().map(|&g| tts_vals[g]).sum::<f64>() * inv_n;
    let lm_mean = groups.member.iter().map(|&g| lm_vals[g]).sum::<f64>() * inv_n;
    let group_rewards: Vec<f64> = tts_vals.iter().zip(&lm_vals).map(|(t, l)| t + cfg.beta * l).collect();
    let advantage = |g: usize| -> f64 {
        let r = group_rewards[g];
        match cfg.baseline {
            Baseline::Mean if n > 1 => {
                // R_i minus the mean of the other N-1 rewards, as a sum of
                // differences so equal rewards give exactly zero.
                let spread: f64 = group_rewards
                    .iter()
                    .zip(&groups.counts)
                    .map(|(rh, &c)| c as f64 * (r - rh))
                    .sum();
                spread / (n - 1) as f64
            }
            _ => r,
        }
    };

    // Score-function term: Σ_g count_g (R_g − b_g)/N · log p(Y_g|x).
    let mut tape = Tape::new();
    let enc = asr.encode_on(&mut tape, x)?;
    let mut pg = None;
    for (gi, ((y, terminated), &count)) in groups.keys.iter().zip(&groups.counts).enumerate() {
        let w = count as f64 * inv_n * advantage(gi);
        if w == 0.0 {
            continue;
        }
        let lp = asr.log_prob_on(&mut tape, &enc, y.tokens(), *terminated, None)?;
        let term = tape.scale(lp, w)?;
        pg = Some(match pg {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    if let Some(pg) = pg {
        tape.backward(pg)?;
        tape.accumulate_param_grads(asr.params_mut());
    }

    Ok(LossReport {
        value: tts_mean + cfg.beta * lm_mean,
        reward_mean,
        reward_std: reward_var.sqrt(),
        n_used: n,
    })
}

/// Text-only loss: TTS synthesises features (no gradient), the ASR is
/// trained to recover `y_star` from them with α-scaled attention context.
pub fn to_loss(asr: &mut Asr, tts: &Tts, y_star: &TokenSeq, cfg: &CycleConfig) -> Result<LossReport> {
    cfg.validate()?;
    let x_hat = synthesize(tts, y_star, cfg.max_frames)?;
    let mut tape = Tape::new();
    let v = asr.nll_on(&mut tape, &x_hat, y_star, cfg.alpha)?;
    let value = tape.scalar(v);
    tape.backward(v)?;
    tape.accumulate_param_grads(asr.params_mut());
    Ok(LossReport {
        value,
        reward_mean: value,
        reward_std: 0.0,
        n_used: 1,
    })
}

/// Free-running TTS output for `y`, padded to one zero frame if empty.
pub fn synthesize(tts: &Tts, y: &TokenSeq, max_frames: usize) -> Result<FeatureSeq> {
    match tts.generate(y, max_frames) {
        Ok(x) => Ok(x),
        Err(Error::Shape { .. }) => {
            warn!("synthesis produced no frames; padding with one zero frame");
            Ok(FeatureSeq::zeros(1, tts.config().feat_dim))
        }
        Err(e) => Err(e),
    }
}

/// Sum of the speech-only and text-only losses.
pub fn st_loss<R: Rng>(
    asr: &mut Asr,
    tts: &mut Tts,
    lm: &Lm,
    x: &FeatureSeq,
    y_star: &TokenSeq,
    cfg: &CycleConfig,
    rng: &mut R,
) -> Result<LossReport> {
    let so = so_loss(asr, tts, lm, x, cfg, rng)?;
    let to = to_loss(asr, tts, y_star, cfg)?;
    Ok(LossReport {
        value: so.value + to.value,
        reward_mean: so.reward_mean,
        reward_std: so.reward_std,
        n_used: so.n_used + to.n_used,
    })
}

/// Paired teacher-forced ASR loss at α = 1, scaled by `weight` in the
/// gradient. Returns the unscaled value.
pub fn supervised_loss(asr: &mut Asr, x: &FeatureSeq, y: &TokenSeq, weight: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let v = asr.nll_on(&mut tape, x, y, 1.0)?;
    let value = tape.scalar(v);
    let w = tape.scale(v, weight)?;
    tape.backward(w)?;
    tape.accumulate_param_grads(asr.params_mut());
    Ok(value)
}

pub fn tts_supervised_loss(tts: &mut Tts, y: &TokenSeq, x: &FeatureSeq, weight: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tts.nll_on(&mut tape, y, x)?;
    let value = tape.scalar(v);
    let w = tape.scale(v, weight)?;
    tape.backward(w)?;
    tape.accumulate_param_grads(tts.params_mut());
    Ok(value)
}

pub fn lm_supervised_loss(lm: &mut Lm, y: &TokenSeq, weight: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let v = lm.nll_on(&mut tape, y.tokens(), true)?;
    let value = tape.scalar(v);
    let w = tape.scale(v, weight)?;
    tape.backward(w)?;
    tape.accumulate_param_grads(lm.params_mut());
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{AsrConfig, LmConfig, TtsConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fx {
        asr: Asr,
        tts: Tts,
        lm: Lm,
        x: FeatureSeq,
        y: TokenSeq,
    }

    fn fixture() -> Fx {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let acfg = AsrConfig {
            vocab: 5,
            feat_dim: 3,
            enc_hidden: 4,
            att_dim: 4,
            dec_hidden: 5,
            embed: 3,
        };
        let tcfg = TtsConfig {
            vocab: 5,
            feat_dim: 3,
            embed: 3,
            hidden: 5,
            window_sharpness: 4.0,
        };
        let lcfg = LmConfig {
            vocab: 5,
            embed: 3,
            hidden: 4,
        };
        let mut lm = Lm::new(lcfg, &mut rng);
        lm.params_mut().set_frozen(true);
        let x = FeatureSeq::new(4, 3, (0..12).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
        Fx {
            asr: Asr::new(acfg, &mut rng),
            tts: Tts::new(tcfg, &mut rng),
            lm,
            x,
            y: TokenSeq::new(vec![2, 4], 5).unwrap(),
        }
    }

    fn cfg(beta: f64) -> CycleConfig {
        CycleConfig {
            beta,
            n_samples: 6,
            max_hyp_len: 4,
            max_frames: 10,
            ..CycleConfig::default()
        }
    }

    #[test]
    fn beta_term_is_exactly_additive() {
        let mut f = fixture();
        let a = so_loss(&mut f.asr, &mut f.tts, &f.lm, &f.x, &cfg(0.0), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut g = fixture();
        let b = so_loss(&mut g.asr, &mut g.tts, &g.lm, &g.x, &cfg(0.5), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let hyps = g.asr.sample(&g.x, 6, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let lm_mean = hyps.iter().map(|h| g.lm.nll(&h.seq).unwrap()).sum::<f64>() / 6.0;
        assert_eq!(b.value, a.value + 0.5 * lm_mean);
        assert_eq!(a.n_used, 6);
    }

    #[test]
    fn to_loss_leaves_tts_untouched() {
        let mut f = fixture();
        let r = to_loss(&mut f.asr, &f.tts, &f.y, &cfg(0.1)).unwrap();
        assert!(r.value > 0.0);
        assert!(f.tts.params().iter().all(|(_, t)| t.grad().is_none()));
        assert!(f.asr.params().grad_sq_norm() > 0.0);
    }

    #[test]
    fn st_is_sum_of_parts() {
        let mut f = fixture();
        let st = st_loss(&mut f.asr, &mut f.tts, &f.lm, &f.x, &f.y, &cfg(0.1), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut g = fixture();
        let so = so_loss(&mut g.asr, &mut g.tts, &g.lm, &g.x, &cfg(0.1), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let to = to_loss(&mut g.asr, &g.tts, &g.y, &cfg(0.1)).unwrap();
        assert_eq!(st.value, so.value + to.value);
    }

    #[test]
    fn frozen_lm_is_unchanged() {
        let mut f = fixture();
        let before = f.lm.params().flat_values();
        st_loss(&mut f.asr, &mut f.tts, &f.lm, &f.x, &f.y, &cfg(1.0), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(before, f.lm.params().flat_values());
        assert!(f.lm.params().iter().all(|(_, t)| t.grad().is_none()));
    }

    #[test]
    fn supervised_equals_nll() {
        let mut f = fixture();
        let v = supervised_loss(&mut f.asr, &f.x, &f.y, 1.0).unwrap();
        assert_eq!(v, f.asr.nll(&f.x, &f.y, 1.0).unwrap());
        assert!(v >= 0.0);
    }
}
