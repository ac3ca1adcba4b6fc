//! Confidence gate for supervised samples during cycle training.
//!
//! A schedule maps step `t ∈ [0, T]` to a release level `η_t ∈ [0, 1]`, then
//! to a threshold `γ_t = η_t(1 − 1/K) + 1/K`. A paired sample is released
//! when the model's per-token confidence on it does not exceed `γ_t`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Asr, FeatureSeq, TokenSeq};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Log,
    Linear,
    Exp,
}

/// Which side of the threshold is released.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReleaseDirection {
    /// Release when `p_conf ≤ γ_t`.
    #[default]
    LowConfidence,
    /// Release when `p_conf > γ_t`.
    Literal,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateFlags {
    pub release_direction: ReleaseDirection,
    /// Use `γ_t = η_t(1 − 1/K) + η_t/K`, which reduces to `η_t`.
    pub gamma_literal: bool,
    /// Release everything regardless of confidence.
    pub force_open: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub total_steps: usize,
    pub class_count: usize,
    #[serde(default)]
    pub flags: GateFlags,
}

impl Schedule {
    pub fn new(kind: ScheduleKind, total_steps: usize, class_count: usize) -> Result<Self> {
        let s = Schedule {
            kind,
            total_steps,
            class_count,
            flags: GateFlags::default(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_flags(mut self, flags: GateFlags) -> Self {
        self.flags = flags;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("schedule total_steps must be at least 1".into()));
        }
        if self.class_count < 2 {
            return Err(Error::Config("schedule class_count must be at least 2".into()));
        }
        Ok(())
    }

    fn check_step(&self, t: usize) -> Result<f64> {
        if t > self.total_steps {
            return Err(Error::contract(format!(
                "step {t} beyond schedule horizon {}",
                self.total_steps
            )));
        }
        Ok(t as f64 / self.total_steps as f64)
    }
}

pub fn eta(s: &Schedule, t: usize) -> Result<f64> {
    let r = s.check_step(t)?;
    let v = match s.kind {
        ScheduleKind::Log => 1.0 - (-5.0 * r).exp(),
        ScheduleKind::Linear => r,
        ScheduleKind::Exp => (5.0 * (r - 1.0)).exp(),
    };
    Ok(v.clamp(0.0, 1.0))
}

pub fn gamma(s: &Schedule, t: usize) -> Result<f64> {
    let e = eta(s, t)?;
    let inv_k = 1.0 / s.class_count as f64;
    Ok(if s.flags.gamma_literal {
        e * (1.0 - inv_k) + inv_k * e
    } else {
        e * (1.0 - inv_k) + inv_k
    })
}

pub fn release(p_conf: f64, s: &Schedule, t: usize) -> Result<bool> {
    let g = gamma(s, t)?;
    if s.flags.force_open {
        return Ok(true);
    }
    Ok(match s.flags.release_direction {
        ReleaseDirection::LowConfidence => p_conf <= g,
        ReleaseDirection::Literal => p_conf > g,
    })
}

/// Geometric-mean per-token probability of `y` (end symbol included) under
/// teacher forcing.
pub fn confidence(asr: &Asr, x: &FeatureSeq, y: &TokenSeq) -> Result<f64> {
    let nll = asr.nll(x, y, 1.0)?;
    Ok((-nll / (y.len() + 1) as f64).exp())
}

/// Indices of the pairs in `batch` released at step `t`.
pub fn filter_supervised(batch: &[(&FeatureSeq, &TokenSeq)], asr: &Asr, s: &Schedule, t: usize) -> Result<Vec<usize>> {
    let mut kept = Vec::new();
    for (i, (x, y)) in batch.iter().enumerate() {
        if s.flags.force_open || release(confidence(asr, x, y)?, s, t)? {
            kept.push(i);
        }
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(kind: ScheduleKind) -> Schedule {
        Schedule::new(kind, 1000, 10).unwrap()
    }

    #[test]
    fn end_points() {
        let t = 1000;
        assert!((eta(&sched(ScheduleKind::Log), t).unwrap() - 0.993_262_053).abs() < 1e-8);
        assert_eq!(eta(&sched(ScheduleKind::Linear), t).unwrap(), 1.0);
        assert_eq!(eta(&sched(ScheduleKind::Exp), t).unwrap(), 1.0);
        assert_eq!(eta(&sched(ScheduleKind::Log), 0).unwrap(), 0.0);
        assert_eq!(eta(&sched(ScheduleKind::Linear), 0).unwrap(), 0.0);
        assert!((eta(&sched(ScheduleKind::Exp), 0).unwrap() - 0.006_737_947).abs() < 1e-8);
    }

    #[test]
    fn gamma_spans_chance_to_one() {
        let s = sched(ScheduleKind::Linear);
        assert!((gamma(&s, 0).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(gamma(&s, 1000).unwrap(), 1.0);
        assert!((gamma(&s, 500).unwrap() - 0.55).abs() < 1e-15);
    }

    #[test]
    fn literal_gamma_collapses_to_eta() {
        let s = sched(ScheduleKind::Log).with_flags(GateFlags {
            gamma_literal: true,
            ..GateFlags::default()
        });
        for t in [0, 10, 500, 1000] {
            assert!((gamma(&s, t).unwrap() - eta(&s, t).unwrap()).abs() < 1e-15);
        }
    }

    #[test]
    fn past_horizon_is_contract_error() {
        assert!(matches!(eta(&sched(ScheduleKind::Exp), 1001), Err(Error::Contract(_))));
    }

    #[test]
    fn release_boundaries() {
        let s = sched(ScheduleKind::Exp);
        assert!(release(1.0, &s, 1000).unwrap());
        assert!(!release(0.9, &s, 0).unwrap());
        let g = gamma(&s, 0).unwrap();
        assert!((g - 0.106_064_2).abs() < 1e-6);
        assert!(release(g, &s, 0).unwrap());
    }

    #[test]
    fn bad_schedule_rejected() {
        assert!(Schedule::new(ScheduleKind::Log, 0, 10).is_err());
        assert!(Schedule::new(ScheduleKind::Log, 10, 1).is_err());
    }
}
