//! Noam learning-rate schedule.

use crate::error::{AecError, Result};
use crate::kv::KvMap;

/// `d^-0.5 * min(step^-0.5, step * warmup^-1.5)`, for `step >= 1`.
pub fn noam_lr(step: u64, d: f64, warmup: u64) -> Result<f64> {
    if step == 0 {
        return Err(AecError::config("noam schedule starts at step 1"));
    }
    if warmup == 0 || !(d > 0.0) {
        return Err(AecError::config("noam schedule needs d > 0 and warmup >= 1"));
    }
    let s = step as f64;
    Ok(d.powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    /// The formula as written.
    Noam { d: f64, warmup: u64 },
    /// Noam shape rescaled so the value at `warmup` equals `peak`.
    ScaledNoam { peak: f64, warmup: u64 },
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self::ScaledNoam {
            peak: 1e-3,
            warmup: 5000,
        }
    }
}

impl LrSchedule {
    pub fn lr(&self, step: u64) -> Result<f64> {
        match *self {
            Self::Noam { d, warmup } => noam_lr(step, d, warmup),
            Self::ScaledNoam { peak, warmup } => {
                if !(peak > 0.0) {
                    return Err(AecError::config("lr peak must be positive"));
                }
                Ok(peak * noam_lr(step, 1.0, warmup)? / noam_lr(warmup, 1.0, warmup)?)
            }
        }
    }

    pub fn warmup(&self) -> u64 {
        match *self {
            Self::Noam { warmup, .. } | Self::ScaledNoam { warmup, .. } => warmup,
        }
    }

    /// `lr.schedule` is `scaled` (keys `lr.peak`, `lr.warmup`) or `noam`
    /// (keys `lr.d`, `lr.warmup`).
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let warmup = kv.get_or("lr.warmup", 5000u64)?;
        let s = match kv.get_str("lr.schedule").unwrap_or("scaled") {
            "scaled" => Self::ScaledNoam {
                peak: kv.get_or("lr.peak", 1e-3)?,
                warmup,
            },
            "noam" => Self::Noam {
                d: kv.get_or("lr.d", 1e-3)?,
                warmup,
            },
            other => return Err(AecError::config(format!("unknown lr.schedule {other:?}"))),
        };
        s.lr(1)?;
        Ok(s)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        match *self {
            Self::Noam { d, warmup } => {
                kv.set("lr.schedule", "noam");
                kv.set("lr.d", d);
                kv.set("lr.warmup", warmup);
            }
            Self::ScaledNoam { peak, warmup } => {
                kv.set("lr.schedule", "scaled");
                kv.set("lr.peak", peak);
                kv.set("lr.warmup", warmup);
            }
        }
        kv
    }
}
