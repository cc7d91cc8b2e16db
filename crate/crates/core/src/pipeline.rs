//! The full processing chain: bulk-delay alignment, linear echo
//! cancellation, and the optional neural post-filter.

use crate::error::{AecError, Result};
use crate::kalman::{pbfdkf_run, PbfdkfConfig};
use crate::kv::KvMap;
use crate::net::TaylorAecNet;
use crate::signal::AudioClip;
use crate::tde::{align, gcc_phat_with, DelayEstimate, TdeConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Largest bulk delay searched, in milliseconds. Clipped to half the
    /// input length.
    pub max_delay_ms: f64,
    pub align: bool,
    /// The reference is shifted by the estimated delay minus this margin
    /// (ms), keeping echo-path taps that precede the correlation peak
    /// inside the filter.
    pub align_margin_ms: f64,
    pub kalman: PbfdkfConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            max_delay_ms: 500.0,
            align: true,
            align_margin_ms: 5.0,
            kalman: PbfdkfConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = Self::default();
        let k = &d.kalman;
        let c = Self {
            max_delay_ms: kv.get_or("tde.max_delay_ms", d.max_delay_ms)?,
            align: kv.get_or("tde.align", d.align)?,
            align_margin_ms: kv.get_or("tde.align_margin_ms", d.align_margin_ms)?,
            kalman: PbfdkfConfig {
                block: kv.get_or("kalman.block", k.block)?,
                partitions: kv.get_or("kalman.partitions", k.partitions)?,
                transition: kv.get_or("kalman.transition", k.transition)?,
                regularization: kv.get_or("kalman.regularization", k.regularization)?,
                initial_state_var: kv.get_or("kalman.initial_state_var", k.initial_state_var)?,
                noise_smoothing: kv.get_or("kalman.noise_smoothing", k.noise_smoothing)?,
                adapt: kv.get_or("kalman.adapt", k.adapt)?,
            },
        };
        if !(c.max_delay_ms >= 0.0) || !(c.align_margin_ms >= 0.0) {
            return Err(AecError::config("tde.max_delay_ms and tde.align_margin_ms must be >= 0"));
        }
        c.kalman.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        let k = &self.kalman;
        kv.set("tde.max_delay_ms", self.max_delay_ms);
        kv.set("tde.align", self.align);
        kv.set("tde.align_margin_ms", self.align_margin_ms);
        kv.set("kalman.block", k.block);
        kv.set("kalman.partitions", k.partitions);
        kv.set("kalman.transition", k.transition);
        kv.set("kalman.regularization", k.regularization);
        kv.set("kalman.initial_state_var", k.initial_state_var);
        kv.set("kalman.noise_smoothing", k.noise_smoothing);
        kv.set("kalman.adapt", k.adapt);
        kv
    }
}

/// Outputs of the linear stage.
#[derive(Debug, Clone)]
pub struct LinearOutput {
    pub delay: DelayEstimate,
    /// Far-end reference shifted by the estimated delay less the margin.
    pub x_aligned: AudioClip,
    /// Residual after linear echo removal.
    pub e: AudioClip,
    /// Linear echo estimate.
    pub y: AudioClip,
}

/// Delay estimation with the search range fitted to the input. A silent
/// reference or microphone yields a zero delay.
pub fn estimate_delay(cfg: &PipelineConfig, d: &AudioClip, x: &AudioClip) -> Result<DelayEstimate> {
    let zero = DelayEstimate {
        delay: 0,
        confidence: 1.0,
    };
    if !cfg.align {
        return Ok(zero);
    }
    let want = (cfg.max_delay_ms * 1e-3 * d.sample_rate as f64).round() as usize;
    let tde = TdeConfig {
        max_delay: want.min(d.len().min(x.len()) / 2),
        chunk_len: d.sample_rate as usize,
    };
    match gcc_phat_with(d, x, &tde) {
        Err(AecError::NoSignal) => Ok(zero),
        other => other,
    }
}

pub fn linear_stage(cfg: &PipelineConfig, d: &AudioClip, x: &AudioClip) -> Result<LinearOutput> {
    d.check_compatible(x)?;
    let delay = estimate_delay(cfg, d, x)?;
    let margin = (cfg.align_margin_ms * 1e-3 * d.sample_rate as f64).round() as usize;
    let x_aligned = align(
        x,
        &DelayEstimate {
            delay: delay.delay.saturating_sub(margin),
            ..delay
        },
    );
    let (e, y) = pbfdkf_run(&cfg.kalman, &x_aligned, d)?;
    Ok(LinearOutput {
        delay,
        x_aligned,
        e,
        y,
    })
}

#[derive(Debug, Clone)]
pub struct ProcessOutput {
    pub linear: LinearOutput,
    /// Post-filter output, or the linear residual when no network is set.
    pub output: AudioClip,
}

#[derive(Debug, Clone, Default)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub net: Option<TaylorAecNet>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, net: Option<TaylorAecNet>) -> Self {
        Self { config, net }
    }

    pub fn process(&self, d: &AudioClip, x: &AudioClip) -> Result<ProcessOutput> {
        let linear = linear_stage(&self.config, d, x)?;
        let output = match &self.net {
            Some(net) => net.forward(d, &linear.e, &linear.x_aligned)?.0,
            None => linear.e.clone(),
        };
        Ok(ProcessOutput { linear, output })
    }
}
