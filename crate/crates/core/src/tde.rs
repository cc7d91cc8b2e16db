//! GCC-PHAT bulk delay estimation between the microphone and far-end
//! reference, and the alignment that produces x'(n).

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{AecError, Result};
use crate::signal::AudioClip;

const PHAT_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayEstimate {
    /// Samples by which `d` lags `x`.
    pub delay: usize,
    /// Peak-to-average ratio of |GCC-PHAT| over the searched lags.
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TdeConfig {
    pub max_delay: usize,
    /// Minimum analysis chunk; the chunk is stretched to `2 * max_delay`
    /// when that is longer.
    pub chunk_len: usize,
}

impl TdeConfig {
    /// 500 ms search range and 1 s analysis chunk.
    pub fn for_rate(sample_rate: u32) -> Self {
        Self {
            max_delay: sample_rate as usize / 2,
            chunk_len: sample_rate as usize,
        }
    }
}

/// Estimates the bulk delay of `d` relative to `x` within `[0, max_delay]`,
/// using a one-second analysis chunk.
pub fn gcc_phat(d: &AudioClip, x: &AudioClip, max_delay: usize) -> Result<DelayEstimate> {
    let cfg = TdeConfig {
        max_delay,
        chunk_len: d.sample_rate as usize,
    };
    gcc_phat_with(d, x, &cfg)
}

pub fn gcc_phat_with(d: &AudioClip, x: &AudioClip, cfg: &TdeConfig) -> Result<DelayEstimate> {
    if d.sample_rate != x.sample_rate {
        return Err(AecError::RateMismatch(d.sample_rate, x.sample_rate));
    }
    let available = d.len().min(x.len());
    let needed = (2 * cfg.max_delay).max(1);
    if available < needed {
        return Err(AecError::InputTooShort {
            needed,
            got: available,
        });
    }
    let len = cfg.chunk_len.max(2 * cfg.max_delay).min(available).max(1);

    // Chunk placement: the quarter-chunk grid position with most far-end energy.
    let energy = |s: &[f32]| s.iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
    let step = (len / 4).max(1);
    let start = (0..=(available - len))
        .step_by(step)
        .max_by(|&a, &b| {
            energy(&x.samples[a..a + len]).total_cmp(&energy(&x.samples[b..b + len]))
        })
        .unwrap_or(0);
    let dc = &d.samples[start..start + len];
    let xc = &x.samples[start..start + len];
    if energy(dc) == 0.0 || energy(xc) == 0.0 {
        return Err(AecError::NoSignal);
    }

    let n = (2 * len).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let load = |s: &[f32]| {
        let mut b: Vec<Complex<f64>> = s.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
        b.resize(n, Complex::new(0.0, 0.0));
        b
    };
    let (mut dd, mut xx) = (load(dc), load(xc));
    fwd.process(&mut dd);
    fwd.process(&mut xx);
    for (a, b) in dd.iter_mut().zip(&xx) {
        let g = *a * b.conj();
        *a = g / g.norm().max(PHAT_FLOOR);
    }
    inv.process(&mut dd);

    let lags = cfg.max_delay.min(n - 1);
    let mags: Vec<f64> = dd[..=lags].iter().map(|c| c.re.abs()).collect();
    let (delay, peak) = mags
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::MIN), |best, (i, v)| if v > best.1 { (i, v) } else { best });
    let mean = mags.iter().sum::<f64>() / mags.len() as f64;
    let confidence = if mean > 0.0 { (peak / mean).max(1.0) } else { 1.0 };
    Ok(DelayEstimate { delay, confidence })
}

/// Delays `x` by `est.delay` samples, keeping its length.
pub fn align(x: &AudioClip, est: &DelayEstimate) -> AudioClip {
    shift(x, est.delay)
}

pub(crate) fn shift(x: &AudioClip, delay: usize) -> AudioClip {
    let n = x.len();
    let mut out = vec![0.0f32; n];
    if delay < n {
        out[delay..].copy_from_slice(&x.samples[..n - delay]);
    }
    AudioClip {
        samples: out,
        sample_rate: x.sample_rate,
    }
}
