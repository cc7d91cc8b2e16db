//! Objective measures: ERLE, SI-SDR and real-time factor.

use std::ops::Range;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{AecError, Result};
use crate::signal::AudioClip;

pub const ERLE_CEILING_DB: f64 = 120.0;
pub const SI_SDR_CEILING_DB: f64 = 100.0;
const GUARD: f64 = 1e-12;

/// Echo return loss enhancement, `10 log10(sum d^2 / sum e^2)` over an
/// optional sample range. Saturates at [`ERLE_CEILING_DB`].
pub fn erle(d: &AudioClip, e: &AudioClip, segment: Option<Range<usize>>) -> Result<f64> {
    if d.len() != e.len() {
        return Err(AecError::LengthMismatch(d.len(), e.len()));
    }
    let r = segment.unwrap_or(0..d.len());
    if r.start > r.end || r.end > d.len() {
        return Err(AecError::config(format!("segment {r:?} out of range")));
    }
    let ed: f64 = d.samples[r.clone()].iter().map(|&v| (v as f64).powi(2)).sum();
    let ee: f64 = e.samples[r].iter().map(|&v| (v as f64).powi(2)).sum();
    if ed <= 0.0 {
        return Err(AecError::NoSignal);
    }
    if ee <= 0.0 {
        return Ok(ERLE_CEILING_DB);
    }
    Ok((10.0 * ((ed + GUARD) / (ee + GUARD)).log10()).min(ERLE_CEILING_DB))
}

/// Scale-invariant signal-to-distortion ratio of `estimate` against
/// `reference`, after removing the mean of both. Saturates at
/// [`SI_SDR_CEILING_DB`].
pub fn si_sdr(reference: &AudioClip, estimate: &AudioClip) -> Result<f64> {
    si_sdr_slices(&reference.samples, &estimate.samples)
}

pub(crate) fn si_sdr_slices(reference: &[f32], estimate: &[f32]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(AecError::LengthMismatch(reference.len(), estimate.len()));
    }
    let n = reference.len().max(1) as f64;
    let mr = reference.iter().map(|&v| v as f64).sum::<f64>() / n;
    let me = estimate.iter().map(|&v| v as f64).sum::<f64>() / n;
    let r: Vec<f64> = reference.iter().map(|&v| v as f64 - mr).collect();
    let e: Vec<f64> = estimate.iter().map(|&v| v as f64 - me).collect();
    let rr: f64 = r.iter().map(|v| v * v).sum();
    if rr <= 0.0 {
        return Err(AecError::NoSignal);
    }
    let alpha = r.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>() / rr;
    let target: f64 = alpha * alpha * rr;
    let noise: f64 = r
        .iter()
        .zip(&e)
        .map(|(a, b)| (b - alpha * a).powi(2))
        .sum();
    if noise <= 0.0 {
        return Ok(SI_SDR_CEILING_DB);
    }
    Ok((10.0 * (target.max(GUARD) / noise).log10()).min(SI_SDR_CEILING_DB))
}

/// Real-time factor: processing time divided by audio duration.
pub fn rtf(process_seconds: f64, audio_seconds: f64) -> Result<f64> {
    if !(audio_seconds > 0.0) {
        return Err(AecError::config("audio duration must be positive"));
    }
    Ok(process_seconds / audio_seconds)
}

/// Runs `f` and returns its result with the elapsed wall-clock seconds.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

/// One line of the evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub scenario: String,
    pub erle_db: Option<f64>,
    pub si_sdr_db: Option<f64>,
    pub rtf: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::white_noise;

    #[test]
    fn erle_closed_forms() {
        let d = white_noise(1000, 48_000, 1);
        assert!(erle(&d, &d, None).unwrap().abs() < 1e-9);
        let tenth = d.scaled(0.1);
        assert!((erle(&d, &tenth, None).unwrap() - 20.0).abs() < 1e-4);
        let silent = AudioClip::zeros(1000, 48_000);
        assert_eq!(erle(&d, &silent, None).unwrap(), ERLE_CEILING_DB);
        assert!(erle(&silent, &d, None).is_err());
        assert!(erle(&d, &tenth, Some(500..2000)).is_err());
        for alpha in [0.5, 2.0, 1e-3] {
            let v = erle(&d, &d.scaled(alpha), Some(100..900)).unwrap();
            assert!((v + 20.0 * alpha.log10()).abs() < 1e-4);
        }
    }

    #[test]
    fn si_sdr_cases() {
        let r = white_noise(4000, 48_000, 2);
        assert_eq!(si_sdr(&r, &r).unwrap(), SI_SDR_CEILING_DB);
        assert_eq!(si_sdr(&r, &r.scaled(2.0)).unwrap(), SI_SDR_CEILING_DB);
        assert!(si_sdr(&AudioClip::zeros(10, 48_000), &r).is_err());

        // Orthogonal, equal-energy, zero-mean noise gives 0 dB.
        let rv: Vec<f64> = r.to_f64();
        let mean = rv.iter().sum::<f64>() / rv.len() as f64;
        let rc: Vec<f64> = rv.iter().map(|v| v - mean).collect();
        let mut nv = white_noise(4000, 48_000, 3).to_f64();
        let nm = nv.iter().sum::<f64>() / nv.len() as f64;
        nv.iter_mut().for_each(|v| *v -= nm);
        let rr: f64 = rc.iter().map(|v| v * v).sum();
        let proj = rc.iter().zip(&nv).map(|(a, b)| a * b).sum::<f64>() / rr;
        nv.iter_mut().zip(&rc).for_each(|(v, a)| *v -= proj * a);
        let nn: f64 = nv.iter().map(|v| v * v).sum();
        let est: Vec<f64> = rc.iter().zip(&nv).map(|(a, b)| a + b * (rr / nn).sqrt()).collect();
        let v = si_sdr(&AudioClip::from_f64(&rc, 48_000), &AudioClip::from_f64(&est, 48_000)).unwrap();
        assert!(v.abs() < 1e-3, "{v}");
    }

    #[test]
    fn rtf_cases() {
        assert!((rtf(2.24, 10.0).unwrap() - 0.224).abs() < 1e-12);
        assert_eq!(rtf(0.0, 5.0).unwrap(), 0.0);
        assert!(rtf(1.0, 0.0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn si_sdr_scale_invariant(seed in 0u64..500, gain in 1e-3f64..1e3) {
            let r = white_noise(512, 48_000, seed);
            let e = AudioClip::from_f64(
                &r.to_f64().iter().zip(white_noise(512, 48_000, seed + 1).to_f64())
                    .map(|(a, b)| a + 0.3 * b).collect::<Vec<_>>(),
                48_000,
            );
            let base = si_sdr(&r, &e).unwrap();
            let scaled = si_sdr(&r, &e.scaled(gain)).unwrap();
            proptest::prop_assert!((base - scaled).abs() < 1e-3);
        }
    }
}
