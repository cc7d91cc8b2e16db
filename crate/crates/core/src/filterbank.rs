//! Pseudo-QMF cosine-modulated filter bank.
//!
//! A Kaiser-windowed lowpass prototype is modulated into `M` analysis and
//! synthesis filters. The prototype cutoff is chosen by a 1-D search that
//! minimizes the peak amplitude distortion of the whole bank. Analysis and
//! synthesis filters are scaled by `sqrt(M)` so that the critically
//! decimated subbands carry the input energy.

use std::f64::consts::PI;
use std::io::Write;

use crate::error::{AecError, Result};
use crate::signal::AudioClip;

pub const DEFAULT_BANDS: usize = 4;
pub const DEFAULT_TAPS: usize = 64;
pub const DEFAULT_STOPBAND_DB: f64 = 70.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PqmfBank {
    pub num_bands: usize,
    pub prototype: Vec<f64>,
    pub cutoff: f64,
    /// `analysis[k][n]`
    pub analysis: Vec<Vec<f64>>,
    pub synthesis: Vec<Vec<f64>>,
}

/// Critically decimated subband channels.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandSignal {
    pub bands: Vec<Vec<f32>>,
    pub source_len: usize,
    pub source_rate: u32,
}

impl SubbandSignal {
    pub fn num_bands(&self) -> usize {
        self.bands.len()
    }

    pub fn energy(&self) -> f64 {
        self.bands
            .iter()
            .flatten()
            .map(|&v| (v as f64).powi(2))
            .sum()
    }
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    sum
}

fn kaiser_beta(atten_db: f64) -> f64 {
    if atten_db > 50.0 {
        0.1102 * (atten_db - 8.7)
    } else if atten_db >= 21.0 {
        0.5842 * (atten_db - 21.0).powf(0.4) + 0.07886 * (atten_db - 21.0)
    } else {
        0.0
    }
}

fn kaiser_lowpass(len: usize, cutoff: f64, beta: f64) -> Vec<f64> {
    let center = (len as f64 - 1.0) / 2.0;
    let norm = bessel_i0(beta);
    (0..len)
        .map(|n| {
            let m = n as f64 - center;
            let ideal = if m == 0.0 {
                cutoff / PI
            } else {
                (cutoff * m).sin() / (PI * m)
            };
            let r = if len > 1 { m / center } else { 0.0 };
            ideal * bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / norm
        })
        .collect()
}

fn modulate(prototype: &[f64], bands: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let len = prototype.len();
    let center = (len as f64 - 1.0) / 2.0;
    let gain = 2.0 * (bands as f64).sqrt();
    let build = |sign: f64| -> Vec<Vec<f64>> {
        (0..bands)
            .map(|k| {
                let alt = if k % 2 == 0 { 1.0 } else { -1.0 };
                (0..len)
                    .map(|n| {
                        let phase = (2 * k + 1) as f64 * PI / (2 * bands) as f64
                            * (n as f64 - center)
                            + sign * alt * PI / 4.0;
                        gain * prototype[n] * phase.cos()
                    })
                    .collect()
            })
            .collect()
    };
    (build(1.0), build(-1.0))
}

/// Peak |20 log10 |T(w)|| of the bank's distortion function on `[0, pi]`,
/// where `T = (1/M) sum_k H_k G_k`.
fn peak_distortion_db(analysis: &[Vec<f64>], synthesis: &[Vec<f64>], points: usize) -> f64 {
    let bands = analysis.len() as f64;
    let mut worst = 0.0f64;
    for i in 0..points {
        let w = PI * i as f64 / (points - 1) as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (h, g) in analysis.iter().zip(synthesis) {
            let resp = |f: &[f64]| {
                f.iter().enumerate().fold((0.0, 0.0), |(r, i_), (n, &c)| {
                    let ph = -w * n as f64;
                    (r + c * ph.cos(), i_ + c * ph.sin())
                })
            };
            let (hr, hi) = resp(h);
            let (gr, gi) = resp(g);
            re += hr * gr - hi * gi;
            im += hr * gi + hi * gr;
        }
        let mag = (re * re + im * im).sqrt() / bands;
        worst = worst.max((20.0 * mag.max(1e-300).log10()).abs());
    }
    worst
}

/// Designs an `M`-band pseudo-QMF bank with an `L`-tap prototype.
pub fn pqmf_design(bands: usize, taps: usize, stopband_db: f64) -> Result<PqmfBank> {
    if bands == 0 || taps == 0 || taps % bands != 0 {
        return Err(AecError::config(format!(
            "prototype length {taps} must be a positive multiple of the band count {bands}"
        )));
    }
    if !(stopband_db > 0.0) {
        return Err(AecError::config("stopband attenuation must be positive"));
    }
    // Kaiser transition-width estimate must fit inside one band.
    let transition = (stopband_db - 8.0) / (2.285 * (taps as f64 - 1.0).max(1.0));
    if transition > PI / bands as f64 {
        return Err(AecError::config(format!(
            "{stopband_db} dB stopband is infeasible with {taps} taps for {bands} bands"
        )));
    }
    let beta = kaiser_beta(stopband_db);

    if bands == 1 {
        // Single band: the bank is a pure delay of L-1 samples.
        let prototype = kaiser_lowpass(taps, PI, beta);
        let mut analysis = vec![0.0; taps];
        analysis[0] = 1.0;
        let mut synthesis = vec![0.0; taps];
        synthesis[taps - 1] = 1.0;
        return Ok(PqmfBank {
            num_bands: 1,
            prototype,
            cutoff: PI,
            analysis: vec![analysis],
            synthesis: vec![synthesis],
        });
    }

    let objective = |wc: f64| {
        let p = kaiser_lowpass(taps, wc, beta);
        let (h, g) = modulate(&p, bands);
        peak_distortion_db(&h, &g, 256)
    };
    let (lo, hi) = (0.25 * PI / bands as f64, PI / bands as f64);
    let grid = 60;
    let mut best = (f64::INFINITY, lo);
    for i in 0..=grid {
        let wc = lo + (hi - lo) * i as f64 / grid as f64;
        let v = objective(wc);
        if v < best.0 {
            best = (v, wc);
        }
    }
    // Golden-section refinement around the best grid point.
    let step = (hi - lo) / grid as f64;
    let (mut a, mut b) = ((best.1 - step).max(lo), (best.1 + step).min(hi));
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (objective(c), objective(d));
    for _ in 0..40 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = objective(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = objective(d);
        }
    }
    let cutoff = if fc.min(fd) < best.0 { (a + b) / 2.0 } else { best.1 };
    let prototype = kaiser_lowpass(taps, cutoff, beta);
    let (analysis, synthesis) = modulate(&prototype, bands);
    Ok(PqmfBank {
        num_bands: bands,
        prototype,
        cutoff,
        analysis,
        synthesis,
    })
}

impl Default for PqmfBank {
    fn default() -> Self {
        pqmf_design(DEFAULT_BANDS, DEFAULT_TAPS, DEFAULT_STOPBAND_DB).expect("default pqmf design")
    }
}

impl PqmfBank {
    pub fn taps(&self) -> usize {
        self.prototype.len()
    }

    /// Round-trip delay of analysis followed by synthesis.
    pub fn delay(&self) -> usize {
        self.taps() - 1
    }

    /// Peak amplitude distortion in dB over `[0, pi]`.
    pub fn amplitude_distortion_db(&self, points: usize) -> f64 {
        peak_distortion_db(&self.analysis, &self.synthesis, points)
    }

    /// Writes the prototype, one tap per line.
    pub fn write_prototype<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for t in &self.prototype {
            writeln!(w, "{t:.17e}")?;
        }
        Ok(())
    }

    pub fn analyze(&self, clip: &AudioClip) -> SubbandSignal {
        let m = self.num_bands;
        let n = clip.len();
        let out_len = n.div_ceil(m);
        let x = clip.to_f64();
        let bands = self
            .analysis
            .iter()
            .map(|h| {
                (0..out_len)
                    .map(|j| {
                        let t = j * m;
                        let mut acc = 0.0;
                        for (i, &c) in h.iter().enumerate().take(t + 1) {
                            acc += c * x[t - i];
                        }
                        acc as f32
                    })
                    .collect()
            })
            .collect();
        SubbandSignal {
            bands,
            source_len: n,
            source_rate: clip.sample_rate,
        }
    }

    pub fn synthesize(&self, sub: &SubbandSignal) -> Result<AudioClip> {
        let m = self.num_bands;
        if sub.bands.len() != m {
            return Err(AecError::config(format!(
                "subband signal has {} channels, bank has {m}",
                sub.bands.len()
            )));
        }
        let n = sub.source_len;
        let mut out = vec![0.0f64; n];
        for (g, band) in self.synthesis.iter().zip(&sub.bands) {
            for (j, &v) in band.iter().enumerate() {
                let v = v as f64;
                if v == 0.0 {
                    continue;
                }
                let start = j * m;
                for (i, &c) in g.iter().enumerate() {
                    match out.get_mut(start + i) {
                        Some(o) => *o += c * v,
                        None => break,
                    }
                }
            }
        }
        Ok(AudioClip::from_f64(&out, sub.source_rate))
    }
}

pub fn pqmf_analyze(bank: &PqmfBank, clip: &AudioClip) -> SubbandSignal {
    bank.analyze(clip)
}

pub fn pqmf_synthesize(bank: &PqmfBank, sub: &SubbandSignal) -> Result<AudioClip> {
    bank.synthesize(sub)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{stft, StftConfig};
    use crate::simulate::white_noise;

    fn snr_delayed(bank: &PqmfBank, x: &AudioClip) -> f64 {
        let y = bank.synthesize(&bank.analyze(x)).unwrap();
        let delay = bank.delay();
        let (mut sig, mut err) = (0.0, 0.0);
        for i in delay..x.len() {
            let r = x.samples[i - delay] as f64;
            sig += r * r;
            err += (y.samples[i] as f64 - r).powi(2);
        }
        10.0 * (sig / err).log10()
    }

    #[test]
    fn prototype_is_symmetric() {
        let bank = PqmfBank::default();
        let l = bank.taps();
        assert_eq!(l, 64);
        for i in 0..l {
            assert_eq!(bank.prototype[i], bank.prototype[l - 1 - i]);
        }
    }

    #[test]
    fn single_band_is_a_delay() {
        let bank = pqmf_design(1, 16, 60.0).unwrap();
        let x = white_noise(500, 48_000, 1);
        let y = bank.synthesize(&bank.analyze(&x)).unwrap();
        for i in 15..500 {
            assert!((y.samples[i] - x.samples[i - 15]).abs() < 1e-7);
        }
    }

    #[test]
    fn distortion_within_two_tenths_db() {
        let bank = PqmfBank::default();
        let d = bank.amplitude_distortion_db(1024);
        assert!(d <= 0.2, "{d} dB");
    }

    #[test]
    fn design_errors() {
        assert!(pqmf_design(4, 62, 70.0).is_err());
        assert!(pqmf_design(4, 64, 130.0).is_err());
        assert!(pqmf_design(0, 64, 70.0).is_err());
    }

    #[test]
    fn zero_in_zero_out() {
        let bank = PqmfBank::default();
        let sub = bank.analyze(&AudioClip::zeros(1000, 48_000));
        assert_eq!(sub.num_bands(), 4);
        assert!(sub.bands.iter().all(|b| b.len() == 250 && b.iter().all(|&v| v == 0.0)));
        assert!(bank.synthesize(&sub).unwrap().samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn white_noise_round_trip() {
        let bank = PqmfBank::default();
        let x = white_noise(48_000, 48_000, 2);
        let snr = snr_delayed(&bank, &x);
        assert!(snr >= 40.0, "{snr} dB");
        let ratio = bank.analyze(&x).energy() / x.energy();
        assert!((10.0 * ratio.log10()).abs() <= 0.5, "{ratio}");
    }

    #[test]
    fn tone_lands_in_first_band() {
        let bank = PqmfBank::default();
        let x = AudioClip::from_f64(
            &(0..48_000).map(|n| (2.0 * PI * 3000.0 * n as f64 / 48_000.0).sin()).collect::<Vec<_>>(),
            48_000,
        );
        let sub = bank.analyze(&x);
        let e: Vec<f64> = sub.bands.iter().map(|b| b.iter().map(|&v| (v as f64).powi(2)).sum()).collect();
        assert!(e[0] / e.iter().sum::<f64>() >= 0.95);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let bank = PqmfBank::default();
        let sub = SubbandSignal { bands: vec![vec![0.0; 10]; 3], source_len: 40, source_rate: 48_000 };
        assert!(bank.synthesize(&sub).is_err());
    }

    #[test]
    fn swept_sine_has_no_strong_aliases() {
        let bank = PqmfBank::default();
        let fs = 48_000.0;
        let (f0, f1, dur) = (100.0, 23_000.0, 1.0);
        let x: Vec<f64> = (0..48_000)
            .map(|n| {
                let t = n as f64 / fs;
                (2.0 * PI * (f0 * t + (f1 - f0) * t * t / (2.0 * dur))).sin()
            })
            .collect();
        let x = AudioClip::from_f64(&x, 48_000);
        let y = bank.synthesize(&bank.analyze(&x)).unwrap();
        let delay = bank.delay();
        let err: Vec<f64> = (0..x.len())
            .map(|i| if i >= delay { y.samples[i] as f64 - x.samples[i - delay] as f64 } else { 0.0 })
            .collect();
        let cfg = StftConfig::fullband();
        let es = stft(&AudioClip::from_f64(&err[delay..], 48_000), &cfg).unwrap();
        // Full-scale sine peak in this STFT: sum of the window / 2.
        let full_scale = cfg.window.iter().sum::<f64>() / 2.0;
        let peak = es.data.iter().map(|c| c.norm() as f64).fold(0.0, f64::max);
        assert!(20.0 * (peak / full_scale).log10() < -40.0);
    }
}
