//! Audio <-> network tensor conversion: PQMF band split followed by a
//! per-band STFT, and the inverse.
//!
//! Each band is front-padded by one hop so the first sample is covered by
//! two frames, and tail-padded to a whole number of hops plus one. The
//! Nyquist bin is kept aside so the network sees a power-of-two frequency
//! axis.

use rustfft::num_complex::Complex;

use crate::error::{AecError, Result};
use crate::filterbank::{PqmfBank, SubbandSignal};
use crate::signal::{istft_samples, stft_samples, AudioClip, ComplexSpectrogram, StftConfig};
use crate::simulate::energy_vad_samples;

/// Spectra of one signal: `[bands, frames, bins]` real and imaginary parts
/// (Nyquist excluded) plus the Nyquist bin `[bands, frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandSpectra {
    pub bands: usize,
    pub frames: usize,
    pub bins: usize,
    pub re: Vec<f32>,
    pub im: Vec<f32>,
    pub nyquist: Vec<Complex<f32>>,
    pub source_len: usize,
    pub sample_rate: u32,
}

impl SubbandSpectra {
    pub fn shape(&self) -> [usize; 3] {
        [self.bands, self.frames, self.bins]
    }

    pub fn magnitude(&self) -> Vec<f32> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(&a, &b)| (a * a + b * b).sqrt())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SubbandFrontend {
    pub bank: PqmfBank,
    pub stft: StftConfig,
}

impl Default for SubbandFrontend {
    fn default() -> Self {
        Self {
            bank: PqmfBank::default(),
            stft: StftConfig::subband(),
        }
    }
}

impl SubbandFrontend {
    /// Bins seen by the network (Nyquist dropped).
    pub fn bins(&self) -> usize {
        self.stft.bins() - 1
    }

    fn band_len(&self, len: usize) -> usize {
        (len + self.bank.delay()).div_ceil(self.bank.num_bands)
    }

    /// Frame count for a clip of `len` samples.
    pub fn frames(&self, len: usize) -> usize {
        self.band_len(len).div_ceil(self.stft.hop) + 1
    }

    pub fn analyze(&self, clip: &AudioClip) -> Result<SubbandSpectra> {
        if clip.is_empty() {
            return Err(AecError::InputTooShort { needed: 1, got: 0 });
        }
        let n = clip.len();
        let mut padded = clip.samples.clone();
        padded.resize(n + self.bank.delay(), 0.0);
        let sub = self.bank.analyze(&AudioClip {
            samples: padded,
            sample_rate: clip.sample_rate,
        });
        let hop = self.stft.hop;
        let frames = self.frames(n);
        let total = self.stft.signal_len(frames);
        let bins = self.bins();
        let m = sub.bands.len();
        let mut re = Vec::with_capacity(m * frames * bins);
        let mut im = Vec::with_capacity(m * frames * bins);
        let mut nyquist = Vec::with_capacity(m * frames);
        for band in &sub.bands {
            let mut buf = vec![0.0f32; total];
            buf[hop..hop + band.len()].copy_from_slice(band);
            let spec = stft_samples(&buf, &self.stft)?;
            debug_assert_eq!(spec.frames, frames);
            for t in 0..frames {
                let row = spec.frame(t);
                re.extend(row[..bins].iter().map(|c| c.re));
                im.extend(row[..bins].iter().map(|c| c.im));
                nyquist.push(row[bins]);
            }
        }
        Ok(SubbandSpectra {
            bands: m,
            frames,
            bins,
            re,
            im,
            nyquist,
            source_len: n,
            sample_rate: clip.sample_rate,
        })
    }

    /// Inverse of [`SubbandFrontend::analyze`]; output has `source_len`
    /// samples, filter-bank delay removed.
    pub fn synthesize(&self, spectra: &SubbandSpectra) -> Result<AudioClip> {
        let SubbandSpectra {
            bands,
            frames,
            bins,
            ..
        } = *spectra;
        if bands != self.bank.num_bands || bins != self.bins() {
            return Err(AecError::ShapeMismatch {
                op: "subband synthesis",
                lhs: vec![bands, bins],
                rhs: vec![self.bank.num_bands, self.bins()],
            });
        }
        let n = spectra.source_len;
        let band_len = self.band_len(n);
        let hop = self.stft.hop;
        let mut out_bands = Vec::with_capacity(bands);
        for b in 0..bands {
            let mut spec = ComplexSpectrogram::zeros(frames, &self.stft);
            for t in 0..frames {
                let base = (b * frames + t) * bins;
                for f in 0..bins {
                    spec.set(t, f, Complex::new(spectra.re[base + f], spectra.im[base + f]));
                }
                spec.set(t, bins, spectra.nyquist[b * frames + t]);
            }
            let y = istft_samples(&spec, &self.stft);
            out_bands.push(y[hop..hop + band_len].to_vec());
        }
        let delay = self.bank.delay();
        let full = self.bank.synthesize(&SubbandSignal {
            bands: out_bands,
            source_len: n + delay,
            source_rate: spectra.sample_rate,
        })?;
        Ok(AudioClip {
            samples: full.samples[delay..].to_vec(),
            sample_rate: spectra.sample_rate,
        })
    }

    /// Energy-based activity labels aligned with the network frames: frame
    /// `t` looks at the full-band samples it covers.
    pub fn frame_labels(&self, clip: &AudioClip, threshold_db: f64) -> Vec<u8> {
        let m = self.bank.num_bands;
        let frames = self.frames(clip.len());
        let cfg = StftConfig::new(self.stft.window_len * m, self.stft.hop * m, self.stft.fft_size * m)
            .expect("scaled subband framing is valid");
        let mut buf = vec![0.0f32; cfg.hop];
        buf.extend_from_slice(&clip.samples);
        buf.resize(cfg.signal_len(frames), 0.0);
        let mut labels = energy_vad_samples(&buf, &cfg, threshold_db);
        labels.resize(frames, 0);
        labels
    }
}
