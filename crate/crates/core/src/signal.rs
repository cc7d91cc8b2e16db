//! Sample-domain and time-frequency primitives: audio clips, WAV I/O and a
//! weighted overlap-add STFT.
//!
//! Storage is 32-bit; every transform accumulates in 64-bit.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{AecError, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 48_000;

/// A mono sampled signal.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(AecError::config("sample rate must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(AecError::NonFinite("audio samples"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn from_f64(samples: &[f64], sample_rate: u32) -> Self {
        Self {
            samples: samples.iter().map(|&s| s as f32).collect(),
            sample_rate,
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.samples.iter().map(|&s| s as f64).collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Sum of squared samples.
    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|&s| (s as f64) * (s as f64)).sum()
    }

    /// Mean of squared samples (0 for an empty clip).
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            self.energy() / self.samples.len() as f64
        }
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self
                .samples
                .iter()
                .map(|&s| (s as f64 * gain) as f32)
                .collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub(crate) fn check_compatible(&self, other: &AudioClip) -> Result<()> {
        if self.sample_rate != other.sample_rate {
            return Err(AecError::RateMismatch(self.sample_rate, other.sample_rate));
        }
        if self.len() != other.len() {
            return Err(AecError::LengthMismatch(self.len(), other.len()));
        }
        Ok(())
    }
}

/// Periodic square-root Hann window of length `n`.
pub fn sqrt_hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| (0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).sqrt())
        .collect()
}

/// Analysis/synthesis framing parameters. The same window is used on both
/// sides of the transform.
#[derive(Debug, Clone, PartialEq)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub window: Vec<f64>,
    cola_gain: f64,
}

impl StftConfig {
    /// Builds a config with a periodic sqrt-Hann window.
    pub fn new(window_len: usize, hop: usize, fft_size: usize) -> Result<Self> {
        Self::with_window(window_len, hop, fft_size, sqrt_hann(window_len))
    }

    pub fn with_window(
        window_len: usize,
        hop: usize,
        fft_size: usize,
        window: Vec<f64>,
    ) -> Result<Self> {
        if hop == 0 || hop > window_len || window_len > fft_size {
            return Err(AecError::config(format!(
                "stft requires 0 < hop <= window_len <= fft_size (got {hop}, {window_len}, {fft_size})"
            )));
        }
        if window.len() != window_len {
            return Err(AecError::config("window length does not match window_len"));
        }
        // Sum of w^2 over all hop shifts must be constant for weighted OLA.
        let mut sums = vec![0.0f64; hop];
        for (i, w) in window.iter().enumerate() {
            sums[i % hop] += w * w;
        }
        let cola_gain = sums.iter().sum::<f64>() / hop as f64;
        if cola_gain <= 0.0 || sums.iter().any(|s| (s - cola_gain).abs() > 1e-9 * cola_gain) {
            return Err(AecError::config(
                "window does not satisfy constant overlap-add at this hop",
            ));
        }
        Ok(Self {
            window_len,
            hop,
            fft_size,
            window,
            cola_gain,
        })
    }

    /// 20 ms window, 10 ms hop at 48 kHz, zero-padded to 1024 points.
    pub fn fullband() -> Self {
        Self::new(960, 480, 1024).expect("valid default stft config")
    }

    /// Same frame timing as [`StftConfig::fullband`] on a 12 kHz subband.
    pub fn subband() -> Self {
        Self::new(240, 120, 256).expect("valid subband stft config")
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Overlap-add normaliser: summed squared window per output sample.
    pub fn cola_gain(&self) -> f64 {
        self.cola_gain
    }

    /// Number of frames for an unpadded signal of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.window_len {
            0
        } else {
            (len - self.window_len) / self.hop + 1
        }
    }

    /// Output length of the inverse transform for `frames` frames.
    pub fn signal_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop + self.window_len
        }
    }

    fn same_framing(&self, other: &StftConfig) -> bool {
        self.window_len == other.window_len
            && self.hop == other.hop
            && self.fft_size == other.fft_size
            && self.window == other.window
    }
}

impl Default for StftConfig {
    fn default() -> Self {
        Self::fullband()
    }
}

/// Frames x bins complex matrix, row-major by frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex<f32>>,
    pub config: StftConfig,
}

impl ComplexSpectrogram {
    pub fn zeros(frames: usize, config: &StftConfig) -> Self {
        let bins = config.bins();
        Self {
            frames,
            bins,
            data: vec![Complex::new(0.0, 0.0); frames * bins],
            config: config.clone(),
        }
    }

    pub fn get(&self, t: usize, f: usize) -> Complex<f32> {
        self.data[t * self.bins + f]
    }

    pub fn set(&mut self, t: usize, f: usize, v: Complex<f32>) {
        self.data[t * self.bins + f] = v;
    }

    pub fn frame(&self, t: usize) -> &[Complex<f32>] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    /// Writes the debug dump: `{T: u64, F: u64}` little-endian followed by
    /// `T*F` interleaved `(re, im)` f32 pairs.
    pub fn write_dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(&(self.frames as u64).to_le_bytes())?;
        w.write_all(&(self.bins as u64).to_le_bytes())?;
        for c in &self.data {
            w.write_all(&c.re.to_le_bytes())?;
            w.write_all(&c.im.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a debug dump. The framing config is not part of the format and
    /// must be supplied by the caller.
    pub fn read_dump<R: Read>(mut r: R, config: &StftConfig) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)
            .map_err(|e| AecError::Parse(format!("spectrogram dump: {e}")))?;
        if buf.len() < 16 {
            return Err(AecError::Parse("spectrogram dump: truncated header".into()));
        }
        let frames = u64::from_le_bytes(buf[0..8].try_into().unwrap()) as usize;
        let bins = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
        let expected = frames
            .checked_mul(bins)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| AecError::Parse("spectrogram dump: size overflow".into()))?;
        if buf.len() - 16 != expected {
            return Err(AecError::Parse(format!(
                "spectrogram dump: expected {expected} payload bytes, found {}",
                buf.len() - 16
            )));
        }
        if bins != config.bins() {
            return Err(AecError::config("dump bin count does not match stft config"));
        }
        let data = buf[16..]
            .chunks_exact(8)
            .map(|c| {
                Complex::new(
                    f32::from_le_bytes(c[0..4].try_into().unwrap()),
                    f32::from_le_bytes(c[4..8].try_into().unwrap()),
                )
            })
            .collect();
        Ok(Self {
            frames,
            bins,
            data,
            config: config.clone(),
        })
    }
}

/// Short-time Fourier transform without edge padding.
pub fn stft(clip: &AudioClip, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    stft_samples(&clip.samples, cfg)
}

pub(crate) fn stft_samples(samples: &[f32], cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    if samples.len() < cfg.window_len {
        return Err(AecError::InputTooShort {
            needed: cfg.window_len,
            got: samples.len(),
        });
    }
    let frames = cfg.frame_count(samples.len());
    let bins = cfg.bins();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);
    let mut buf = vec![Complex::new(0.0f64, 0.0); cfg.fft_size];
    let mut data = Vec::with_capacity(frames * bins);
    for t in 0..frames {
        let start = t * cfg.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < cfg.window_len {
                Complex::new(samples[start + i] as f64 * cfg.window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        data.extend(
            buf[..bins]
                .iter()
                .map(|c| Complex::new(c.re as f32, c.im as f32)),
        );
    }
    Ok(ComplexSpectrogram {
        frames,
        bins,
        data,
        config: cfg.clone(),
    })
}

/// Inverse STFT by weighted overlap-add. Output has `(T-1)*hop + window_len`
/// samples.
pub fn istft(spec: &ComplexSpectrogram, cfg: &StftConfig, sample_rate: u32) -> Result<AudioClip> {
    if !cfg.same_framing(&spec.config) || spec.bins != cfg.bins() {
        return Err(AecError::config(
            "istft config does not match the spectrogram's analysis config",
        ));
    }
    let samples = istft_samples(spec, cfg);
    Ok(AudioClip {
        samples,
        sample_rate,
    })
}

pub(crate) fn istft_samples(spec: &ComplexSpectrogram, cfg: &StftConfig) -> Vec<f32> {
    let n = cfg.fft_size;
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let mut out = vec![0.0f64; cfg.signal_len(spec.frames)];
    let mut buf = vec![Complex::new(0.0f64, 0.0); n];
    let scale = 1.0 / (n as f64 * cfg.cola_gain);
    for t in 0..spec.frames {
        let frame = spec.frame(t);
        for k in 0..n {
            buf[k] = if k < spec.bins {
                let c = frame[k];
                Complex::new(c.re as f64, c.im as f64)
            } else {
                let c = frame[n - k];
                Complex::new(c.re as f64, -c.im as f64)
            };
        }
        // DC and Nyquist must be real for a real signal.
        buf[0].im = 0.0;
        if n % 2 == 0 {
            buf[n / 2].im = 0.0;
        }
        ifft.process(&mut buf);
        let start = t * cfg.hop;
        for i in 0..cfg.window_len {
            out[start + i] += buf[i].re * scale * cfg.window[i];
        }
    }
    out.into_iter().map(|s| s as f32).collect()
}

/// On-disk sample encoding for [`write_wav`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let wav_err = |msg: String| AecError::Wav {
        path: path.to_path_buf(),
        msg,
    };
    let reader = hound::WavReader::open(path).map_err(|e| wav_err(e.to_string()))?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(e.to_string()))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(e.to_string()))?,
        (fmt, bits) => {
            return Err(wav_err(format!(
                "unsupported encoding {fmt:?} {bits}-bit (expected 16-bit PCM or 32-bit float)"
            )))
        }
    };
    if interleaved.len() % channels != 0 {
        return Err(wav_err("truncated sample data".into()));
    }
    let samples: Vec<f32> = interleaved.iter().step_by(channels).copied().collect();
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(wav_err("non-finite sample".into()));
    }
    AudioClip::new(samples, spec.sample_rate)
}

pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip, encoding: WavEncoding) -> Result<()> {
    let path = path.as_ref();
    let wav_err = |e: hound::Error| AecError::Wav {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let (bits, fmt) = match encoding {
        WavEncoding::Pcm16 => (16, hound::SampleFormat::Int),
        WavEncoding::Float32 => (32, hound::SampleFormat::Float),
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: bits,
        sample_format: fmt,
    };
    let file = File::create(path).map_err(|e| AecError::io(path, e))?;
    let mut writer = hound::WavWriter::new(BufWriter::new(file), spec).map_err(wav_err)?;
    for &s in &clip.samples {
        match encoding {
            WavEncoding::Pcm16 => {
                let q = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                writer.write_sample(q).map_err(wav_err)?;
            }
            WavEncoding::Float32 => writer.write_sample(s).map_err(wav_err)?,
        }
    }
    writer.finalize().map_err(wav_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> AudioClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioClip::from_f64(
            &(0..len).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>(),
            48_000,
        )
    }

    #[test]
    fn zero_clip_gives_zero_spectrogram() {
        let spec = stft(&AudioClip::zeros(4800, 48_000), &StftConfig::default()).unwrap();
        assert_eq!((spec.frames, spec.bins), (9, 513));
        assert!(spec.data.iter().all(|c| c.re == 0.0 && c.im == 0.0));
    }

    #[test]
    fn too_short_is_rejected() {
        let err = stft(&AudioClip::zeros(959, 48_000), &StftConfig::default()).unwrap_err();
        assert!(err.to_string().contains("input too short"));
    }

    #[test]
    fn sine_peaks_at_nearest_bin() {
        let cfg = StftConfig::default();
        let clip = AudioClip::from_f64(
            &(0..4800)
                .map(|n| (2.0 * PI * 1000.0 * n as f64 / 48_000.0).sin())
                .collect::<Vec<_>>(),
            48_000,
        );
        let spec = stft(&clip, &cfg).unwrap();
        let expected = (1000.0 * cfg.fft_size as f64 / 48_000.0).round() as usize;
        for t in 0..spec.frames {
            let argmax = (0..spec.bins)
                .max_by(|&a, &b| spec.get(t, a).norm().total_cmp(&spec.get(t, b).norm()))
                .unwrap();
            assert_eq!(argmax, expected);
        }
    }

    #[test]
    fn round_trip_interior() {
        let cfg = StftConfig::default();
        let clip = noise(48_000, 3);
        let spec = stft(&clip, &cfg).unwrap();
        let back = istft(&spec, &cfg, 48_000).unwrap();
        let half = cfg.window_len / 2;
        let err = (half..back.len() - half)
            .map(|i| (back.samples[i] - clip.samples[i]).abs())
            .fold(0.0f32, f32::max);
        assert!(err < 1e-5, "max error {err}");
    }

    #[test]
    fn single_frame_istft_length() {
        let cfg = StftConfig::default();
        let spec = ComplexSpectrogram::zeros(1, &cfg);
        let clip = istft(&spec, &cfg, 48_000).unwrap();
        assert_eq!(clip.len(), cfg.window_len);
        assert!(clip.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn istft_rejects_mismatched_config() {
        let spec = stft(&noise(2000, 1), &StftConfig::default()).unwrap();
        assert!(istft(&spec, &StftConfig::new(960, 240, 1024).unwrap(), 48_000).is_err());
    }

    #[test]
    fn non_cola_window_rejected() {
        let rect = vec![1.0; 960];
        assert!(StftConfig::with_window(960, 700, 1024, rect).is_err());
    }

    #[test]
    fn parseval_per_frame() {
        let cfg = StftConfig::default();
        let clip = noise(960 * 3, 9);
        let spec = stft(&clip, &cfg).unwrap();
        for t in 0..spec.frames {
            let time: f64 = (0..cfg.window_len)
                .map(|i| (clip.samples[t * cfg.hop + i] as f64 * cfg.window[i]).powi(2))
                .sum();
            let n = cfg.fft_size;
            let frame = spec.frame(t);
            let mut freq = 0.0;
            for (k, c) in frame.iter().enumerate() {
                let p = (c.re as f64).powi(2) + (c.im as f64).powi(2);
                freq += if k == 0 || k == n / 2 { p } else { 2.0 * p };
            }
            freq /= n as f64;
            assert!((time - freq).abs() <= 1e-6 * time, "{time} vs {freq}");
        }
    }

    #[test]
    fn dump_round_trip() {
        let cfg = StftConfig::subband();
        let spec = stft(&noise(1000, 2), &cfg).unwrap();
        let mut buf = Vec::new();
        spec.write_dump(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + spec.frames * spec.bins * 8);
        let back = ComplexSpectrogram::read_dump(&buf[..], &cfg).unwrap();
        assert_eq!(back, spec);
        assert!(ComplexSpectrogram::read_dump(&buf[..buf.len() - 3], &cfg).is_err());
    }

    #[test]
    fn wav_float_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let clip = noise(1234, 5);
        write_wav(&path, &clip, WavEncoding::Float32).unwrap();
        assert_eq!(read_wav(&path).unwrap(), clip);
    }

    #[test]
    fn wav_pcm16_quantization_bound() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let mut clip = noise(4000, 6);
        clip.samples[0] = 1.0;
        clip.samples[1] = -1.0;
        write_wav(&path, &clip, WavEncoding::Pcm16).unwrap();
        let back = read_wav(&path).unwrap();
        let err = clip
            .samples
            .iter()
            .zip(&back.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err <= 2f32.powi(-15), "{err}");
    }

    #[test]
    fn truncated_wav_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        write_wav(&path, &noise(4000, 7), WavEncoding::Pcm16).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.wav");
        std::fs::write(&cut, &bytes[..bytes.len() - 1001]).unwrap();
        assert!(read_wav(&cut).is_err());
        std::fs::write(&cut, &bytes[..20]).unwrap();
        assert!(read_wav(&cut).is_err());
    }

    #[test]
    fn unsupported_codec_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 48_000,
            bits_per_sample: 8,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(3i8).unwrap();
        w.finalize().unwrap();
        let err = read_wav(&path).unwrap_err().to_string();
        assert!(err.contains("unsupported"), "{err}");
    }

    #[test]
    fn stereo_takes_first_channel() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16_000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for i in 0..10 {
            w.write_sample(i as f32 * 0.1).unwrap();
            w.write_sample(-1.0f32).unwrap();
        }
        w.finalize().unwrap();
        let clip = read_wav(&path).unwrap();
        assert_eq!(clip.sample_rate, 16_000);
        assert_eq!(clip.len(), 10);
        assert_eq!(clip.samples[3], 0.3);
    }

    proptest::proptest! {
        #[test]
        fn stft_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let cfg = StftConfig::new(64, 32, 64).unwrap();
            let x = noise(256, seed);
            let y = noise(256, seed + 7919);
            let combo = AudioClip::from_f64(
                &x.samples.iter().zip(&y.samples)
                    .map(|(&p, &q)| a * p as f64 + b * q as f64).collect::<Vec<_>>(),
                48_000,
            );
            let (sx, sy, sc) = (stft(&x, &cfg).unwrap(), stft(&y, &cfg).unwrap(), stft(&combo, &cfg).unwrap());
            let (mut num, mut den) = (0.0f64, 0.0f64);
            for i in 0..sc.data.len() {
                let expect_re = a * sx.data[i].re as f64 + b * sy.data[i].re as f64;
                let expect_im = a * sx.data[i].im as f64 + b * sy.data[i].im as f64;
                num += (sc.data[i].re as f64 - expect_re).powi(2) + (sc.data[i].im as f64 - expect_im).powi(2);
                den += expect_re.powi(2) + expect_im.powi(2);
            }
            proptest::prop_assert!(num.sqrt() <= 1e-6 * den.sqrt() + 1e-12);
        }

        #[test]
        fn round_trip_hop_multiple(frames in 3usize..12, seed in 0u64..1000) {
            let cfg = StftConfig::new(128, 64, 128).unwrap();
            let clip = noise(frames * cfg.hop + cfg.hop, seed);
            let back = istft(&stft(&clip, &cfg).unwrap(), &cfg, 48_000).unwrap();
            for i in cfg.hop..back.len() - cfg.hop {
                proptest::prop_assert!((back.samples[i] - clip.samples[i]).abs() < 1e-5);
            }
        }
    }
}
