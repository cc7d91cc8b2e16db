//! Synthetic echo data: image-method room responses, echo-path convolution,
//! mixing at controlled signal-to-echo and signal-to-noise ratios, frame
//! VAD labels and on-disk datasets.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{AecError, Result};
use crate::kv::KvMap;
use crate::signal::{read_wav, write_wav, AudioClip, StftConfig, WavEncoding, DEFAULT_SAMPLE_RATE};

pub const SPEED_OF_SOUND: f64 = 343.0;

/// Shoebox room with a single source and microphone.
#[derive(Debug, Clone, PartialEq)]
pub struct RoomSpec {
    /// Room extent in meters along x, y and z.
    pub dims: [f64; 3],
    pub source: [f64; 3],
    pub mic: [f64; 3],
    /// Wall energy absorption, shared by all six walls.
    pub absorption: f64,
    pub max_order: u32,
    pub sample_rate: u32,
}

impl RoomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| !(d > 0.0)) {
            return Err(AecError::config(format!(
                "degenerate room dimensions {:?}",
                self.dims
            )));
        }
        for (name, p) in [("source", self.source), ("mic", self.mic)] {
            if (0..3).any(|i| !(p[i] > 0.0 && p[i] < self.dims[i])) {
                return Err(AecError::config(format!(
                    "{name} {p:?} is not strictly inside the room"
                )));
            }
        }
        if !(self.absorption > 0.0 && self.absorption <= 1.0) {
            return Err(AecError::config("absorption must lie in (0, 1]"));
        }
        if self.sample_rate == 0 {
            return Err(AecError::config("sample rate must be positive"));
        }
        Ok(())
    }
}

/// One mirrored source of the image method.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageSource {
    pub position: [f64; 3],
    pub distance: f64,
    /// Number of wall reflections along the path.
    pub order: u32,
    pub amplitude: f64,
    pub tap: usize,
}

/// Room impulse response h(n).
#[derive(Debug, Clone, PartialEq)]
pub struct Rir {
    pub taps: Vec<f64>,
    pub sample_rate: u32,
}

/// Enumerates every image source with at most `room.max_order` reflections.
pub fn image_sources(room: &RoomSpec) -> Result<Vec<ImageSource>> {
    room.validate()?;
    let order = room.max_order as i64;
    let gain = 1.0 - room.absorption;
    let fs = room.sample_rate as f64;
    let mut out = Vec::new();
    // Image coordinate along one axis: 2*n*L + (1 - 2q)*s, with |2n - q|
    // reflections off that axis' walls.
    let axis_images = |axis: usize| -> Vec<(f64, u32)> {
        let (l, s) = (room.dims[axis], room.source[axis]);
        let mut v = Vec::new();
        for n in -order..=order {
            for q in 0..2i64 {
                let refl = (2 * n - q).unsigned_abs() as u32;
                if refl as i64 <= order {
                    v.push((2.0 * n as f64 * l + (1 - 2 * q) as f64 * s, refl));
                }
            }
        }
        v
    };
    let (ix, iy, iz) = (axis_images(0), axis_images(1), axis_images(2));
    for &(x, rx) in &ix {
        for &(y, ry) in &iy {
            if rx + ry > room.max_order {
                continue;
            }
            for &(z, rz) in &iz {
                let refl = rx + ry + rz;
                if refl > room.max_order {
                    continue;
                }
                let p = [x, y, z];
                let distance = ((p[0] - room.mic[0]).powi(2)
                    + (p[1] - room.mic[1]).powi(2)
                    + (p[2] - room.mic[2]).powi(2))
                .sqrt();
                out.push(ImageSource {
                    position: p,
                    distance,
                    order: refl,
                    amplitude: gain.powi(refl as i32) / distance,
                    tap: (distance * fs / SPEED_OF_SOUND).round() as usize,
                });
            }
        }
    }
    Ok(out)
}

/// Image-method RIR with delays rounded to the nearest sample.
pub fn image_method_rir(room: &RoomSpec) -> Result<Rir> {
    let images = image_sources(room)?;
    let len = images.iter().map(|i| i.tap).max().unwrap_or(0) + 1;
    let mut taps = vec![0.0; len];
    for im in &images {
        taps[im.tap] += im.amplitude;
    }
    Ok(Rir {
        taps,
        sample_rate: room.sample_rate,
    })
}

/// Full linear convolution via zero-padded FFT.
pub(crate) fn fft_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    let n = out_len.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let load = |v: &[f64]| {
        let mut buf: Vec<Complex<f64>> = v.iter().map(|&x| Complex::new(x, 0.0)).collect();
        buf.resize(n, Complex::new(0.0, 0.0));
        buf
    };
    let (mut fa, mut fb) = (load(a), load(b));
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    inv.process(&mut fa);
    fa[..out_len].iter().map(|c| c.re / n as f64).collect()
}

/// Echo = (x delayed by `bulk_delay`) convolved with `h`, truncated to
/// `len(x)`.
pub fn convolve_echo(x: &AudioClip, h: &Rir, bulk_delay: usize) -> Result<AudioClip> {
    if x.sample_rate != h.sample_rate {
        return Err(AecError::RateMismatch(x.sample_rate, h.sample_rate));
    }
    let n = x.len();
    if bulk_delay >= n {
        return Ok(AudioClip::zeros(n, x.sample_rate));
    }
    let src = &x.to_f64()[..n - bulk_delay];
    let taps = &h.taps[..h.taps.len().min(n - bulk_delay)];
    let conv = fft_convolve(src, taps);
    let mut out = vec![0.0; n];
    for (i, v) in conv.into_iter().take(n - bulk_delay).enumerate() {
        out[i + bulk_delay] = v;
    }
    Ok(AudioClip::from_f64(&out, x.sample_rate))
}

/// Requested mixing ratios for one item.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    /// 10*log10(E[s^2] / E[echo^2]); `+inf` removes the echo.
    pub ser_db: f64,
    /// 10*log10(E[s^2] / E[noise^2]); `+inf` removes the noise.
    pub snr_db: f64,
    pub echo_delay: usize,
    pub seed: u64,
}

/// One synthetic training record, d = s + echo + noise.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMixture {
    pub d: AudioClip,
    pub x: AudioClip,
    pub s: AudioClip,
    pub echo: AudioClip,
    pub noise: AudioClip,
    /// Near-end activity per full-band STFT frame of `d`.
    pub vad: Vec<u8>,
    pub spec: MixtureSpec,
    pub echo_scale: f64,
    pub noise_scale: f64,
}

fn ratio_scale(reference_power: f64, power: f64, ratio_db: f64, what: &str) -> Result<f64> {
    if ratio_db == f64::INFINITY {
        return Ok(0.0);
    }
    if !ratio_db.is_finite() {
        return Err(AecError::config(format!("{what} ratio must be finite or +inf")));
    }
    if reference_power <= 0.0 {
        return Err(AecError::config(format!(
            "near-end reference has zero energy but {what} ratio is finite"
        )));
    }
    if power <= 0.0 {
        return Err(AecError::config(format!(
            "{what} has zero energy but a finite target ratio"
        )));
    }
    Ok((reference_power / (power * 10f64.powf(ratio_db / 10.0))).sqrt())
}

/// Mixes near-end speech, echo and noise at the ratios in `spec`.
pub fn mix(
    x: &AudioClip,
    s: &AudioClip,
    echo: &AudioClip,
    noise: &AudioClip,
    spec: &MixtureSpec,
) -> Result<LabeledMixture> {
    mix_with_reference(x, s, echo, noise, spec, s.power())
}

/// Like [`mix`], but ratios are taken relative to `reference_power` rather
/// than the power of `s`. Used for far-end single talk, where `s` is silent.
pub fn mix_with_reference(
    x: &AudioClip,
    s: &AudioClip,
    echo: &AudioClip,
    noise: &AudioClip,
    spec: &MixtureSpec,
    reference_power: f64,
) -> Result<LabeledMixture> {
    s.check_compatible(echo)?;
    s.check_compatible(noise)?;
    s.check_compatible(x)?;
    let echo_scale = ratio_scale(reference_power, echo.power(), spec.ser_db, "echo")?;
    let noise_scale = ratio_scale(reference_power, noise.power(), spec.snr_db, "noise")?;
    let echo = echo.scaled(echo_scale);
    let noise = noise.scaled(noise_scale);
    let d: Vec<f32> = (0..s.len())
        .map(|i| s.samples[i] + echo.samples[i] + noise.samples[i])
        .collect();
    let d = AudioClip::new(d, s.sample_rate)?;
    let vad = energy_vad(s, &StftConfig::fullband(), DEFAULT_VAD_THRESHOLD_DB);
    Ok(LabeledMixture {
        d,
        x: x.clone(),
        s: s.clone(),
        echo,
        noise,
        vad,
        spec: spec.clone(),
        echo_scale,
        noise_scale,
    })
}

pub const DEFAULT_VAD_THRESHOLD_DB: f64 = 40.0;

/// Frame label 1 iff the frame RMS is within `threshold_db` of the loudest
/// frame. Frames follow `cfg` without padding.
pub fn energy_vad(s: &AudioClip, cfg: &StftConfig, threshold_db: f64) -> Vec<u8> {
    energy_vad_samples(&s.samples, cfg, threshold_db)
}

pub(crate) fn energy_vad_samples(s: &[f32], cfg: &StftConfig, threshold_db: f64) -> Vec<u8> {
    let frames = cfg.frame_count(s.len());
    let rms: Vec<f64> = (0..frames)
        .map(|t| {
            let seg = &s[t * cfg.hop..t * cfg.hop + cfg.window_len];
            (seg.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / seg.len() as f64).sqrt()
        })
        .collect();
    let max = rms.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return vec![0; frames];
    }
    let floor = 20.0 * max.log10() - threshold_db;
    rms.iter()
        .map(|&r| u8::from(r > 0.0 && 20.0 * r.log10() > floor))
        .collect()
}

/// Deterministic speech-like source: voiced bursts with syllabic envelopes
/// and random formants, separated by silent gaps. RMS over the active part
/// is about 0.1.
pub fn speech_like(len: usize, sample_rate: u32, seed: u64) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eec_4000);
    let fs = sample_rate as f64;
    let mut out = vec![0.0f64; len];
    let mut pos = (rng.gen_range(0.02..0.2) * fs) as usize;
    while pos < len {
        let burst = (rng.gen_range(0.15..0.6) * fs) as usize;
        let f0 = rng.gen_range(90.0..250.0);
        let formants = [
            (rng.gen_range(300.0..900.0), 0.97),
            (rng.gen_range(900.0..2500.0), 0.95),
            (rng.gen_range(2500.0..4000.0), 0.9),
        ];
        let syllable_rate = rng.gen_range(3.0..6.0);
        let phase0 = rng.gen_range(0.0..2.0 * PI);
        // Excitation: glottal-like pulse train plus aspiration noise.
        let mut exc = vec![0.0f64; burst];
        let mut next_pulse = 0.0f64;
        for (i, e) in exc.iter_mut().enumerate() {
            if i as f64 >= next_pulse {
                *e += 1.0;
                let jitter = 1.0 + 0.02 * rng.gen_range(-1.0..1.0);
                next_pulse += fs / f0 * jitter;
            }
            *e += 0.15 * rng.gen_range(-1.0..1.0);
        }
        let mut voiced = vec![0.0f64; burst];
        for &(freq, radius) in &formants {
            let theta = 2.0 * PI * freq / fs;
            let (a1, a2) = (2.0 * radius * theta.cos(), -radius * radius);
            let (mut y1, mut y2) = (0.0, 0.0);
            for i in 0..burst {
                let y = exc[i] + a1 * y1 + a2 * y2;
                y2 = y1;
                y1 = y;
                voiced[i] += y * (1.0 - radius);
            }
        }
        for i in 0..burst {
            if pos + i >= len {
                break;
            }
            let t = i as f64 / burst as f64;
            let env = (PI * t).sin().sqrt()
                * (0.6 + 0.4 * (2.0 * PI * syllable_rate * i as f64 / fs + phase0).sin());
            out[pos + i] = voiced[i] * env;
        }
        pos += burst + (rng.gen_range(0.05..0.4) * fs) as usize;
    }
    normalize_active_rms(&mut out, 0.1);
    AudioClip::from_f64(&out, sample_rate)
}

/// Uniform white noise with RMS 0.1.
pub fn white_noise(len: usize, sample_rate: u32, seed: u64) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3417e);
    let mut v: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    normalize_active_rms(&mut v, 0.1);
    AudioClip::from_f64(&v, sample_rate)
}

/// Low-pass tilted background noise with RMS 0.1.
pub fn background_noise(len: usize, sample_rate: u32, seed: u64) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb6_0153);
    let mut state = 0.0;
    let mut v: Vec<f64> = (0..len)
        .map(|_| {
            let w: f64 = rng.gen_range(-1.0..1.0);
            state = 0.95 * state + 0.05 * w;
            state + 0.1 * w
        })
        .collect();
    normalize_active_rms(&mut v, 0.1);
    AudioClip::from_f64(&v, sample_rate)
}

fn normalize_active_rms(v: &mut [f64], target: f64) {
    let active: Vec<f64> = v.iter().copied().filter(|s| *s != 0.0).collect();
    if active.is_empty() {
        return;
    }
    let rms = (active.iter().map(|s| s * s).sum::<f64>() / active.len() as f64).sqrt();
    if rms > 0.0 {
        v.iter_mut().for_each(|s| *s *= target / rms);
    }
}

/// Which talkers are active in an item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// Far-end single talk: echo only.
    FarEnd,
    /// Near-end single talk: no far-end signal.
    NearEnd,
    DoubleTalk,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::FarEnd => "ST-FE",
            Scenario::NearEnd => "ST-NE",
            Scenario::DoubleTalk => "DT",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ST-FE" => Ok(Scenario::FarEnd),
            "ST-NE" => Ok(Scenario::NearEnd),
            "DT" => Ok(Scenario::DoubleTalk),
            other => Err(AecError::Parse(format!("unknown scenario {other:?}"))),
        }
    }
}

/// Echo path model for an item.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PathKind {
    ImageMethod,
    /// Exponentially decaying random FIR of the given length.
    Random(usize),
}

/// One line of a dataset manifest, with ranges already parsed.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestItem {
    pub id: String,
    pub seed: u64,
    pub scenario: Scenario,
    pub duration: f64,
    pub near: String,
    pub far: String,
    pub noise: String,
    pub ser_range: (f64, f64),
    pub snr_range: (f64, f64),
    pub delay_range: (usize, usize),
    pub room_range: (f64, f64),
    pub alpha_range: (f64, f64),
    pub max_order: u32,
    pub path: PathKind,
    pub sample_rate: u32,
}

impl ManifestItem {
    pub fn from_kv(kv: &KvMap, index: usize) -> Result<Self> {
        let range = |lo: &str, hi: &str, default: (f64, f64)| -> Result<(f64, f64)> {
            let a = kv.get_or(lo, default.0)?;
            let b = kv.get_or(hi, default.1)?;
            if a > b {
                return Err(AecError::Parse(format!("{lo} > {hi}")));
            }
            Ok((a, b))
        };
        let ser_range = match kv.get::<f64>("ser_db")? {
            Some(v) => (v, v),
            None => range("ser_min", "ser_max", (-10.0, 10.0))?,
        };
        let snr_range = match kv.get::<f64>("snr_db")? {
            Some(v) => (v, v),
            None => range("snr_min", "snr_max", (20.0, 40.0))?,
        };
        let delay_range = match kv.get::<usize>("delay")? {
            Some(v) => (v, v),
            None => {
                let lo = kv.get_or("delay_min", 0usize)?;
                let hi = kv.get_or("delay_max", 2400usize)?;
                if lo > hi {
                    return Err(AecError::Parse("delay_min > delay_max".into()));
                }
                (lo, hi)
            }
        };
        let path = match kv.get_str("path").unwrap_or("image") {
            "image" => PathKind::ImageMethod,
            "random" => PathKind::Random(kv.get_or("path_taps", 64usize)?),
            other => return Err(AecError::Parse(format!("unknown path kind {other:?}"))),
        };
        Ok(Self {
            id: kv
                .get_str("id")
                .map(str::to_string)
                .unwrap_or_else(|| format!("item_{index:04}")),
            seed: kv.get_or("seed", index as u64)?,
            scenario: Scenario::parse(kv.get_str("scenario").unwrap_or("DT"))?,
            duration: kv.get_or("duration", 4.0)?,
            near: kv.get_str("near").unwrap_or("builtin").to_string(),
            far: kv.get_str("far").unwrap_or("builtin").to_string(),
            noise: kv.get_str("noise").unwrap_or("builtin").to_string(),
            ser_range,
            snr_range,
            delay_range,
            room_range: range("room_min", "room_max", (3.0, 8.0))?,
            alpha_range: range("alpha_min", "alpha_max", (0.3, 0.9))?,
            max_order: kv.get_or("order", 6u32)?,
            path,
            sample_rate: kv.get_or("sample_rate", DEFAULT_SAMPLE_RATE)?,
        })
    }
}

/// Parses a manifest: one item per non-empty, non-comment line.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestItem>> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| ManifestItem::from_kv(&KvMap::parse_line(l)?, i))
        .collect()
}

/// A generated item plus its flat metadata record.
#[derive(Debug, Clone)]
pub struct SynthItem {
    pub id: String,
    pub scenario: Scenario,
    pub mixture: LabeledMixture,
    pub meta: KvMap,
}

fn load_source(
    spec: &str,
    base: &Path,
    len: usize,
    sample_rate: u32,
    seed: u64,
) -> Result<AudioClip> {
    match spec {
        "builtin" | "speech" => Ok(speech_like(len, sample_rate, seed)),
        "white" => Ok(white_noise(len, sample_rate, seed)),
        "babble" | "background" => Ok(background_noise(len, sample_rate, seed)),
        "silence" => Ok(AudioClip::zeros(len, sample_rate)),
        path => {
            let p = base.join(path);
            let clip = read_wav(&p)?;
            if clip.sample_rate != sample_rate {
                return Err(AecError::RateMismatch(clip.sample_rate, sample_rate));
            }
            if clip.is_empty() {
                return Err(AecError::Wav {
                    path: p,
                    msg: "empty".into(),
                });
            }
            Ok(AudioClip {
                samples: clip.samples.iter().cycle().take(len).copied().collect(),
                sample_rate,
            })
        }
    }
}

fn random_room(rng: &mut ChaCha8Rng, item: &ManifestItem) -> RoomSpec {
    let (lo, hi) = item.room_range;
    let dims = [0; 3].map(|_| sample_range(rng, lo, hi).max(1.5));
    let margin = 0.5;
    let inside = |rng: &mut ChaCha8Rng| {
        [0, 1, 2].map(|i| rng.gen_range(margin..dims[i] - margin))
    };
    RoomSpec {
        dims,
        source: inside(rng),
        mic: inside(rng),
        absorption: sample_range(rng, item.alpha_range.0, item.alpha_range.1),
        max_order: item.max_order,
        sample_rate: item.sample_rate,
    }
}

fn sample_range(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Random decaying FIR echo path with unit energy.
pub fn random_echo_path(taps: usize, sample_rate: u32, seed: u64) -> Rir {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xec40);
    let mut h: Vec<f64> = (0..taps)
        .map(|i| rng.gen_range(-1.0..1.0) * (-(i as f64) / (taps as f64 / 4.0)).exp())
        .collect();
    let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    h.iter_mut().for_each(|v| *v /= norm);
    Rir {
        taps: h,
        sample_rate,
    }
}

/// Builds one item in memory. `base` resolves relative source paths.
pub fn synth_item(item: &ManifestItem, base: &Path) -> Result<SynthItem> {
    let fs = item.sample_rate;
    let len = (item.duration * fs as f64).round() as usize;
    if len == 0 {
        return Err(AecError::config("item duration is zero"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(item.seed);
    let near = load_source(&item.near, base, len, fs, rng.gen())?;
    let far = load_source(&item.far, base, len, fs, rng.gen())?;
    let noise = load_source(&item.noise, base, len, fs, rng.gen())?;

    let mut meta = KvMap::new();
    let rir = match item.path {
        PathKind::ImageMethod => {
            let room = random_room(&mut rng, item);
            let rir = image_method_rir(&room)?;
            meta.set("room_x", room.dims[0]);
            meta.set("room_y", room.dims[1]);
            meta.set("room_z", room.dims[2]);
            meta.set("absorption", room.absorption);
            meta.set("order", room.max_order);
            rir
        }
        PathKind::Random(taps) => random_echo_path(taps, fs, rng.gen()),
    };
    meta.set("rir_len", rir.taps.len());
    let delay = rng.gen_range(item.delay_range.0..=item.delay_range.1);
    let ser_db = sample_range(&mut rng, item.ser_range.0, item.ser_range.1);
    let snr_db = sample_range(&mut rng, item.snr_range.0, item.snr_range.1);

    let (x, ser_db) = match item.scenario {
        Scenario::NearEnd => (AudioClip::zeros(len, fs), f64::INFINITY),
        _ => (far, ser_db),
    };
    let echo = convolve_echo(&x, &rir, delay)?;
    let spec = MixtureSpec {
        ser_db,
        snr_db,
        echo_delay: delay,
        seed: item.seed,
    };
    let reference = near.power();
    let mut mixture = mix_with_reference(&x, &near, &echo, &noise, &spec, reference)?;
    if item.scenario == Scenario::FarEnd {
        // Levels follow the would-be near-end talker; the talker is then muted.
        mixture.s = AudioClip::zeros(len, fs);
        mixture.d = AudioClip::from_f64(
            &(0..len)
                .map(|i| mixture.echo.samples[i] as f64 + mixture.noise.samples[i] as f64)
                .collect::<Vec<_>>(),
            fs,
        );
        mixture.vad = energy_vad(&mixture.s, &StftConfig::fullband(), DEFAULT_VAD_THRESHOLD_DB);
    }

    let db = |num: f64, den: f64| {
        if den > 0.0 {
            10.0 * (num / den).log10()
        } else {
            f64::INFINITY
        }
    };
    meta.set("id", &item.id);
    meta.set("scenario", item.scenario.as_str());
    meta.set("near_active", u8::from(item.scenario != Scenario::FarEnd));
    meta.set("far_active", u8::from(item.scenario != Scenario::NearEnd));
    meta.set("seed", item.seed);
    meta.set("sample_rate", fs);
    meta.set("delay", delay);
    meta.set("ser_db_target", ser_db);
    meta.set("snr_db_target", snr_db);
    meta.set("ser_db", db(reference, mixture.echo.power()));
    meta.set("snr_db", db(reference, mixture.noise.power()));
    meta.set("echo_scale", mixture.echo_scale);
    meta.set("noise_scale", mixture.noise_scale);
    Ok(SynthItem {
        id: item.id.clone(),
        scenario: item.scenario,
        mixture,
        meta,
    })
}

/// Outcome of [`synth_dataset`].
#[derive(Debug, Clone, Default)]
pub struct DatasetSummary {
    pub written: Vec<String>,
    /// `(item id, error message)` for items that failed.
    pub errors: Vec<(String, String)>,
}

pub const ITEM_SIGNALS: [&str; 5] = ["d", "x", "s", "echo", "noise"];

/// Writes one item directory: five float WAVs, `vad.txt` and `meta.txt`.
pub fn write_item(dir: &Path, item: &SynthItem) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| AecError::io(dir, e))?;
    let m = &item.mixture;
    for (name, clip) in ITEM_SIGNALS.iter().zip([&m.d, &m.x, &m.s, &m.echo, &m.noise]) {
        write_wav(dir.join(format!("{name}.wav")), clip, WavEncoding::Float32)?;
    }
    let labels: String = m.vad.iter().map(|v| format!("{v}\n")).collect();
    let p = dir.join("vad.txt");
    std::fs::write(&p, labels).map_err(|e| AecError::io(&p, e))?;
    let p = dir.join("meta.txt");
    std::fs::write(&p, item.meta.to_text()).map_err(|e| AecError::io(&p, e))
}

/// Reads an item directory written by [`write_item`].
pub fn read_item(dir: &Path) -> Result<SynthItem> {
    let meta = KvMap::read(dir.join("meta.txt"))?;
    let load = |n: &str| read_wav(dir.join(format!("{n}.wav")));
    let p = dir.join("vad.txt");
    let vad = std::fs::read_to_string(&p)
        .map_err(|e| AecError::io(&p, e))?
        .lines()
        .map(|l| {
            l.trim()
                .parse::<u8>()
                .map_err(|_| AecError::Parse(format!("bad vad label {l:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let spec = MixtureSpec {
        ser_db: meta.get_or("ser_db_target", f64::INFINITY)?,
        snr_db: meta.get_or("snr_db_target", f64::INFINITY)?,
        echo_delay: meta.get_or("delay", 0)?,
        seed: meta.get_or("seed", 0)?,
    };
    let mixture = LabeledMixture {
        d: load("d")?,
        x: load("x")?,
        s: load("s")?,
        echo: load("echo")?,
        noise: load("noise")?,
        vad,
        spec,
        echo_scale: meta.get_or("echo_scale", 0.0)?,
        noise_scale: meta.get_or("noise_scale", 0.0)?,
    };
    Ok(SynthItem {
        id: meta
            .get_str("id")
            .map(str::to_string)
            .unwrap_or_else(|| dir.file_name().unwrap().to_string_lossy().into_owned()),
        scenario: Scenario::parse(meta.get_str("scenario").unwrap_or("DT"))?,
        mixture,
        meta,
    })
}

/// Lists item directories (those containing `meta.txt`) in name order.
pub fn list_items(dataset_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(dataset_dir)
        .map_err(|e| AecError::io(dataset_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.txt").is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Generates every manifest item into `out_dir/<id>/`. Per-item failures are
/// collected rather than aborting the run.
pub fn synth_dataset(manifest_path: &Path, out_dir: &Path) -> Result<DatasetSummary> {
    let text =
        std::fs::read_to_string(manifest_path).map_err(|e| AecError::io(manifest_path, e))?;
    let items = parse_manifest(&text)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(out_dir).map_err(|e| AecError::io(out_dir, e))?;
    let results: Vec<(String, Result<()>)> = items
        .par_iter()
        .map(|item| {
            let r = synth_item(item, base).and_then(|it| write_item(&out_dir.join(&item.id), &it));
            (item.id.clone(), r)
        })
        .collect();
    let mut summary = DatasetSummary::default();
    for (id, r) in results {
        match r {
            Ok(()) => summary.written.push(id),
            Err(e) => summary.errors.push((id, e.to_string())),
        }
    }
    Ok(summary)
}
