//! Partitioned-block frequency-domain Kalman filter (PBFDKF).
//!
//! The echo path is split into `P` partitions of `B` taps. Each block of `B`
//! samples is filtered with overlap-save (FFT size `2B`). The Kalman update
//! keeps a diagonal state covariance per partition and bin; the process
//! noise of each partition follows its own weight power, which lets a
//! converged filter re-open its gain after an echo-path change.

use std::collections::VecDeque;
use std::io::Write;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{AecError, Result};
use crate::signal::AudioClip;

type C64 = Complex<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct PbfdkfConfig {
    /// Block shift `B` in samples; the transform size is `2B`.
    pub block: usize,
    pub partitions: usize,
    /// State transition factor `A`.
    pub transition: f64,
    pub regularization: f64,
    pub initial_state_var: f64,
    /// Recursive-average factor of the observation-noise estimate.
    pub noise_smoothing: f64,
    /// When false the weights are frozen and the filter is a fixed FIR.
    pub adapt: bool,
}

impl Default for PbfdkfConfig {
    fn default() -> Self {
        Self {
            block: 1024,
            partitions: 10,
            transition: 0.999,
            regularization: 1e-10,
            initial_state_var: 1.0,
            noise_smoothing: 0.98,
            adapt: true,
        }
    }
}

impl PbfdkfConfig {
    pub fn fft_size(&self) -> usize {
        2 * self.block
    }

    pub fn bins(&self) -> usize {
        self.block + 1
    }

    /// Total modeled echo-path length in taps.
    pub fn span(&self) -> usize {
        self.block * self.partitions
    }

    pub fn validate(&self) -> Result<()> {
        if self.block == 0 {
            return Err(AecError::config("block shift must be positive"));
        }
        if self.partitions == 0 {
            return Err(AecError::config("partition count must be at least 1"));
        }
        if !(self.transition > 0.0 && self.transition < 1.0) {
            return Err(AecError::config(format!(
                "transition factor must lie in (0, 1), got {}",
                self.transition
            )));
        }
        if !(self.regularization >= 0.0) || !(self.initial_state_var >= 0.0) {
            return Err(AecError::config("regularization and state variance must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.noise_smoothing) {
            return Err(AecError::config("noise smoothing must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Adaptive filter state for one stream.
pub struct PbfdkfState {
    cfg: PbfdkfConfig,
    /// `weights[p][k]`: frequency-domain weights of partition `p`.
    weights: Vec<Vec<C64>>,
    /// Spectra of the last `P` far-end windows, newest first.
    x_spectra: VecDeque<Vec<C64>>,
    x_prev: Vec<f64>,
    /// `state_var[p][k]`: diagonal state error covariance.
    state_var: Vec<Vec<f64>>,
    obs_noise: Vec<f64>,
    process_noise: Vec<Vec<f64>>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    scratch: Vec<C64>,
}

impl std::fmt::Debug for PbfdkfState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PbfdkfState")
            .field("cfg", &self.cfg)
            .field("partitions", &self.weights.len())
            .field("bins", &self.cfg.bins())
            .finish()
    }
}

impl PbfdkfState {
    pub fn new(cfg: PbfdkfConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.fft_size();
        let k = cfg.bins();
        let mut planner = FftPlanner::new();
        let zeros = vec![C64::new(0.0, 0.0); k];
        Ok(Self {
            weights: vec![zeros.clone(); cfg.partitions],
            x_spectra: (0..cfg.partitions).map(|_| zeros.clone()).collect(),
            x_prev: vec![0.0; cfg.block],
            state_var: vec![vec![cfg.initial_state_var; k]; cfg.partitions],
            obs_noise: vec![0.0; k],
            process_noise: vec![vec![0.0; k]; cfg.partitions],
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
            scratch: vec![C64::new(0.0, 0.0); n],
            cfg,
        })
    }

    pub fn config(&self) -> &PbfdkfConfig {
        &self.cfg
    }

    pub fn set_adapt(&mut self, adapt: bool) {
        self.cfg.adapt = adapt;
    }

    /// `[partition][bin]` frequency-domain weights.
    pub fn weights(&self) -> &[Vec<C64>] {
        &self.weights
    }

    /// `[partition][bin]` state error variance.
    pub fn state_variance(&self) -> &[Vec<f64>] {
        &self.state_var
    }

    pub fn observation_noise(&self) -> &[f64] {
        &self.obs_noise
    }

    pub fn process_noise(&self) -> &[Vec<f64>] {
        &self.process_noise
    }

    /// Time-domain impulse response currently modeled, `P * B` taps.
    pub fn impulse_response(&self) -> Vec<f64> {
        let n = self.cfg.fft_size();
        let b = self.cfg.block;
        let mut out = Vec::with_capacity(self.cfg.span());
        let mut buf = vec![C64::new(0.0, 0.0); n];
        for w in &self.weights {
            hermitian_fill(w, &mut buf);
            self.inv.process(&mut buf);
            out.extend(buf[..b].iter().map(|c| c.re / n as f64));
        }
        out
    }

    /// Sets the weights from a time-domain FIR of at most `P * B` taps.
    pub fn set_impulse_response(&mut self, h: &[f64]) -> Result<()> {
        let b = self.cfg.block;
        if h.len() > self.cfg.span() {
            return Err(AecError::config("impulse response longer than filter span"));
        }
        let k = self.cfg.bins();
        for (p, w) in self.weights.iter_mut().enumerate() {
            let mut buf = vec![C64::new(0.0, 0.0); self.cfg.fft_size()];
            for i in 0..b {
                if let Some(&v) = h.get(p * b + i) {
                    buf[i] = C64::new(v, 0.0);
                }
            }
            self.fwd.process(&mut buf);
            w.copy_from_slice(&buf[..k]);
        }
        Ok(())
    }

    /// Filters one block of `B` samples, returning `(e, y_hat)`.
    pub fn process_block(&mut self, x_block: &[f32], d_block: &[f32]) -> Result<(Vec<f32>, Vec<f32>)> {
        let b = self.cfg.block;
        if x_block.len() != b || d_block.len() != b {
            return Err(AecError::config(format!(
                "block length must be exactly {b} (got x={}, d={})",
                x_block.len(),
                d_block.len()
            )));
        }
        if x_block.iter().chain(d_block).any(|v| !v.is_finite()) {
            return Err(AecError::NonFinite("pbfdkf input"));
        }
        let n = self.cfg.fft_size();
        let k = self.cfg.bins();

        // Far-end spectrum of [previous block, current block].
        for i in 0..b {
            self.scratch[i] = C64::new(self.x_prev[i], 0.0);
            self.scratch[b + i] = C64::new(x_block[i] as f64, 0.0);
        }
        self.fwd.process(&mut self.scratch);
        let mut newest = self.x_spectra.pop_back().expect("partitions >= 1");
        newest.copy_from_slice(&self.scratch[..k]);
        self.x_spectra.push_front(newest);
        for (p, v) in self.x_prev.iter_mut().zip(x_block) {
            *p = *v as f64;
        }

        // Echo estimate: last B samples of IFFT(sum_p W_p X_{t-p}).
        let mut echo_spec = vec![C64::new(0.0, 0.0); k];
        for (w, x) in self.weights.iter().zip(&self.x_spectra) {
            for i in 0..k {
                echo_spec[i] += w[i] * x[i];
            }
        }
        hermitian_fill(&echo_spec, &mut self.scratch);
        self.inv.process(&mut self.scratch);
        let y: Vec<f64> = self.scratch[b..].iter().map(|c| c.re / n as f64).collect();
        let e: Vec<f64> = d_block.iter().zip(&y).map(|(&d, &y)| d as f64 - y).collect();

        if self.cfg.adapt {
            self.update(&e);
        }

        if self.weights.iter().flatten().any(|w| !w.re.is_finite() || !w.im.is_finite())
            || self.state_var.iter().flatten().any(|v| !v.is_finite() || *v < 0.0)
            || e.iter().any(|v| !v.is_finite())
        {
            return Err(AecError::Diverged);
        }
        Ok((
            e.into_iter().map(|v| v as f32).collect(),
            y.into_iter().map(|v| v as f32).collect(),
        ))
    }

    fn update(&mut self, e: &[f64]) {
        let b = self.cfg.block;
        let n = self.cfg.fft_size();
        let k = self.cfg.bins();
        let a = self.cfg.transition;
        let a2 = a * a;
        let lambda = self.cfg.noise_smoothing;
        let parts = self.cfg.partitions as f64;

        for i in 0..b {
            self.scratch[i] = C64::new(0.0, 0.0);
            self.scratch[b + i] = C64::new(e[i], 0.0);
        }
        self.fwd.process(&mut self.scratch);
        let err_spec: Vec<C64> = self.scratch[..k].to_vec();

        // Observation noise enters the innovation spread over the partitions.
        let noise_weight = 2.0 / parts;
        let mut innovation = vec![0.0f64; k];
        for i in 0..k {
            self.obs_noise[i] = lambda * self.obs_noise[i] + (1.0 - lambda) * err_spec[i].norm_sqr();
            innovation[i] = self
                .state_var
                .iter()
                .zip(&self.x_spectra)
                .map(|(p, x)| p[i] * x[i].norm_sqr())
                .sum::<f64>()
                + noise_weight * self.obs_noise[i]
                + self.cfg.regularization;
        }

        for p in 0..self.cfg.partitions {
            let x = &self.x_spectra[p];
            let w = &mut self.weights[p];
            let pv = &mut self.state_var[p];
            let q = &mut self.process_noise[p];
            let mut corr = vec![C64::new(0.0, 0.0); k];
            for i in 0..k {
                let mu = pv[i] / innovation[i];
                corr[i] = mu * x[i].conj() * err_spec[i];
                let kalman = (mu * x[i].norm_sqr()).min(1.0);
                q[i] = (1.0 - a2) * w[i].norm_sqr();
                pv[i] = (a2 * (1.0 - 0.5 * kalman) * pv[i] + q[i]).max(0.0);
            }
            // Overlap-save constraint: keep only the first B taps.
            hermitian_fill(&corr, &mut self.scratch);
            self.inv.process(&mut self.scratch);
            for v in self.scratch.iter_mut() {
                *v /= n as f64;
            }
            for v in self.scratch[b..].iter_mut() {
                *v = C64::new(0.0, 0.0);
            }
            for v in self.scratch[..b].iter_mut() {
                v.im = 0.0;
            }
            self.fwd.process(&mut self.scratch);
            for i in 0..k {
                w[i] = a * (w[i] + self.scratch[i]);
            }
        }
    }

    /// Debug snapshot: `{P: u64, K: u64}` little-endian, then `P*K`
    /// interleaved `(re, im)` f32 weights, then f32 state variance (`P*K`),
    /// observation noise (`K`) and process noise (`P*K`).
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(&(self.weights.len() as u64).to_le_bytes())?;
        w.write_all(&(self.cfg.bins() as u64).to_le_bytes())?;
        for c in self.weights.iter().flatten() {
            w.write_all(&(c.re as f32).to_le_bytes())?;
            w.write_all(&(c.im as f32).to_le_bytes())?;
        }
        for v in self
            .state_var
            .iter()
            .flatten()
            .chain(&self.obs_noise)
            .chain(self.process_noise.iter().flatten())
        {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }
}

/// Expands `k = n/2 + 1` bins into a full conjugate-symmetric spectrum.
fn hermitian_fill(half: &[C64], full: &mut [C64]) {
    let n = full.len();
    full[..half.len()].copy_from_slice(half);
    for i in half.len()..n {
        full[i] = half[n - i].conj();
    }
    full[0].im = 0.0;
    full[n / 2].im = 0.0;
}

/// Streams whole clips through the filter. Output length equals input
/// length; the final partial block is zero-padded.
pub fn pbfdkf_run(
    cfg: &PbfdkfConfig,
    x: &AudioClip,
    d: &AudioClip,
) -> Result<(AudioClip, AudioClip)> {
    x.check_compatible(d)?;
    let mut state = PbfdkfState::new(cfg.clone())?;
    run_with_state(&mut state, x, d)
}

pub fn run_with_state(
    state: &mut PbfdkfState,
    x: &AudioClip,
    d: &AudioClip,
) -> Result<(AudioClip, AudioClip)> {
    x.check_compatible(d)?;
    let b = state.cfg.block;
    let n = x.len();
    let mut e = Vec::with_capacity(n + b);
    let mut y = Vec::with_capacity(n + b);
    let mut xb = vec![0.0f32; b];
    let mut db = vec![0.0f32; b];
    let mut start = 0;
    while start < n {
        let end = (start + b).min(n);
        xb.fill(0.0);
        db.fill(0.0);
        xb[..end - start].copy_from_slice(&x.samples[start..end]);
        db[..end - start].copy_from_slice(&d.samples[start..end]);
        let (eb, yb) = state.process_block(&xb, &db)?;
        e.extend_from_slice(&eb);
        y.extend_from_slice(&yb);
        start = end;
    }
    e.truncate(n);
    y.truncate(n);
    Ok((
        AudioClip {
            samples: e,
            sample_rate: x.sample_rate,
        },
        AudioClip {
            samples: y,
            sample_rate: x.sample_rate,
        },
    ))
}
