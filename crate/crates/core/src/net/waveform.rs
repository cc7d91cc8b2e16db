//! Subband resynthesis expressed as tape operations, so time-domain
//! objectives can be differentiated through the inverse STFT and the
//! synthesis filter bank.

use std::f64::consts::PI;

use crate::error::{AecError, Result};
use crate::tensor::{ConvTranspose2dSpec, Real, Tape, Tensor, Var};

use super::{SubbandFrontend, SubbandSpectra};

fn cast<T: Real>(shape: Vec<usize>, data: Vec<f64>) -> Tensor<T> {
    Tensor {
        shape,
        data: data.into_iter().map(|v| T::from_f64(v).unwrap()).collect(),
    }
}

/// Waveform of `source_len` samples from `[bands, frames, bins]` spectra.
/// The Nyquist bins (`[bands * frames]`, real part used) are constants.
/// Matches [`SubbandFrontend::synthesize`] up to rounding.
pub fn synthesize_var<T: Real>(
    tape: &mut Tape<T>,
    fe: &SubbandFrontend,
    re: Var,
    im: Var,
    nyquist: &[f64],
    source_len: usize,
) -> Result<Var> {
    let stft = &fe.stft;
    let (n, win, hop) = (stft.fft_size, stft.window_len, stft.hop);
    if win != 2 * hop {
        return Err(AecError::config("tape resynthesis needs window_len = 2 * hop"));
    }
    let shape = tape.shape(re).to_vec();
    let [bands, frames, bins] = shape[..] else {
        return Err(AecError::ShapeMismatch {
            op: "synthesize_var",
            lhs: shape,
            rhs: vec![fe.bank.num_bands, 0, fe.bins()],
        });
    };
    if bands != fe.bank.num_bands || bins != fe.bins() || nyquist.len() != bands * frames {
        return Err(AecError::ShapeMismatch {
            op: "synthesize_var",
            lhs: vec![bands, frames, bins, nyquist.len()],
            rhs: vec![fe.bank.num_bands, frames, fe.bins(), bands * frames],
        });
    }

    // Real inverse DFT of the half spectrum, windowed and normalised.
    let scale = 1.0 / (n as f64 * stft.cola_gain());
    let mut cre = vec![0.0; bins * win];
    let mut cim = vec![0.0; bins * win];
    for k in 0..bins {
        let c = if k == 0 { 1.0 } else { 2.0 };
        for i in 0..win {
            let a = 2.0 * PI * (k * i % n) as f64 / n as f64;
            let g = scale * stft.window[i];
            cre[k * win + i] = c * a.cos() * g;
            if k > 0 {
                cim[k * win + i] = -c * a.sin() * g;
            }
        }
    }
    let mut nyq = vec![0.0; bands * frames * win];
    for (r, &v) in nyquist.iter().enumerate() {
        for i in 0..win {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            nyq[r * win + i] = sign * v * scale * stft.window[i];
        }
    }
    let cre = tape.constant(cast(vec![bins, win], cre));
    let cim = tape.constant(cast(vec![bins, win], cim));
    let nyq = tape.constant(cast(vec![bands * frames, win], nyq));
    let re2 = tape.reshape(re, &[bands * frames, bins])?;
    let im2 = tape.reshape(im, &[bands * frames, bins])?;
    let a = tape.matmul(re2, cre)?;
    let b = tape.matmul(im2, cim)?;
    let y = tape.add_n(&[a, b, nyq])?;
    let y = tape.reshape(y, &[bands, frames, win])?;

    // Overlap-add at 50 %: chunk j = head of frame j + tail of frame j-1.
    let head = tape.narrow(y, 2, 0, hop)?;
    let tail = tape.narrow(y, 2, hop, hop)?;
    let z = tape.constant(Tensor::zeros(&[bands, 1, hop]));
    let head = tape.concat(&[head, z], 1)?;
    let tail = tape.concat(&[z, tail], 1)?;
    let ola = tape.add(head, tail)?;
    let ola = tape.reshape(ola, &[bands, 1, (frames + 1) * hop])?;
    let delay = fe.bank.delay();
    let band_len = (source_len + delay).div_ceil(bands);
    let sub = tape.narrow(ola, 2, hop, band_len)?;

    // Synthesis filter bank as a strided transposed convolution.
    let taps = fe.bank.taps();
    let g: Vec<f64> = fe.bank.synthesis.iter().flatten().copied().collect();
    let g = tape.constant(cast(vec![bands, 1, 1, taps], g));
    let spec = ConvTranspose2dSpec {
        stride: (1, bands),
        ..Default::default()
    };
    let full = tape.conv_transpose2d(sub, g, None, spec)?;
    let out = tape.narrow(full, 2, delay, source_len)?;
    tape.reshape(out, &[source_len])
}

/// Nyquist bins of `s` in the layout [`synthesize_var`] expects.
pub fn nyquist_of(s: &SubbandSpectra) -> Vec<f64> {
    s.nyquist.iter().map(|c| c.re as f64).collect()
}
