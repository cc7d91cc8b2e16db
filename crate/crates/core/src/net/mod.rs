//! The neural post-filter.
//!
//! Inputs are the complex subband spectra of the microphone signal D, the
//! linear-filter residual E and the aligned reference X'. A gated phase
//! encoder turns them into a real feature for the zero-order module (ZOM,
//! a UNet predicting a magnitude mask on |D|) and a complex feature for the
//! first-order module (FOM, a complex residual). The output spectrum is
//! `mask * |D| * e^{j arg D} + residual`. A small VAD head rides on the ZOM
//! bottleneck.
//!
//! All tensors are `[channels, frames, bins]`; every time-axis operation is
//! causal.

pub mod frontend;
mod layers;
pub mod waveform;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{AecError, Result};
use crate::kv::KvMap;
use crate::signal::AudioClip;
use crate::tensor::{
    load_checkpoint, restore_store, save_checkpoint, store_entries, BatchNormMode, Conv2dSpec,
    ConvTranspose2dSpec, ParamStore, Real, Tape, Tensor, Var,
};

pub use frontend::{SubbandFrontend, SubbandSpectra};
pub use layers::{Graph, Init};
use layers::{causal_2x3, LEAKY_SLOPE};

/// Offset inside the modulus so its gradient stays finite at the origin.
const MODULUS_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalePreset {
    Desk,
    Wide,
}

impl ScalePreset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "wide" => Ok(Self::Wide),
            other => Err(AecError::config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Desk => "desk",
            Self::Wide => "wide",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub preset: ScalePreset,
    pub subbands: usize,
    /// Frequency bins per subband seen by the network.
    pub bins: usize,
    /// Complex channels of the phase encoder.
    pub pe_channels: usize,
    /// Output channels of each encoder stage; each stage halves frequency.
    pub encoder_channels: Vec<usize>,
    pub tfcm_layers: usize,
    pub use_tfcm: bool,
    /// Gated phase encoder; when off, the ZOM sees plain magnitudes and
    /// the FOM the raw stacked spectra.
    pub gated_pe: bool,
    pub zom_stcm_layers: usize,
    pub zom_stcm_hidden: usize,
    pub fom_stcm_layers: usize,
    pub fom_stcm_hidden: usize,
    /// Channels of the bottleneck context handed to the FOM.
    pub fom_context: usize,
    pub dprnn_hidden: usize,
    pub vad_channels: usize,
    pub vad_hidden: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl NetConfig {
    pub fn desk() -> Self {
        Self {
            preset: ScalePreset::Desk,
            subbands: 4,
            bins: 128,
            pe_channels: 16,
            encoder_channels: vec![16, 32, 48, 64],
            tfcm_layers: 6,
            use_tfcm: true,
            gated_pe: true,
            zom_stcm_layers: 1,
            zom_stcm_hidden: 128,
            fom_stcm_layers: 2,
            fom_stcm_hidden: 64,
            fom_context: 16,
            dprnn_hidden: 32,
            vad_channels: 16,
            vad_hidden: 32,
        }
    }

    /// Same depths as [`NetConfig::desk`] with wider channels, about 9.8M
    /// parameters.
    pub fn wide() -> Self {
        Self {
            preset: ScalePreset::Wide,
            pe_channels: 64,
            encoder_channels: vec![64, 128, 256, 384],
            dprnn_hidden: 384,
            fom_context: 64,
            vad_channels: 32,
            vad_hidden: 128,
            ..Self::desk()
        }
    }

    pub fn preset(p: ScalePreset) -> Self {
        match p {
            ScalePreset::Desk => Self::desk(),
            ScalePreset::Wide => Self::wide(),
        }
    }

    /// Returns the config with the two ablation toggles applied.
    pub fn with_ablation(mut self, use_tfcm: bool, gated_pe: bool) -> Self {
        self.use_tfcm = use_tfcm;
        self.gated_pe = gated_pe;
        self
    }

    pub fn total_stride(&self) -> usize {
        1 << self.encoder_channels.len()
    }

    pub fn bottleneck_bins(&self) -> usize {
        self.bins / self.total_stride()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("subbands", self.subbands),
            ("bins", self.bins),
            ("pe_channels", self.pe_channels),
            ("zom_stcm_hidden", self.zom_stcm_hidden),
            ("fom_stcm_hidden", self.fom_stcm_hidden),
            ("fom_context", self.fom_context),
            ("dprnn_hidden", self.dprnn_hidden),
            ("vad_channels", self.vad_channels),
            ("vad_hidden", self.vad_hidden),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(AecError::config(format!("net.{k} must be positive")));
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return Err(AecError::config("net.encoder_channels must be non-empty and positive"));
        }
        if self.encoder_channels.len() >= usize::BITS as usize
            || self.bins % self.total_stride() != 0
        {
            return Err(AecError::config(format!(
                "{} bins not divisible by total encoder stride {}",
                self.bins,
                self.total_stride()
            )));
        }
        if self.preset == ScalePreset::Wide
            && (self.tfcm_layers != 6
                || self.zom_stcm_layers != 1
                || self.zom_stcm_hidden != 128
                || self.fom_stcm_layers != 2
                || self.fom_stcm_hidden != 64)
        {
            return Err(AecError::config(
                "wide preset fixes tfcm_layers=6, zom stcm 1x128, fom stcm 2x64",
            ));
        }
        Ok(())
    }

    /// Reads `net.*` keys on top of the preset named by `net.preset`.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let preset = ScalePreset::parse(kv.get_str("net.preset").unwrap_or("desk"))?;
        let mut c = Self::preset(preset);
        macro_rules! read {
            ($($field:ident),*) => {
                $( c.$field = kv.get_or(concat!("net.", stringify!($field)), c.$field)?; )*
            };
        }
        read!(
            subbands, bins, pe_channels, tfcm_layers, use_tfcm, gated_pe, zom_stcm_layers,
            zom_stcm_hidden, fom_stcm_layers, fom_stcm_hidden, fom_context, dprnn_hidden,
            vad_channels, vad_hidden
        );
        if let Some(s) = kv.get_str("net.encoder_channels") {
            c.encoder_channels = s
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse()
                        .map_err(|_| AecError::Parse(format!("net.encoder_channels: bad entry {v:?}")))
                })
                .collect::<Result<_>>()?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("net.preset", self.preset.as_str());
        macro_rules! write {
            ($($field:ident),*) => {
                $( kv.set(concat!("net.", stringify!($field)), self.$field); )*
            };
        }
        write!(
            subbands, bins, pe_channels, tfcm_layers, use_tfcm, gated_pe, zom_stcm_layers,
            zom_stcm_hidden, fom_stcm_layers, fom_stcm_hidden, fom_context, dprnn_hidden,
            vad_channels, vad_hidden
        );
        let enc: Vec<String> = self.encoder_channels.iter().map(|c| c.to_string()).collect();
        kv.set("net.encoder_channels", enc.join(","));
        kv
    }
}

/// Real and imaginary planes of a `[bands, frames, bins]` complex map.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMap<T> {
    pub re: Tensor<T>,
    pub im: Tensor<T>,
}

impl<T: Real> ComplexMap<T> {
    pub fn from_spectra(s: &SubbandSpectra) -> Self {
        let shape = s.shape().to_vec();
        let conv = |v: &[f32]| Tensor {
            shape: shape.clone(),
            data: v.iter().map(|&x| T::of(x as f64)).collect(),
        };
        Self {
            re: conv(&s.re),
            im: conv(&s.im),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            re: Tensor::zeros(shape),
            im: Tensor::zeros(shape),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.re.shape
    }

    pub fn magnitude(&self) -> Tensor<T> {
        Tensor {
            shape: self.re.shape.clone(),
            data: self
                .re
                .data
                .iter()
                .zip(&self.im.data)
                .map(|(&a, &b)| (a * a + b * b).sqrt())
                .collect(),
        }
    }

    /// `(cos, sin)` of the phase; zero bins get phase 0.
    pub fn phase(&self) -> (Tensor<T>, Tensor<T>) {
        let mag = self.magnitude();
        let unit = |num: &Tensor<T>, fallback: T| Tensor {
            shape: num.shape.clone(),
            data: num
                .data
                .iter()
                .zip(&mag.data)
                .map(|(&v, &m)| if m > T::zero() { v / m } else { fallback })
                .collect(),
        };
        (unit(&self.re, T::one()), unit(&self.im, T::zero()))
    }

    pub fn cast<U: Real>(&self) -> ComplexMap<U> {
        ComplexMap {
            re: self.re.cast(),
            im: self.im.cast(),
        }
    }
}

/// Network input: spectra of D, E and X'.
#[derive(Debug, Clone, PartialEq)]
pub struct NetInput<T> {
    pub d: ComplexMap<T>,
    pub e: ComplexMap<T>,
    pub x: ComplexMap<T>,
}

impl<T: Real> NetInput<T> {
    pub fn from_spectra(d: &SubbandSpectra, e: &SubbandSpectra, x: &SubbandSpectra) -> Result<Self> {
        if d.shape() != e.shape() || d.shape() != x.shape() {
            return Err(AecError::ShapeMismatch {
                op: "net input",
                lhs: d.shape().to_vec(),
                rhs: if d.shape() != e.shape() { e.shape() } else { x.shape() }.to_vec(),
            });
        }
        Ok(Self {
            d: ComplexMap::from_spectra(d),
            e: ComplexMap::from_spectra(e),
            x: ComplexMap::from_spectra(x),
        })
    }

    pub fn frames(&self) -> usize {
        self.d.shape()[1]
    }

    pub fn cast<U: Real>(&self) -> NetInput<U> {
        NetInput {
            d: self.d.cast(),
            e: self.e.cast(),
            x: self.x.cast(),
        }
    }
}

/// Input planes on a tape, plus |D| and the phase of D as constants.
#[derive(Debug, Clone, Copy)]
pub struct InputVars {
    pub d: (Var, Var),
    pub e: (Var, Var),
    pub x: (Var, Var),
    pub d_mag: Var,
    pub d_cos: Var,
    pub d_sin: Var,
}

pub fn input_vars<T: Real>(tape: &mut Tape<T>, input: &NetInput<T>) -> Result<InputVars> {
    let shape = input.d.shape().to_vec();
    for m in [&input.d, &input.e, &input.x] {
        if m.re.shape != shape || m.im.shape != shape {
            return Err(AecError::ShapeMismatch {
                op: "net input",
                lhs: shape,
                rhs: m.re.shape.clone(),
            });
        }
    }
    let mut pair = |m: &ComplexMap<T>| (tape.constant(m.re.clone()), tape.constant(m.im.clone()));
    let (d, e, x) = (pair(&input.d), pair(&input.e), pair(&input.x));
    let (cos, sin) = input.d.phase();
    Ok(InputVars {
        d,
        e,
        x,
        d_mag: tape.constant(input.d.magnitude()),
        d_cos: tape.constant(cos),
        d_sin: tape.constant(sin),
    })
}

/// `sqrt(re^2 + im^2 + eps) - sqrt(eps)`: exactly zero for a zero field,
/// differentiable everywhere.
pub fn modulus<T: Real>(tape: &mut Tape<T>, re: Var, im: Var) -> Result<Var> {
    let m = tape.magnitude(re, im, MODULUS_EPS)?;
    tape.add_scalar(m, -MODULUS_EPS.sqrt())
}

#[derive(Debug, Clone, Copy)]
pub struct PhaseFeatures {
    /// Real feature for the ZOM.
    pub mag: Var,
    /// Complex feature for the FOM.
    pub re: Var,
    pub im: Var,
}

pub fn gated_phase_encoder<T: Real>(
    g: &mut Graph<'_, T>,
    cfg: &NetConfig,
    iv: &InputVars,
) -> Result<PhaseFeatures> {
    let shape = g.shape(iv.d.0);
    if shape.len() != 3 || shape[0] != cfg.subbands || shape[2] != cfg.bins {
        return Err(AecError::ShapeMismatch {
            op: "phase encoder",
            lhs: shape,
            rhs: vec![cfg.subbands, 0, cfg.bins],
        });
    }
    let mags = [iv.d, iv.e, iv.x]
        .iter()
        .map(|&(r, i)| modulus(g.tape, r, i))
        .collect::<Result<Vec<_>>>()?;
    let mags = g.tape.concat(&mags, 0)?;
    if !cfg.gated_pe {
        let re = g.tape.concat(&[iv.d.0, iv.e.0, iv.x.0], 0)?;
        let im = g.tape.concat(&[iv.d.1, iv.e.1, iv.x.1], 0)?;
        return Ok(PhaseFeatures { mag: mags, re, im });
    }
    let c = cfg.pe_channels;
    let spec = causal_2x3();
    let (re, im) = g.complex_conv_sum(
        &["pe.d", "pe.e", "pe.x"],
        &[iv.d, iv.e, iv.x],
        c,
        (2, 3),
        spec,
    )?;
    let gate = g.conv("pe.gate", mags, c, (2, 3), spec, true)?;
    let gate = g.tape.sigmoid(gate)?;
    let re = g.tape.mul(gate, re)?;
    let im = g.tape.mul(gate, im)?;
    let (cr, ci) = g.complex_conv("pe.c2r", re, im, c, (2, 3), spec)?;
    let mag = modulus(g.tape, cr, ci)?;
    Ok(PhaseFeatures { mag, re, im })
}

#[derive(Debug, Clone, Copy)]
pub struct ZomOutput {
    /// Mask in `[0, 2]`, `[bands, frames, bins]`.
    pub mask: Var,
    pub zero_order_mag: Var,
    /// `[C_last, frames, bins / stride]` after DPRNN and STCM.
    pub bottleneck: Var,
}

fn dprnn<T: Real>(g: &mut Graph<'_, T>, cfg: &NetConfig, z: Var) -> Result<Var> {
    let s = g.shape(z);
    let (c, t, fb) = (s[0], s[1], s[2]);
    let h = cfg.dprnn_hidden;
    // Intra path: bidirectional scan over frequency within each frame.
    let seq = g.tape.permute(z, &[2, 1, 0])?;
    let fwd = g.gru("zom.dprnn.intra_fwd", seq, h, false)?;
    let bwd = g.gru("zom.dprnn.intra_bwd", seq, h, true)?;
    let both = g.tape.concat(&[fwd, bwd], 2)?;
    let flat = g.tape.reshape(both, &[fb * t, 2 * h])?;
    let proj = g.linear("zom.dprnn.intra_proj", flat, c)?;
    let proj = g.tape.reshape(proj, &[fb, t, c])?;
    let proj = g.tape.permute(proj, &[2, 1, 0])?;
    let z1 = g.tape.add(z, proj)?;
    // Inter path: causal scan over time for each bin.
    let seq = g.tape.permute(z1, &[1, 2, 0])?;
    let out = g.gru("zom.dprnn.inter", seq, h, false)?;
    let flat = g.tape.reshape(out, &[t * fb, h])?;
    let proj = g.linear("zom.dprnn.inter_proj", flat, c)?;
    let proj = g.tape.reshape(proj, &[t, fb, c])?;
    let proj = g.tape.permute(proj, &[2, 0, 1])?;
    g.tape.add(z1, proj)
}

pub fn zom_forward<T: Real>(
    g: &mut Graph<'_, T>,
    cfg: &NetConfig,
    feature: Var,
    d_mag: Var,
) -> Result<ZomOutput> {
    cfg.validate()?;
    let fs = g.shape(feature);
    if fs.len() != 3 || fs[2] != cfg.bins {
        return Err(AecError::ShapeMismatch {
            op: "zom input",
            lhs: fs,
            rhs: vec![0, 0, cfg.bins],
        });
    }
    let down = Conv2dSpec {
        stride: (1, 2),
        padding: [1, 0, 1, 1],
        ..Default::default()
    };
    let up = ConvTranspose2dSpec {
        stride: (1, 2),
        crop: [0, 1, 1, 0],
        ..Default::default()
    };
    let mut x = feature;
    let mut skips = Vec::new();
    for (i, &c) in cfg.encoder_channels.iter().enumerate() {
        x = g.conv(&format!("zom.enc{i}.conv"), x, c, (2, 3), down, true)?;
        x = g.batch_norm(&format!("zom.enc{i}.bn"), x)?;
        x = g.tape.leaky_relu(x, LEAKY_SLOPE)?;
        if cfg.use_tfcm {
            x = g.tfcm(&format!("zom.enc{i}.tfcm"), x, cfg.tfcm_layers)?;
        }
        skips.push(x);
    }

    x = dprnn(g, cfg, x)?;
    let s = g.shape(x);
    let (c, t, fb) = (s[0], s[1], s[2]);
    let flat = g.tape.permute(x, &[0, 2, 1])?;
    let flat = g.tape.reshape(flat, &[c * fb, t, 1])?;
    let flat = g.stcm("zom.stcm", flat, cfg.zom_stcm_layers, cfg.zom_stcm_hidden)?;
    let back = g.tape.reshape(flat, &[c, fb, t])?;
    x = g.tape.permute(back, &[0, 2, 1])?;
    let bottleneck = x;

    for i in (0..cfg.encoder_channels.len()).rev() {
        x = g.tape.add(x, skips[i])?;
        let cout = if i == 0 { cfg.subbands } else { cfg.encoder_channels[i - 1] };
        x = g.tconv(&format!("zom.dec{i}.tconv"), x, cout, (2, 3), up)?;
        if i > 0 {
            x = g.batch_norm(&format!("zom.dec{i}.bn"), x)?;
            x = g.tape.leaky_relu(x, LEAKY_SLOPE)?;
            if cfg.use_tfcm {
                x = g.tfcm(&format!("zom.dec{i}.tfcm"), x, cfg.tfcm_layers)?;
            }
        }
    }
    let mask = g.tape.sigmoid(x)?;
    let mask = g.tape.scale(mask, 2.0)?;
    let zero_order_mag = g.tape.mul(mask, d_mag)?;
    Ok(ZomOutput {
        mask,
        zero_order_mag,
        bottleneck,
    })
}

/// Complex residual `(re, im)`, each `[bands, frames, bins]`.
pub fn fom_forward<T: Real>(
    g: &mut Graph<'_, T>,
    cfg: &NetConfig,
    re: Var,
    im: Var,
    bottleneck: Var,
) -> Result<(Var, Var)> {
    let (rs, bs) = (g.shape(re), g.shape(bottleneck));
    if rs != g.shape(im) || rs.len() != 3 || bs.len() != 3 || bs[1] != rs[1] || bs[2] == 0 || rs[2] % bs[2] != 0 {
        return Err(AecError::ShapeMismatch {
            op: "fom input",
            lhs: rs,
            rhs: bs,
        });
    }
    let ctx = g.conv1x1("fom.context", bottleneck, cfg.fom_context)?;
    let ctx = g.tape.repeat_axis(ctx, 2, rs[2] / bs[2])?;
    let x = g.tape.concat(&[re, im, ctx], 0)?;
    let x = g.stcm("fom.stcm", x, cfg.fom_stcm_layers, cfg.fom_stcm_hidden)?;
    let fr = g.conv1x1("fom.real", x, cfg.subbands)?;
    let fi = g.conv1x1("fom.imag", x, cfg.subbands)?;
    Ok((fr, fi))
}

/// Per-frame speech probability `[frames]`.
pub fn vad_forward<T: Real>(g: &mut Graph<'_, T>, cfg: &NetConfig, bottleneck: Var) -> Result<Var> {
    let v = g.conv1x1("vad.conv", bottleneck, cfg.vad_channels)?;
    let v = g.prelu("vad.act", v)?;
    let s = g.shape(v);
    let (c, t, fb) = (s[0], s[1], s[2]);
    let v = g.tape.permute(v, &[1, 0, 2])?;
    let v = g.tape.reshape(v, &[t, 1, c * fb])?;
    let h = g.gru("vad.gru", v, cfg.vad_hidden, false)?;
    let h = g.tape.reshape(h, &[t, cfg.vad_hidden])?;
    let o = g.linear("vad.out", h, 1)?;
    let o = g.tape.sigmoid(o)?;
    g.tape.reshape(o, &[t])
}

/// `zero_order_mag * e^{j phase(D)} + first_order`.
pub fn taylor_combine<T: Real>(
    tape: &mut Tape<T>,
    zero_order_mag: Var,
    d_cos: Var,
    d_sin: Var,
    first_re: Var,
    first_im: Var,
) -> Result<(Var, Var)> {
    let a = tape.mul(zero_order_mag, d_cos)?;
    let b = tape.mul(zero_order_mag, d_sin)?;
    Ok((tape.add(a, first_re)?, tape.add(b, first_im)?))
}

/// Handles to every intermediate a loss may need.
#[derive(Debug, Clone, Copy)]
pub struct NetVars {
    pub inputs: InputVars,
    pub features: PhaseFeatures,
    pub zom: ZomOutput,
    pub first_re: Var,
    pub first_im: Var,
    pub enhanced_re: Var,
    pub enhanced_im: Var,
    pub vad: Var,
}

pub fn net_forward<T: Real>(g: &mut Graph<'_, T>, cfg: &NetConfig, input: &NetInput<T>) -> Result<NetVars> {
    let iv = input_vars(g.tape, input)?;
    let features = gated_phase_encoder(g, cfg, &iv)?;
    let zom = zom_forward(g, cfg, features.mag, iv.d_mag)?;
    let (first_re, first_im) = fom_forward(g, cfg, features.re, features.im, zom.bottleneck)?;
    let vad = vad_forward(g, cfg, zom.bottleneck)?;
    let (enhanced_re, enhanced_im) =
        taylor_combine(g.tape, zom.zero_order_mag, iv.d_cos, iv.d_sin, first_re, first_im)?;
    Ok(NetVars {
        inputs: iv,
        features,
        zom,
        first_re,
        first_im,
        enhanced_re,
        enhanced_im,
        vad,
    })
}

/// Creates every parameter with a seeded initialisation by tracing one
/// forward pass on a two-frame dummy input.
pub fn init_params<T: Real>(cfg: &NetConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [cfg.subbands, 2, cfg.bins];
    let input = NetInput {
        d: ComplexMap::zeros(&shape),
        e: ComplexMap::zeros(&shape),
        x: ComplexMap::zeros(&shape),
    };
    let mut g = Graph {
        tape: &mut tape,
        store: &mut store,
        mode: BatchNormMode::Eval,
        init: Some(&mut rng),
    };
    net_forward(&mut g, cfg, &input)?;
    let norms: Vec<(String, usize)> = store
        .iter()
        .filter_map(|(_, p)| p.name.strip_suffix(".gamma").map(|b| (b.to_string(), p.value.numel())))
        .collect();
    for (bn, c) in norms {
        store.set_buffer(format!("{bn}.running_mean"), Tensor::zeros(&[c]));
        store.set_buffer(format!("{bn}.running_var"), Tensor::full(&[c], T::one()));
    }
    Ok(store)
}

/// Number of trainable scalars for `cfg`.
pub fn param_count(cfg: &NetConfig) -> Result<usize> {
    Ok(init_params::<f32>(cfg, 0)?.numel())
}

/// Plain-valued network output.
#[derive(Debug, Clone, PartialEq)]
pub struct NetOutput {
    pub enhanced: ComplexMap<f32>,
    pub zero_order_mag: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub first_order: ComplexMap<f32>,
    pub vad_prob: Vec<f32>,
}

/// A configured network with its parameters.
#[derive(Debug, Clone)]
pub struct TaylorAecNet {
    pub config: NetConfig,
    pub store: ParamStore<f32>,
    pub frontend: SubbandFrontend,
}

impl TaylorAecNet {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        let frontend = SubbandFrontend::default();
        if config.subbands != frontend.bank.num_bands || config.bins != frontend.bins() {
            return Err(AecError::config(format!(
                "net expects {} bands x {} bins, front end gives {} x {}",
                config.subbands,
                config.bins,
                frontend.bank.num_bands,
                frontend.bins()
            )));
        }
        let store = init_params(&config, seed)?;
        Ok(Self {
            config,
            store,
            frontend,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    /// Wraps trained parameters; the layout must match `config`.
    pub fn with_store(config: NetConfig, store: ParamStore<f32>) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        restore_store(&mut net.store, &store_entries(&store))?;
        Ok(net)
    }

    /// Parameters and batch-norm statistics.
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &store_entries(&self.store))
    }

    /// Loads a checkpoint written by [`TaylorAecNet::save`] or by the
    /// trainer; optimiser entries are ignored.
    pub fn load(config: NetConfig, path: &Path) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        restore_store(&mut net.store, &load_checkpoint(path)?)?;
        Ok(net)
    }

    /// Inference on spectra (batch norm in evaluation mode).
    pub fn infer(&self, input: &NetInput<f32>) -> Result<NetOutput> {
        let mut store = self.store.clone();
        let mut tape = Tape::new();
        let mut g = Graph {
            tape: &mut tape,
            store: &mut store,
            mode: BatchNormMode::Eval,
            init: None,
        };
        let v = net_forward(&mut g, &self.config, input)?;
        let val = |x: Var| tape.value(x).clone();
        let out = NetOutput {
            enhanced: ComplexMap {
                re: val(v.enhanced_re),
                im: val(v.enhanced_im),
            },
            zero_order_mag: val(v.zom.zero_order_mag),
            mask: val(v.zom.mask),
            first_order: ComplexMap {
                re: val(v.first_re),
                im: val(v.first_im),
            },
            vad_prob: val(v.vad).data,
        };
        if !out.enhanced.re.is_finite() || !out.enhanced.im.is_finite() {
            return Err(AecError::NonFinite("post-filter output"));
        }
        Ok(out)
    }

    /// Full audio path: subband analysis of d, e and x', network, and
    /// resynthesis. The output has the length of `d`.
    pub fn forward(&self, d: &AudioClip, e: &AudioClip, x: &AudioClip) -> Result<(AudioClip, NetOutput)> {
        d.check_compatible(e)?;
        d.check_compatible(x)?;
        let sd = self.frontend.analyze(d)?;
        let se = self.frontend.analyze(e)?;
        let sx = self.frontend.analyze(x)?;
        let out = self.infer(&NetInput::from_spectra(&sd, &se, &sx)?)?;
        // Nyquist bins bypass the network; take them from the residual.
        let enhanced = SubbandSpectra {
            re: out.enhanced.re.data.clone(),
            im: out.enhanced.im.data.clone(),
            ..se
        };
        Ok((self.frontend.synthesize(&enhanced)?, out))
    }
}

#[cfg(test)]
mod tests;
