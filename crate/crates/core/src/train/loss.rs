//! Training objective: echo-weighted compressed spectral loss, a one-sided
//! over-suppression penalty, a magnitude-mask regression and a VAD
//! cross-entropy.
//!
//! Spectra are `[bands, frames, bins]`; frame labels index the middle axis.

use crate::error::{AecError, Result};
use crate::kv::KvMap;
use crate::net::ComplexMap;
use crate::tensor::{shape_err, Real, Tape, Tensor, Var};

/// Below this magnitude the compression gradient is cut to zero.
pub const COMPRESS_FLOOR: f64 = 1e-8;
/// Denominator guard of the ideal amplitude mask.
pub const MASK_EPS: f64 = 1e-8;
pub const MASK_MAX: f64 = 2.0;
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub echo_weighted_weight: f64,
    pub asym_weight: f64,
    pub mask_weight: f64,
    pub vad_weight: f64,
    /// Weight of echo-active frames in the spectral loss.
    pub gamma: f64,
    /// Power-law compression exponent.
    pub compress: f64,
    pub use_asym: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            echo_weighted_weight: 1.0,
            asym_weight: 1.0,
            mask_weight: 0.2,
            vad_weight: 0.1,
            gamma: 10.0,
            compress: 0.3,
            use_asym: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 1.0) {
            return Err(AecError::config("loss.gamma must be >= 1"));
        }
        if !(self.compress > 0.0 && self.compress <= 1.0) {
            return Err(AecError::config("loss.compress must lie in (0, 1]"));
        }
        let w = [
            self.echo_weighted_weight,
            self.asym_weight,
            self.mask_weight,
            self.vad_weight,
        ];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(AecError::config("loss weights must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = Self::default();
        let c = Self {
            echo_weighted_weight: kv.get_or("loss.echo_weighted_weight", d.echo_weighted_weight)?,
            asym_weight: kv.get_or("loss.asym_weight", d.asym_weight)?,
            mask_weight: kv.get_or("loss.mask_weight", d.mask_weight)?,
            vad_weight: kv.get_or("loss.vad_weight", d.vad_weight)?,
            gamma: kv.get_or("loss.gamma", d.gamma)?,
            compress: kv.get_or("loss.compress", d.compress)?,
            use_asym: kv.get_or("loss.use_asym", d.use_asym)?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("loss.echo_weighted_weight", self.echo_weighted_weight);
        kv.set("loss.asym_weight", self.asym_weight);
        kv.set("loss.mask_weight", self.mask_weight);
        kv.set("loss.vad_weight", self.vad_weight);
        kv.set("loss.gamma", self.gamma);
        kv.set("loss.compress", self.compress);
        kv.set("loss.use_asym", self.use_asym);
        kv
    }

    fn effective_asym_weight(&self) -> f64 {
        if self.use_asym {
            self.asym_weight
        } else {
            0.0
        }
    }
}

/// Loss terms as plain numbers.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub echo_weighted: f64,
    pub asym: f64,
    pub mask: f64,
    pub vad: f64,
}

impl LossParts {
    /// Weighted sum of the parts under `cfg`.
    pub fn total(&self, cfg: &LossConfig) -> f64 {
        cfg.echo_weighted_weight * self.echo_weighted
            + cfg.effective_asym_weight() * self.asym
            + cfg.mask_weight * self.mask
            + cfg.vad_weight * self.vad
    }
}

/// Loss terms on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub echo_weighted: Var,
    pub asym: Var,
    pub mask: Var,
    pub vad: Var,
}

impl LossVars {
    pub fn values<T: Real>(&self, tape: &Tape<T>) -> LossParts {
        let v = |x: Var| tape.value(x).data[0].f64();
        LossParts {
            echo_weighted: v(self.echo_weighted),
            asym: v(self.asym),
            mask: v(self.mask),
            vad: v(self.vad),
        }
    }
}

/// Weighted sum of the loss terms.
pub fn loss_total<T: Real>(tape: &mut Tape<T>, parts: &LossVars, cfg: &LossConfig) -> Result<Var> {
    let terms = [
        (parts.echo_weighted, cfg.echo_weighted_weight),
        (parts.asym, cfg.effective_asym_weight()),
        (parts.mask, cfg.mask_weight),
        (parts.vad, cfg.vad_weight),
    ];
    let scaled = terms
        .iter()
        .map(|&(v, w)| tape.scale(v, w))
        .collect::<Result<Vec<_>>>()?;
    tape.add_n(&scaled)
}

/// Power-law compressed spectrum: `(|z|^c, z |z|^(c-1))`.
struct Compressed {
    mag: Var,
    re: Var,
    im: Var,
}

fn compress<T: Real>(tape: &mut Tape<T>, re: Var, im: Var, c: f64) -> Result<Compressed> {
    let mag = tape.mag_pow(re, im, c, COMPRESS_FLOOR)?;
    let s = tape.mag_pow(re, im, c - 1.0, COMPRESS_FLOOR)?;
    Ok(Compressed {
        mag,
        re: tape.mul(re, s)?,
        im: tape.mul(im, s)?,
    })
}

fn target_vars<T: Real>(tape: &mut Tape<T>, est: (Var, Var), target: &ComplexMap<T>) -> Result<(Var, Var)> {
    for v in [est.0, est.1] {
        if tape.shape(v) != target.shape() {
            return Err(shape_err("loss", tape.shape(v), target.shape()));
        }
    }
    Ok((tape.constant(target.re.clone()), tape.constant(target.im.clone())))
}

/// Per-frame weights `gamma` (echo active) or 1, broadcast to the
/// spectrum shape.
pub fn echo_weights<T: Real>(shape: &[usize], echo_active: &[u8], gamma: f64) -> Result<Tensor<T>> {
    let [bands, frames, bins] = shape else {
        return Err(shape_err("echo weights", shape, &[0, 0, 0]));
    };
    if echo_active.len() != *frames {
        return Err(shape_err("echo weights", shape, &[echo_active.len()]));
    }
    let mut data = Vec::with_capacity(bands * frames * bins);
    for _ in 0..*bands {
        for &a in echo_active {
            let w = T::of(if a != 0 { gamma } else { 1.0 });
            data.extend(std::iter::repeat(w).take(*bins));
        }
    }
    Ok(Tensor {
        shape: shape.to_vec(),
        data,
    })
}

/// Mean over bins of `w(t) * ((|S^|^c - |S|^c)^2 + |S^_c - S_c|^2)`, where
/// `X_c = X |X|^(c-1)` and `w(t) = gamma` on echo-active frames.
pub fn loss_echo_weighted<T: Real>(
    tape: &mut Tape<T>,
    est: (Var, Var),
    target: &ComplexMap<T>,
    echo_active: &[u8],
    cfg: &LossConfig,
) -> Result<Var> {
    let (tr, ti) = target_vars(tape, est, target)?;
    let e = compress(tape, est.0, est.1, cfg.compress)?;
    let s = compress(tape, tr, ti, cfg.compress)?;
    let dm = tape.sub(e.mag, s.mag)?;
    let dr = tape.sub(e.re, s.re)?;
    let di = tape.sub(e.im, s.im)?;
    let sq = [dm, dr, di]
        .iter()
        .map(|&v| tape.square(v))
        .collect::<Result<Vec<_>>>()?;
    let per_bin = tape.add_n(&sq)?;
    let w = tape.constant(echo_weights(target.shape(), echo_active, cfg.gamma)?);
    let weighted = tape.mul(per_bin, w)?;
    tape.mean(weighted)
}

/// Mean over bins of `max(0, |S|^c - |S^|^c)^2`.
pub fn loss_asym<T: Real>(
    tape: &mut Tape<T>,
    est: (Var, Var),
    target: &ComplexMap<T>,
    cfg: &LossConfig,
) -> Result<Var> {
    let (tr, ti) = target_vars(tape, est, target)?;
    let e = tape.mag_pow(est.0, est.1, cfg.compress, COMPRESS_FLOOR)?;
    let s = tape.mag_pow(tr, ti, cfg.compress, COMPRESS_FLOOR)?;
    let under = tape.sub(s, e)?;
    let under = tape.relu(under)?;
    let sq = tape.square(under)?;
    tape.mean(sq)
}

/// `clamp(|S| / (|D| + eps), 0, 2)`.
pub fn ideal_mask<T: Real>(d: &ComplexMap<T>, s: &ComplexMap<T>) -> Result<Tensor<T>> {
    if d.shape() != s.shape() {
        return Err(shape_err("ideal mask", d.shape(), s.shape()));
    }
    let (dm, sm) = (d.magnitude(), s.magnitude());
    let eps = T::of(MASK_EPS);
    let hi = T::of(MASK_MAX);
    Ok(Tensor {
        shape: dm.shape.clone(),
        data: dm
            .data
            .iter()
            .zip(&sm.data)
            .map(|(&a, &b)| (b / (a + eps)).max(T::zero()).min(hi))
            .collect(),
    })
}

/// Mean squared error between the predicted mask and the ideal one.
pub fn loss_mask<T: Real>(tape: &mut Tape<T>, mask: Var, ideal: &Tensor<T>) -> Result<Var> {
    if tape.shape(mask) != &ideal.shape[..] {
        return Err(shape_err("mask loss", tape.shape(mask), &ideal.shape));
    }
    let t = tape.constant(ideal.clone());
    let diff = tape.sub(mask, t)?;
    let sq = tape.square(diff)?;
    tape.mean(sq)
}

/// Mean binary cross-entropy with the probability clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn loss_vad<T: Real>(tape: &mut Tape<T>, prob: Var, labels: &[u8]) -> Result<Var> {
    if tape.shape(prob) != [labels.len()] {
        return Err(shape_err("vad loss", tape.shape(prob), &[labels.len()]));
    }
    let y = Tensor {
        shape: vec![labels.len()],
        data: labels.iter().map(|&l| T::of(f64::from(u8::from(l != 0)))).collect(),
    };
    let not_y = Tensor {
        shape: y.shape.clone(),
        data: y.data.iter().map(|&v| T::one() - v).collect(),
    };
    let p = tape.clamp(prob, BCE_CLAMP, 1.0 - BCE_CLAMP)?;
    let lp = tape.ln(p)?;
    let q = tape.scale(p, -1.0)?;
    let q = tape.add_scalar(q, 1.0)?;
    let lq = tape.ln(q)?;
    let (y, not_y) = (tape.constant(y), tape.constant(not_y));
    let a = tape.mul(lp, y)?;
    let b = tape.mul(lq, not_y)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s)?;
    tape.neg(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_map(shape: &[usize], seed: u64) -> ComplexMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let mut gen = || Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        ComplexMap { re: gen(), im: gen() }
    }

    fn on_tape(tape: &mut Tape<f64>, m: &ComplexMap<f64>) -> (Var, Var) {
        (tape.input(m.re.clone()), tape.input(m.im.clone()))
    }

    fn value(tape: &Tape<f64>, v: Var) -> f64 {
        tape.value(v).data[0]
    }

    /// Direct per-bin evaluation of the unweighted compressed loss.
    fn compressed_oracle(est: &ComplexMap<f64>, s: &ComplexMap<f64>, c: f64) -> f64 {
        let n = est.re.numel();
        let comp = |re: f64, im: f64| {
            let m = re.hypot(im);
            let k = if m > 0.0 { m.powf(c - 1.0) } else { 0.0 };
            (m.powf(c), re * k, im * k)
        };
        (0..n)
            .map(|i| {
                let a = comp(est.re.data[i], est.im.data[i]);
                let b = comp(s.re.data[i], s.im.data[i]);
                (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2) + (a.2 - b.2).powi(2)
            })
            .sum::<f64>()
            / n as f64
    }

    #[test]
    fn echo_weighted_zero_at_target() {
        let s = rand_map(&[2, 5, 4], 1);
        let mut t = Tape::new();
        let est = on_tape(&mut t, &s);
        let l = loss_echo_weighted(&mut t, est, &s, &[1, 0, 1, 0, 1], &LossConfig::default()).unwrap();
        assert_eq!(value(&t, l), 0.0);
    }

    #[test]
    fn unit_gamma_matches_direct_form() {
        let (s, est) = (rand_map(&[2, 5, 4], 1), rand_map(&[2, 5, 4], 2));
        let cfg = LossConfig {
            gamma: 1.0,
            ..Default::default()
        };
        let mut t = Tape::new();
        let e = on_tape(&mut t, &est);
        let l = loss_echo_weighted(&mut t, e, &s, &[1, 1, 0, 0, 1], &cfg).unwrap();
        let want = compressed_oracle(&est, &s, 0.3);
        assert!((value(&t, l) - want).abs() < 1e-12 * want.max(1.0));
    }

    #[test]
    fn larger_gamma_raises_loss() {
        let (s, est) = (rand_map(&[1, 3, 4], 3), rand_map(&[1, 3, 4], 4));
        let eval = |gamma: f64| {
            let mut t = Tape::new();
            let e = on_tape(&mut t, &est);
            let cfg = LossConfig {
                gamma,
                ..Default::default()
            };
            let l = loss_echo_weighted(&mut t, e, &s, &[0, 1, 0], &cfg).unwrap();
            value(&t, l)
        };
        assert!(eval(20.0) > eval(10.0));
        assert!(eval(10.0) > eval(1.0));
    }

    #[test]
    fn asym_closed_forms() {
        let shape = [1, 2, 3];
        let s = ComplexMap {
            re: Tensor::full(&shape, 1.0),
            im: Tensor::zeros(&shape),
        };
        let mut t = Tape::new();
        let zero = on_tape(&mut t, &ComplexMap::zeros(&shape));
        let l = loss_asym(&mut t, zero, &s, &LossConfig::default()).unwrap();
        assert_eq!(value(&t, l), 1.0);

        let louder = ComplexMap {
            re: Tensor::full(&shape, -1.5),
            im: Tensor::full(&shape, 0.5),
        };
        let mut t = Tape::new();
        let e = on_tape(&mut t, &louder);
        let l = loss_asym(&mut t, e, &s, &LossConfig::default()).unwrap();
        assert_eq!(value(&t, l), 0.0);
    }

    #[test]
    fn mask_targets() {
        let d = rand_map(&[1, 4, 4], 5);
        let ideal = ideal_mask(&d, &d).unwrap();
        assert!(ideal.data.iter().all(|&v| (v - 1.0).abs() < 1e-6));
        let s3 = ComplexMap {
            re: Tensor {
                shape: d.re.shape.clone(),
                data: d.re.data.iter().map(|v| 3.0 * v).collect(),
            },
            im: Tensor {
                shape: d.im.shape.clone(),
                data: d.im.data.iter().map(|v| 3.0 * v).collect(),
            },
        };
        let ideal3 = ideal_mask(&d, &s3).unwrap();
        assert!(ideal3.data.iter().all(|&v| v == 2.0));

        let mut t = Tape::new();
        let m = t.input(ideal.clone());
        let l = loss_mask(&mut t, m, &ideal).unwrap();
        assert_eq!(value(&t, l), 0.0);
    }

    #[test]
    fn vad_closed_forms() {
        let labels = [1u8, 0, 1, 1, 0];
        let mut t = Tape::<f32>::new();
        let p = t.input(Tensor::new(vec![5], labels.iter().map(|&l| l as f32).collect()).unwrap());
        let l = loss_vad(&mut t, p, &labels).unwrap();
        let v = t.value(l).data[0];
        assert!((0.0..=2e-7).contains(&v), "{v}");

        let mut t = Tape::<f64>::new();
        let p = t.input(Tensor::full(&[5], 0.5));
        let l = loss_vad(&mut t, p, &labels).unwrap();
        assert!((value(&t, l) - std::f64::consts::LN_2).abs() < 1e-12);

        let confident = Tensor::new(vec![5], vec![0.9, 0.1, 0.9, 0.9, 0.1]).unwrap();
        let eval = |lab: &[u8]| {
            let mut t = Tape::<f64>::new();
            let p = t.input(confident.clone());
            let l = loss_vad(&mut t, p, lab).unwrap();
            value(&t, l)
        };
        let swapped: Vec<u8> = labels.iter().map(|&l| 1 - l).collect();
        assert!(eval(&swapped) > eval(&labels));
    }

    #[test]
    fn total_uses_configured_weights() {
        let ones = LossParts {
            echo_weighted: 1.0,
            asym: 1.0,
            mask: 1.0,
            vad: 1.0,
        };
        let cfg = LossConfig::default();
        assert!((ones.total(&cfg) - 2.3).abs() < 1e-12);
        assert_eq!(LossParts::default().total(&cfg), 0.0);
        let custom = LossConfig {
            mask_weight: 0.5,
            vad_weight: 2.0,
            ..cfg.clone()
        };
        let p = LossParts {
            echo_weighted: 0.3,
            asym: 0.7,
            mask: 1.1,
            vad: 0.2,
        };
        assert!((p.total(&custom) - (0.3 + 0.7 + 0.55 + 0.4)).abs() < 1e-12);
        let no_asym = LossConfig {
            use_asym: false,
            ..cfg.clone()
        };
        assert!((p.total(&no_asym) - (0.3 + 0.22 + 0.02)).abs() < 1e-12);

        let mut t = Tape::<f64>::new();
        let vars: Vec<Var> = [0.3, 0.7, 1.1, 0.2].iter().map(|&v| t.input(Tensor::scalar(v))).collect();
        let lv = LossVars {
            echo_weighted: vars[0],
            asym: vars[1],
            mask: vars[2],
            vad: vars[3],
        };
        let total = loss_total(&mut t, &lv, &custom).unwrap();
        assert!((value(&t, total) - p.total(&custom)).abs() < 1e-12);
        assert_eq!(lv.values(&t), p);
    }

    #[test]
    fn config_validation_and_round_trip() {
        assert!(LossConfig { gamma: 0.5, ..Default::default() }.validate().is_err());
        assert!(LossConfig { compress: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { compress: 1.5, ..Default::default() }.validate().is_err());
        let c = LossConfig {
            gamma: 4.0,
            use_asym: false,
            ..Default::default()
        };
        assert_eq!(LossConfig::from_kv(&c.to_kv()).unwrap(), c);
    }

    #[test]
    fn losses_match_finite_differences() {
        use crate::tensor::gradcheck::check_inputs;
        let shape = [2, 4, 3];
        let (s, est, d) = (rand_map(&shape, 6), rand_map(&shape, 7), rand_map(&shape, 8));
        let labels = [1u8, 0, 0, 1];
        let cfg = LossConfig::default();
        let ideal = ideal_mask(&d, &s).unwrap();
        let inputs = [est.re.clone(), est.im.clone()];
        let checks: [(&str, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>); 2] = [
            ("echo_weighted", Box::new(|t, v| loss_echo_weighted(t, (v[0], v[1]), &s, &labels, &cfg))),
            ("asym", Box::new(|t, v| loss_asym(t, (v[0], v[1]), &s, &cfg))),
        ];
        for (name, f) in checks {
            let r = check_inputs(&inputs, f).unwrap();
            assert!(r.max_rel_err < 1e-4, "{name}: {r:?}");
        }
        let mask_in = [est.re.clone()];
        let r = check_inputs(&mask_in, |t, v| loss_mask(t, v[0], &ideal)).unwrap();
        assert!(r.max_rel_err < 1e-4, "mask: {r:?}");
        let probs = Tensor::new(vec![4], vec![0.2, 0.7, 0.45, 0.9]).unwrap();
        let r = check_inputs(&[probs], |t, v| loss_vad(t, v[0], &labels)).unwrap();
        assert!(r.max_rel_err < 1e-4, "vad: {r:?}");
    }

    #[test]
    fn asym_gradient_vanishes_where_estimate_is_louder() {
        use crate::tensor::gradcheck::check_inputs;
        let shape = [1, 2, 3];
        let s = rand_map(&shape, 9);
        // Estimate is twice the target in alternate bins, half elsewhere.
        let scale: Vec<f64> = (0..6).map(|i| if i % 2 == 0 { 2.0 } else { 0.5 }).collect();
        let est = ComplexMap {
            re: Tensor::new(shape.to_vec(), s.re.data.iter().zip(&scale).map(|(v, k)| v * k).collect()).unwrap(),
            im: Tensor::new(shape.to_vec(), s.im.data.iter().zip(&scale).map(|(v, k)| v * k).collect()).unwrap(),
        };
        let cfg = LossConfig::default();
        let mut t = Tape::new();
        let e = on_tape(&mut t, &est);
        let l = loss_asym(&mut t, e, &s, &cfg).unwrap();
        let g = t.backward(l).unwrap();
        let gr = g.input(e.0).unwrap();
        for i in (0..6).step_by(2) {
            assert_eq!(gr[i], 0.0);
        }
        assert!(gr.iter().skip(1).step_by(2).any(|&v| v != 0.0));
        let r = check_inputs(&[est.re.clone(), est.im.clone()], |t, v| loss_asym(t, (v[0], v[1]), &s, &cfg)).unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }
}
