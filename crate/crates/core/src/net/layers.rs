//! Building blocks shared by the post-filter modules.
//!
//! Parameters are declared where they are used: with an init RNG attached,
//! a missing parameter is created on first use; without one it is an error.
//! Running a forward pass once in init mode therefore defines the whole
//! parameter layout.

use rand_chacha::ChaCha8Rng;

use crate::error::{AecError, Result};
use crate::tensor::{
    BatchNormMode, Conv2dSpec, ConvTranspose2dSpec, ParamStore, Real, Tape, Tensor, Var,
};

pub(crate) const LEAKY_SLOPE: f64 = 0.01;
pub(crate) const BN_MOMENTUM: f64 = 0.1;
pub(crate) const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform with variance `gain^2 / fan_in`.
    Uniform { fan_in: usize, gain: f64 },
    Const(f64),
}

pub struct Graph<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a mut ParamStore<T>,
    pub mode: BatchNormMode,
    pub init: Option<&'a mut ChaCha8Rng>,
}

impl<T: Real> Graph<'_, T> {
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let id = match self.store.id(name) {
            Some(id) => {
                let have = &self.store.get(id).value.shape;
                if have[..] != shape[..] {
                    return Err(AecError::ShapeMismatch {
                        op: "parameter",
                        lhs: have.clone(),
                        rhs: shape.to_vec(),
                    });
                }
                id
            }
            None => {
                let Some(rng) = self.init.as_deref_mut() else {
                    return Err(AecError::Autodiff(format!("missing parameter {name}")));
                };
                match init {
                    Init::Uniform { fan_in, gain } => {
                        self.store.add_uniform(name, shape, fan_in, gain, rng)
                    }
                    Init::Const(v) => self.store.add_const(name, shape, v),
                }
            }
        };
        Ok(self.tape.param(self.store, id))
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.tape.shape(v).to_vec()
    }

    fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<Var> {
        self.param(&format!("{name}.weight"), shape, Init::Uniform { fan_in, gain: 1.0 })
    }

    fn bias(&mut self, name: &str, n: usize) -> Result<Var> {
        self.param(&format!("{name}.bias"), &[n], Init::Const(0.0))
    }

    /// 2-D convolution `[cin, T, F] -> [cout, T', F']`.
    pub fn conv(
        &mut self,
        name: &str,
        x: Var,
        cout: usize,
        kernel: (usize, usize),
        spec: Conv2dSpec,
        bias: bool,
    ) -> Result<Var> {
        let cin = self.shape(x)[0];
        if cin % spec.groups != 0 {
            return Err(AecError::config(format!("{name}: {cin} channels not divisible into {} groups", spec.groups)));
        }
        let cin_g = cin / spec.groups;
        let w = self.weight(name, &[cout, cin_g, kernel.0, kernel.1], cin_g * kernel.0 * kernel.1)?;
        let b = if bias { Some(self.bias(name, cout)?) } else { None };
        self.tape.conv2d(x, w, b, spec)
    }

    /// Pointwise convolution.
    pub fn conv1x1(&mut self, name: &str, x: Var, cout: usize) -> Result<Var> {
        self.conv(name, x, cout, (1, 1), Conv2dSpec::default(), true)
    }

    pub fn tconv(
        &mut self,
        name: &str,
        x: Var,
        cout: usize,
        kernel: (usize, usize),
        spec: ConvTranspose2dSpec,
    ) -> Result<Var> {
        let cin = self.shape(x)[0];
        let w = self.weight(name, &[cin, cout, kernel.0, kernel.1], cin * kernel.0 * kernel.1)?;
        let b = self.bias(name, cout)?;
        self.tape.conv_transpose2d(x, w, Some(b), spec)
    }

    pub fn batch_norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let c = self.shape(x)[0];
        let g = self.param(&format!("{name}.gamma"), &[c], Init::Const(1.0))?;
        let b = self.param(&format!("{name}.beta"), &[c], Init::Const(0.0))?;
        let mode = self.mode;
        self.tape
            .batch_norm(x, g, b, self.store, name, mode, BN_MOMENTUM, BN_EPS)
    }

    pub fn prelu(&mut self, name: &str, x: Var) -> Result<Var> {
        let c = self.shape(x)[0];
        let a = self.param(&format!("{name}.alpha"), &[c], Init::Const(0.25))?;
        self.tape.prelu(x, a)
    }

    /// `[N, in] -> [N, out]`.
    pub fn linear(&mut self, name: &str, x: Var, out: usize) -> Result<Var> {
        let inp = self.shape(x)[1];
        let w = self.weight(name, &[inp, out], inp)?;
        let b = self.bias(name, out)?;
        let y = self.tape.matmul(x, w)?;
        self.tape.add_broadcast(y, b)
    }

    /// Single-direction GRU over a time-major sequence `[S, B, I]`,
    /// returning every hidden state as `[S, B, H]`. With `reverse` the
    /// sequence is scanned from the end; outputs stay in input order.
    pub fn gru(&mut self, name: &str, x: Var, hidden: usize, reverse: bool) -> Result<Var> {
        let xs = self.shape(x);
        let (s, b, i) = (xs[0], xs[1], xs[2]);
        let h3 = 3 * hidden;
        let gain = 1.0 / 3f64.sqrt();
        let w_ih = self.param(&format!("{name}.w_ih"), &[i, h3], Init::Uniform { fan_in: hidden, gain })?;
        let w_hh = self.param(&format!("{name}.w_hh"), &[hidden, h3], Init::Uniform { fan_in: hidden, gain })?;
        let b_ih = self.param(&format!("{name}.b_ih"), &[h3], Init::Uniform { fan_in: hidden, gain })?;
        let b_hh = self.param(&format!("{name}.b_hh"), &[h3], Init::Uniform { fan_in: hidden, gain })?;
        let t = &mut *self.tape;

        let flat = t.reshape(x, &[s * b, i])?;
        let xw = t.matmul(flat, w_ih)?;
        let xw = t.add_broadcast(xw, b_ih)?;
        let xw = t.reshape(xw, &[s, b, h3])?;
        let mut h = t.constant(Tensor::zeros(&[b, hidden]));
        let mut outs = vec![h; s];
        let order: Vec<usize> = if reverse { (0..s).rev().collect() } else { (0..s).collect() };
        for step in order {
            let xt = t.narrow(xw, 0, step, 1)?;
            let xt = t.reshape(xt, &[b, h3])?;
            let hw = t.matmul(h, w_hh)?;
            let hw = t.add_broadcast(hw, b_hh)?;
            let (xr, xz, xn) = (
                t.narrow(xt, 1, 0, hidden)?,
                t.narrow(xt, 1, hidden, hidden)?,
                t.narrow(xt, 1, 2 * hidden, hidden)?,
            );
            let (hr, hz, hn) = (
                t.narrow(hw, 1, 0, hidden)?,
                t.narrow(hw, 1, hidden, hidden)?,
                t.narrow(hw, 1, 2 * hidden, hidden)?,
            );
            let r = t.add(xr, hr)?;
            let r = t.sigmoid(r)?;
            let z = t.add(xz, hz)?;
            let z = t.sigmoid(z)?;
            let rh = t.mul(r, hn)?;
            let n = t.add(xn, rh)?;
            let n = t.tanh(n)?;
            // h' = (1 - z) n + z h
            let zn = t.mul(z, n)?;
            let zh = t.mul(z, h)?;
            let keep = t.sub(n, zn)?;
            h = t.add(keep, zh)?;
            outs[step] = t.reshape(h, &[1, b, hidden])?;
        }
        t.concat(&outs, 0)
    }

    /// Temporal-frequency convolution module on `[C, T, F]`: `layers`
    /// residual units, unit `i` using a depthwise 3x3 convolution with time
    /// dilation `2^i`.
    pub fn tfcm(&mut self, name: &str, x: Var, layers: usize) -> Result<Var> {
        let c = self.shape(x)[0];
        let mut y = x;
        for i in 0..layers {
            let p = format!("{name}.{i}");
            let d = 1usize << i;
            let h = self.conv1x1(&format!("{p}.in"), y, c)?;
            let h = self.prelu(&format!("{p}.act1"), h)?;
            let spec = Conv2dSpec {
                dilation: (d, 1),
                padding: [2 * d, 0, 1, 1],
                groups: c,
                ..Default::default()
            };
            let h = self.conv(&format!("{p}.dw"), h, c, (3, 3), spec, true)?;
            let h = self.prelu(&format!("{p}.act2"), h)?;
            let h = self.conv1x1(&format!("{p}.out"), h, c)?;
            y = self.tape.add(y, h)?;
        }
        Ok(y)
    }

    /// Squeezed temporal convolution module on `[C, T, W]`: each unit
    /// squeezes to `hidden` channels, applies a gated causal depthwise
    /// temporal convolution (dilation `2^i`), and expands back residually.
    pub fn stcm(&mut self, name: &str, x: Var, layers: usize, hidden: usize) -> Result<Var> {
        let c = self.shape(x)[0];
        let mut y = x;
        for i in 0..layers {
            let p = format!("{name}.{i}");
            let d = 1usize << i;
            let spec = Conv2dSpec {
                dilation: (d, 1),
                padding: [2 * d, 0, 0, 0],
                groups: hidden,
                ..Default::default()
            };
            let h = self.conv1x1(&format!("{p}.squeeze"), y, hidden)?;
            let h = self.prelu(&format!("{p}.act1"), h)?;
            let a = self.conv(&format!("{p}.temporal"), h, hidden, (3, 1), spec, true)?;
            let g = self.conv(&format!("{p}.gate"), h, hidden, (3, 1), spec, true)?;
            let g = self.tape.sigmoid(g)?;
            let h = self.tape.mul(a, g)?;
            let h = self.prelu(&format!("{p}.act2"), h)?;
            let h = self.conv1x1(&format!("{p}.expand"), h, c)?;
            y = self.tape.add(y, h)?;
        }
        Ok(y)
    }

    /// Complex convolution of `(re, im)` with separate real and imaginary
    /// kernels, no bias.
    pub fn complex_conv(
        &mut self,
        name: &str,
        re: Var,
        im: Var,
        cout: usize,
        kernel: (usize, usize),
        spec: Conv2dSpec,
    ) -> Result<(Var, Var)> {
        self.complex_conv_sum(&[name], &[(re, im)], cout, kernel, spec)
    }

    /// Sum of complex convolutions, one kernel pair per input. Evaluated as
    /// a single real convolution of `[re; im]` with the block kernel
    /// `[[Wr, -Wi], [Wi, Wr]]`.
    pub fn complex_conv_sum(
        &mut self,
        names: &[&str],
        inputs: &[(Var, Var)],
        cout: usize,
        kernel: (usize, usize),
        spec: Conv2dSpec,
    ) -> Result<(Var, Var)> {
        if names.len() != inputs.len() || inputs.is_empty() {
            return Err(AecError::config("complex_conv_sum needs one name per input"));
        }
        let total_in: usize = inputs.iter().map(|(r, _)| self.shape(*r)[0]).sum();
        let fan = total_in * kernel.0 * kernel.1 * 2;
        let mut wrs = Vec::new();
        let mut wis = Vec::new();
        for (name, (r, _)) in names.iter().zip(inputs) {
            let shape = [cout, self.shape(*r)[0], kernel.0, kernel.1];
            wrs.push(self.param(&format!("{name}.w_re"), &shape, Init::Uniform { fan_in: fan, gain: 1.0 })?);
            wis.push(self.param(&format!("{name}.w_im"), &shape, Init::Uniform { fan_in: fan, gain: 1.0 })?);
        }
        let t = &mut *self.tape;
        let res: Vec<Var> = inputs.iter().map(|p| p.0).collect();
        let ims: Vec<Var> = inputs.iter().map(|p| p.1).collect();
        let mut stacked = res;
        stacked.extend(ims);
        let x = t.concat(&stacked, 0)?;
        let wr = t.concat(&wrs, 1)?;
        let wi = t.concat(&wis, 1)?;
        let neg_wi = t.neg(wi)?;
        let top = t.concat(&[wr, neg_wi], 1)?;
        let bottom = t.concat(&[wi, wr], 1)?;
        let w = t.concat(&[top, bottom], 0)?;
        let y = t.conv2d(x, w, None, spec)?;
        Ok((t.narrow(y, 0, 0, cout)?, t.narrow(y, 0, cout, cout)?))
    }
}

/// Causal `(2, 3)` convolution geometry keeping the frequency size.
pub(crate) fn causal_2x3() -> Conv2dSpec {
    Conv2dSpec {
        padding: [1, 0, 1, 1],
        ..Default::default()
    }
}
