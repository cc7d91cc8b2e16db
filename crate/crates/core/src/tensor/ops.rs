use super::conv::matmul_into;
use super::tape::{BackCtx, ParamStore, Tape, Var};
use super::{shape_err, Real, Tensor};
use crate::error::{AecError, Result};

/// Whether batch normalisation uses batch statistics (and updates the
/// running estimates) or the stored running estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `(outer, axis, inner)` sizes around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

impl<T: Real> Tape<T> {
    fn unary(
        &mut self,
        a: Var,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Result<Var> {
        let av = self.value(a);
        let value = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().map(|&v| f(v)).collect(),
        };
        self.push(value, &[a], move |ctx: &BackCtx<'_, T>| {
            let x = &ctx.inputs[0].data;
            let y = &ctx.output.data;
            vec![Some(
                ctx.grad
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(&g, (&x, &y))| g * df(x, y))
                    .collect(),
            )]
        })
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (av, bv) = (self.value(a), self.value(b));
        let value = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().zip(&bv.data).map(|(&x, &y)| x + y).collect(),
        };
        self.push(value, &[a, b], |ctx: &BackCtx<'_, T>| {
            vec![
                ctx.needs[0].then(|| ctx.grad.to_vec()),
                ctx.needs[1].then(|| ctx.grad.to_vec()),
            ]
        })
    }

    /// Sum of several same-shape values.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| AecError::Autodiff("add_n of nothing".into()))?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let (av, bv) = (self.value(a), self.value(b));
        let value = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().zip(&bv.data).map(|(&x, &y)| x - y).collect(),
        };
        self.push(value, &[a, b], |ctx: &BackCtx<'_, T>| {
            vec![
                ctx.needs[0].then(|| ctx.grad.to_vec()),
                ctx.needs[1].then(|| ctx.grad.iter().map(|&g| -g).collect()),
            ]
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (av, bv) = (self.value(a), self.value(b));
        let value = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().zip(&bv.data).map(|(&x, &y)| x * y).collect(),
        };
        self.push(value, &[a, b], |ctx: &BackCtx<'_, T>| {
            let (x, y) = (&ctx.inputs[0].data, &ctx.inputs[1].data);
            vec![
                ctx.needs[0].then(|| ctx.grad.iter().zip(y).map(|(&g, &v)| g * v).collect()),
                ctx.needs[1].then(|| ctx.grad.iter().zip(x).map(|(&g, &v)| g * v).collect()),
            ]
        })
    }

    /// Adds `b` (shape `x.shape[1..]`) to every slice along the leading axis.
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if xs.is_empty() || xs[1..] != bs[..] {
            return Err(shape_err("add_broadcast", &xs, &bs));
        }
        let inner = self.value(b).numel();
        let bv = self.value(b).data.clone();
        let value = Tensor {
            shape: xs,
            data: broadcast_map(&self.value(x).data, &bv, |u, v| u + v),
        };
        self.push(value, &[x, b], move |ctx: &BackCtx<'_, T>| {
            let db = ctx.needs[1].then(|| {
                let mut acc = vec![T::zero(); inner];
                for row in ctx.grad.chunks(inner.max(1)) {
                    acc.iter_mut().zip(row).for_each(|(a, &g)| *a += g);
                }
                acc
            });
            vec![ctx.needs[0].then(|| ctx.grad.to_vec()), db]
        })
    }

    /// Multiplies every slice along the leading axis elementwise by `b`
    /// (shape `x.shape[1..]`).
    pub fn mul_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if xs.is_empty() || xs[1..] != bs[..] {
            return Err(shape_err("mul_broadcast", &xs, &bs));
        }
        let inner = self.value(b).numel().max(1);
        let bv = self.value(b).data.clone();
        let value = Tensor {
            shape: xs,
            data: broadcast_map(&self.value(x).data, &bv, |u, v| u * v),
        };
        self.push(value, &[x, b], move |ctx: &BackCtx<'_, T>| {
            let (xv, bv) = (&ctx.inputs[0].data, &ctx.inputs[1].data);
            let dx = ctx.needs[0].then(|| broadcast_map(ctx.grad, bv, |g, v| g * v));
            let db = ctx.needs[1].then(|| {
                let mut acc = vec![T::zero(); inner];
                for (gr, xr) in ctx.grad.chunks(inner).zip(xv.chunks(inner)) {
                    for ((a, &g), &u) in acc.iter_mut().zip(gr).zip(xr) {
                        *a += g * u;
                    }
                }
                acc
            });
            vec![dx, db]
        })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        self.unary(a, move |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        self.unary(a, move |v| v + c, |_, _| T::one())
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |v| v * v, |x, _| x + x)
    }

    /// `x^p`; inputs must be positive.
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        if let Some(bad) = self.value(a).data.iter().find(|v| **v <= T::zero()) {
            return Err(AecError::Autodiff(format!(
                "powf needs positive inputs, got {bad:?}"
            )));
        }
        let pt = T::of(p);
        self.unary(a, move |v| v.powf(pt), move |x, y| pt * y / x)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |v| v.sqrt(), |_, y| T::of(0.5) / y)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |v| v.ln(), |x, _| T::one() / x)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |v| v.exp(), |_, y| y)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(
            a,
            |v| T::one() / (T::one() + (-v).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |v| v.tanh(), |_, y| T::one() - y * y)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(
            a,
            |v| v.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let s = T::of(slope);
        self.unary(
            a,
            move |v| if v > T::zero() { v } else { v * s },
            move |x, _| if x > T::zero() { T::one() } else { s },
        )
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let (lo, hi) = (T::of(lo), T::of(hi));
        self.unary(
            a,
            move |v| v.max(lo).min(hi),
            move |x, _| if x >= lo && x <= hi { T::one() } else { T::zero() },
        )
    }

    /// Per-channel PReLU: `x: [C, ...]`, `alpha: [C]`.
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = xs.first().copied().unwrap_or(0);
        if self.shape(alpha) != [c] {
            return Err(shape_err("prelu", &xs, self.shape(alpha)));
        }
        let inner = self.value(x).numel() / c.max(1);
        let inner = inner.max(1);
        let av = self.value(alpha).data.clone();
        let mut data = self.value(x).data.clone();
        for (row, &a) in data.chunks_mut(inner).zip(&av) {
            for v in row.iter_mut() {
                if *v <= T::zero() {
                    *v = a * *v;
                }
            }
        }
        self.push(Tensor { shape: xs, data }, &[x, alpha], move |ctx: &BackCtx<'_, T>| {
            let (xv, av) = (&ctx.inputs[0].data, &ctx.inputs[1].data);
            let dx = ctx.needs[0].then(|| {
                let mut dx = ctx.grad.to_vec();
                for ((g, xr), &a) in dx.chunks_mut(inner).zip(xv.chunks(inner)).zip(av) {
                    for (g, &v) in g.iter_mut().zip(xr) {
                        if v <= T::zero() {
                            *g = a * *g;
                        }
                    }
                }
                dx
            });
            let da = ctx.needs[1].then(|| {
                ctx.grad
                    .chunks(inner)
                    .zip(xv.chunks(inner))
                    .map(|(g, xr)| {
                        let mut acc = T::zero();
                        for (&g, &v) in g.iter().zip(xr) {
                            if v <= T::zero() {
                                acc = acc + g * v;
                            }
                        }
                        acc
                    })
                    .collect()
            });
            vec![dx, da]
        })
    }

    /// `sqrt(re^2 + im^2 + eps)`.
    pub fn magnitude(&mut self, re: Var, im: Var, eps: f64) -> Result<Var> {
        self.same_shape(re, im, "magnitude")?;
        let e = T::of(eps);
        let (rv, iv) = (self.value(re), self.value(im));
        let value = Tensor {
            shape: rv.shape.clone(),
            data: rv
                .data
                .iter()
                .zip(&iv.data)
                .map(|(&a, &b)| (a * a + b * b + e).sqrt())
                .collect(),
        };
        self.push(value, &[re, im], |ctx: &BackCtx<'_, T>| {
            let m = &ctx.output.data;
            let part = |k: usize| {
                ctx.needs[k].then(|| {
                    ctx.grad
                        .iter()
                        .zip(&ctx.inputs[k].data)
                        .zip(m)
                        .map(|((&g, &v), &m)| g * v / m)
                        .collect()
                })
            };
            vec![part(0), part(1)]
        })
    }

    /// `|z|^p` for `z = re + j im`. Below `floor` the gradient is zero; the
    /// value is exact for `p >= 0` (so `0^p = 0`) and uses `floor^p` for
    /// negative `p`.
    pub fn mag_pow(&mut self, re: Var, im: Var, p: f64, floor: f64) -> Result<Var> {
        self.same_shape(re, im, "mag_pow")?;
        let (pt, fl) = (T::of(p), T::of(floor));
        let (rv, iv) = (self.value(re), self.value(im));
        let value = Tensor {
            shape: rv.shape.clone(),
            data: rv
                .data
                .iter()
                .zip(&iv.data)
                .map(|(&a, &b)| {
                    let m = (a * a + b * b).sqrt();
                    if p >= 0.0 {
                        m.powf(pt)
                    } else {
                        m.max(fl).powf(pt)
                    }
                })
                .collect(),
        };
        self.push(value, &[re, im], move |ctx: &BackCtx<'_, T>| {
            let (rv, iv) = (&ctx.inputs[0].data, &ctx.inputs[1].data);
            // d|z|^p / d re = p |z|^(p - 2) re
            let scale: Vec<T> = rv
                .iter()
                .zip(iv)
                .zip(&ctx.output.data)
                .map(|((&a, &b), &y)| {
                    let m2 = a * a + b * b;
                    if m2.sqrt() > fl {
                        pt * y / m2
                    } else {
                        T::zero()
                    }
                })
                .collect();
            let part = |k: usize| {
                ctx.needs[k].then(|| {
                    ctx.grad
                        .iter()
                        .zip(&ctx.inputs[k].data)
                        .zip(&scale)
                        .map(|((&g, &v), &s)| g * s * v)
                        .collect()
                })
            };
            vec![part(0), part(1)]
        })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).data.iter().copied().sum();
        let n = self.value(a).numel();
        self.push(Tensor::scalar(s), &[a], move |ctx: &BackCtx<'_, T>| {
            vec![Some(vec![ctx.grad[0]; n])]
        })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(AecError::Autodiff("mean of empty tensor".into()));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// `a: [M, K] x b: [K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[0] {
            return Err(shape_err("matmul", &as_, &bs));
        }
        let (m, k, n) = (as_[0], as_[1], bs[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(m, k, n, &self.value(a).data, false, &self.value(b).data, false, &mut out, false);
        self.push(Tensor { shape: vec![m, n], data: out }, &[a, b], move |ctx: &BackCtx<'_, T>| {
            let (av, bv) = (&ctx.inputs[0].data, &ctx.inputs[1].data);
            let da = ctx.needs[0].then(|| {
                let mut d = vec![T::zero(); m * k];
                matmul_into(m, n, k, ctx.grad, false, bv, true, &mut d, false);
                d
            });
            let db = ctx.needs[1].then(|| {
                let mut d = vec![T::zero(); k * n];
                matmul_into(k, m, n, av, true, ctx.grad, false, &mut d, false);
                d
            });
            vec![da, db]
        })
    }

    /// Same data, new shape.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if shape.iter().product::<usize>() != av.numel() {
            return Err(shape_err("reshape", &av.shape, shape));
        }
        let value = Tensor {
            shape: shape.to_vec(),
            data: av.data.clone(),
        };
        self.push(value, &[a], |ctx: &BackCtx<'_, T>| vec![Some(ctx.grad.to_vec())])
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let xs = self.shape(a).to_vec();
        let mut seen = vec![false; xs.len()];
        if axes.len() != xs.len() || axes.iter().any(|&i| i >= xs.len() || std::mem::replace(&mut seen[i], true)) {
            return Err(shape_err("permute", &xs, axes));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&i| xs[i]).collect();
        let in_strides = strides(&xs);
        // Source offset for each output element, in output order.
        let src_strides: Vec<usize> = axes.iter().map(|&i| in_strides[i]).collect();
        let n = self.value(a).numel();
        let mut index = Vec::with_capacity(n);
        let mut pos = vec![0usize; out_shape.len()];
        for _ in 0..n {
            index.push(pos.iter().zip(&src_strides).map(|(p, s)| p * s).sum::<usize>());
            for d in (0..pos.len()).rev() {
                pos[d] += 1;
                if pos[d] < out_shape[d] {
                    break;
                }
                pos[d] = 0;
            }
        }
        let src = &self.value(a).data;
        let data = index.iter().map(|&i| src[i]).collect();
        self.push(Tensor { shape: out_shape, data }, &[a], move |ctx: &BackCtx<'_, T>| {
            let mut d = vec![T::zero(); n];
            for (&i, &g) in index.iter().zip(ctx.grad) {
                d[i] = g;
            }
            vec![Some(d)]
        })
    }

    /// Joins values along `axis`; all other axes must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| AecError::Autodiff("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", &first, &[axis]));
        }
        let mut sizes = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(shape_err("concat", &first, s));
            }
            sizes.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let total: usize = sizes.iter().sum();
        let mut shape = first.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &s) in xs.iter().zip(&sizes) {
                data.extend_from_slice(&self.value(x).data[o * s * inner..(o + 1) * s * inner]);
            }
        }
        self.push(Tensor { shape, data }, xs, move |ctx: &BackCtx<'_, T>| {
            let mut offs = 0;
            sizes
                .iter()
                .enumerate()
                .map(|(k, &s)| {
                    let start = offs;
                    offs += s;
                    ctx.needs[k].then(|| {
                        let mut d = Vec::with_capacity(outer * s * inner);
                        for o in 0..outer {
                            let base = (o * total + start) * inner;
                            d.extend_from_slice(&ctx.grad[base..base + s * inner]);
                        }
                        d
                    })
                })
                .collect()
        })
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(a).to_vec();
        if axis >= xs.len() || start + len > xs[axis] {
            return Err(shape_err("narrow", &xs, &[axis, start, len]));
        }
        let (outer, size, inner) = split_axis(&xs, axis);
        let mut shape = xs.clone();
        shape[axis] = len;
        let src = &self.value(a).data;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * size + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let n = src.len();
        self.push(Tensor { shape, data }, &[a], move |ctx: &BackCtx<'_, T>| {
            let mut d = vec![T::zero(); n];
            for o in 0..outer {
                let base = (o * size + start) * inner;
                d[base..base + len * inner]
                    .copy_from_slice(&ctx.grad[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(d)]
        })
    }

    /// Repeats every element `times` times along `axis` (nearest-neighbour
    /// upsampling).
    pub fn repeat_axis(&mut self, a: Var, axis: usize, times: usize) -> Result<Var> {
        let xs = self.shape(a).to_vec();
        if axis >= xs.len() || times == 0 {
            return Err(shape_err("repeat_axis", &xs, &[axis, times]));
        }
        let (outer, size, inner) = split_axis(&xs, axis);
        let mut shape = xs.clone();
        shape[axis] = size * times;
        let src = &self.value(a).data;
        let mut data = Vec::with_capacity(src.len() * times);
        for o in 0..outer {
            for s in 0..size {
                let row = &src[(o * size + s) * inner..(o * size + s + 1) * inner];
                for _ in 0..times {
                    data.extend_from_slice(row);
                }
            }
        }
        let n = src.len();
        self.push(Tensor { shape, data }, &[a], move |ctx: &BackCtx<'_, T>| {
            let mut d = vec![T::zero(); n];
            for o in 0..outer {
                for s in 0..size {
                    let dst = &mut d[(o * size + s) * inner..(o * size + s + 1) * inner];
                    for r in 0..times {
                        let base = ((o * size + s) * times + r) * inner;
                        dst.iter_mut()
                            .zip(&ctx.grad[base..base + inner])
                            .for_each(|(a, &g)| *a += g);
                    }
                }
            }
            vec![Some(d)]
        })
    }

    /// Batch normalisation over every axis but the first: `x: [C, ...]`,
    /// `gamma`, `beta: [C]`. Running statistics live in `store` buffers
    /// `{name}.running_mean` / `{name}.running_var` and are updated with
    /// `momentum` in training mode.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        store: &mut ParamStore<T>,
        name: &str,
        mode: BatchNormMode,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = xs.first().copied().unwrap_or(0);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("batch_norm", &xs, self.shape(gamma)));
        }
        let inner = self.value(x).numel() / c.max(1);
        if inner == 0 {
            return Err(shape_err("batch_norm", &xs, &[c]));
        }
        let (mk, vk) = (format!("{name}.running_mean"), format!("{name}.running_var"));
        let running_mean = store
            .buffer(&mk)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&[c]));
        let running_var = store
            .buffer(&vk)
            .cloned()
            .unwrap_or_else(|| Tensor::full(&[c], T::one()));
        let xv = &self.value(x).data;
        let (mean, var): (Vec<T>, Vec<T>) = match mode {
            BatchNormMode::Train => {
                let n = T::of(inner as f64);
                let stats: Vec<(T, T)> = xv
                    .chunks(inner)
                    .map(|row| {
                        let m = row.iter().copied().sum::<T>() / n;
                        let v = row.iter().map(|&u| (u - m) * (u - m)).sum::<T>() / n;
                        (m, v)
                    })
                    .collect();
                let mo = T::of(momentum);
                let unbias = if inner > 1 {
                    T::of(inner as f64 / (inner - 1) as f64)
                } else {
                    T::one()
                };
                let new_mean = running_mean
                    .data
                    .iter()
                    .zip(&stats)
                    .map(|(&r, &(m, _))| (T::one() - mo) * r + mo * m)
                    .collect();
                let new_var = running_var
                    .data
                    .iter()
                    .zip(&stats)
                    .map(|(&r, &(_, v))| (T::one() - mo) * r + mo * v * unbias)
                    .collect();
                store.set_buffer(mk, Tensor { shape: vec![c], data: new_mean });
                store.set_buffer(vk, Tensor { shape: vec![c], data: new_var });
                stats.into_iter().unzip()
            }
            BatchNormMode::Eval => (running_mean.data, running_var.data),
        };
        let e = T::of(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + e).sqrt()).collect();
        let (gv, bv) = (&self.value(gamma).data, &self.value(beta).data);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut data = Vec::with_capacity(xv.len());
        for (ch, row) in xv.chunks(inner).enumerate() {
            for &u in row {
                let h = (u - mean[ch]) * inv_std[ch];
                xhat.push(h);
                data.push(gv[ch] * h + bv[ch]);
            }
        }
        let train = mode == BatchNormMode::Train;
        self.push(Tensor { shape: xs, data }, &[x, gamma, beta], move |ctx: &BackCtx<'_, T>| {
            let gv = &ctx.inputs[1].data;
            let g = ctx.grad;
            let n = T::of(inner as f64);
            let mut dx = ctx.needs[0].then(|| vec![T::zero(); g.len()]);
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for ch in 0..c {
                let gr = &g[ch * inner..(ch + 1) * inner];
                let hr = &xhat[ch * inner..(ch + 1) * inner];
                let sg: T = gr.iter().copied().sum();
                let sgh: T = gr.iter().zip(hr).map(|(&a, &b)| a * b).sum();
                dgamma[ch] = sgh;
                dbeta[ch] = sg;
                if let Some(dx) = dx.as_mut() {
                    let k = gv[ch] * inv_std[ch];
                    let dst = &mut dx[ch * inner..(ch + 1) * inner];
                    for ((d, &gi), &hi) in dst.iter_mut().zip(gr).zip(hr) {
                        *d = if train {
                            k * (gi - sg / n - hi * sgh / n)
                        } else {
                            k * gi
                        };
                    }
                }
            }
            vec![dx, ctx.needs[1].then_some(dgamma), ctx.needs[2].then_some(dbeta)]
        })
    }
}

/// Applies `f(a[i], b[i % b.len()])`.
fn broadcast_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    let mut out = Vec::with_capacity(a.len());
    for row in a.chunks(b.len().max(1)) {
        out.extend(row.iter().zip(b).map(|(&u, &v)| f(u, v)));
    }
    out
}
