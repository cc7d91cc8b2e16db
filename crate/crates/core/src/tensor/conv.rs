//! 2-D convolution and transposed convolution via im2col and GEMM.

use super::tape::{BackCtx, Tape, Var};
use super::{shape_err, Real, Tensor};
use crate::error::{AecError, Result};

/// Convolution geometry. Padding is `[top, bottom, left, right]`, so causal
/// time padding is `[k - 1, 0, ..]` on the first spatial axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub padding: [usize; 4],
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            dilation: (1, 1),
            padding: [0; 4],
            groups: 1,
        }
    }
}

/// Transposed convolution geometry. `crop` removes `[top, bottom, left,
/// right]` samples from the full output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvTranspose2dSpec {
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub crop: [usize; 4],
    pub groups: usize,
}

impl Default for ConvTranspose2dSpec {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            dilation: (1, 1),
            crop: [0; 4],
            groups: 1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    dh: usize,
    dw: usize,
    pt: usize,
    pl: usize,
    ho: usize,
    wo: usize,
}

/// `col[(c, ki, kj), (oy, ox)] = img[c, oy*sh - pt + ki*dh, ox*sw - pl + kj*dw]`.
fn im2col<T: Real>(img: &[T], g: &Geom, col: &mut [T]) {
    let l = g.ho * g.wo;
    let mut row = 0;
    for c in 0..g.c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut col[row * l..(row + 1) * l];
                for oy in 0..g.ho {
                    let iy = (oy * g.sh + ki * g.dh) as isize - g.pt as isize;
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let off = (kj * g.dw) as isize - g.pl as isize;
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.sw) as isize + off;
                        *o = if ix >= 0 && ix < g.w as isize {
                            src[ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds `col` into `img`.
fn col2im<T: Real>(col: &[T], g: &Geom, img: &mut [T]) {
    let l = g.ho * g.wo;
    let mut row = 0;
    for c in 0..g.c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &col[row * l..(row + 1) * l];
                for oy in 0..g.ho {
                    let iy = (oy * g.sh + ki * g.dh) as isize - g.pt as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let off = (kj * g.dw) as isize - g.pl as isize;
                    for (ox, &v) in src[oy * g.wo..(oy + 1) * g.wo].iter().enumerate() {
                        let ix = (ox * g.sw) as isize + off;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Row-major `c[m,n] (+)= a[m,k] * b[k,n]` with optional transposes of the
/// stored operands (`a` stored as `[k,m]` when `ta`, `b` as `[n,k]` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_into<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    accumulate: bool,
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    T::gemm(m, k, n, T::one(), a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

fn out_len(size: usize, pad: usize, k: usize, d: usize, s: usize) -> Option<usize> {
    let span = d * (k - 1) + 1;
    (size + pad >= span).then(|| (size + pad - span) / s + 1)
}

fn check_bias<T: Real>(tape: &Tape<T>, b: Option<Var>, c: usize, op: &'static str) -> Result<()> {
    if let Some(b) = b {
        if tape.shape(b) != [c] {
            return Err(shape_err(op, tape.shape(b), &[c]));
        }
    }
    Ok(())
}


/// Valid output range `[lo, hi)` along one axis for kernel offset `off`:
/// those `o` with `0 <= o * s + off < size`.
fn valid_range(out: usize, s: usize, off: isize, size: usize) -> (usize, usize) {
    let lo = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(s) };
    let hi = if (size as isize) <= off {
        0
    } else {
        ((size as isize - off) as usize).div_ceil(s).min(out)
    };
    (lo.min(hi), hi)
}

/// Visits every (output row, input row, column range) pair touched by one
/// kernel tap of a single-channel convolution.
fn for_each_tap_row(g: &Geom, ki: usize, kj: usize, mut f: impl FnMut(usize, usize, usize, usize, isize)) {
    let offy = (ki * g.dh) as isize - g.pt as isize;
    let offx = (kj * g.dw) as isize - g.pl as isize;
    let (ylo, yhi) = valid_range(g.ho, g.sh, offy, g.h);
    let (xlo, xhi) = valid_range(g.wo, g.sw, offx, g.w);
    if xlo >= xhi {
        return;
    }
    for oy in ylo..yhi {
        let iy = (oy * g.sh) as isize + offy;
        f(oy, iy as usize, xlo, xhi, offx);
    }
}

fn depthwise_forward<T: Real>(x: &[T], w: &[T], g: &Geom, out: &mut [T]) {
    let (hw, l, kk) = (g.h * g.w, g.ho * g.wo, g.kh * g.kw);
    for c in 0..g.c {
        let xp = &x[c * hw..(c + 1) * hw];
        let op = &mut out[c * l..(c + 1) * l];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let wv = w[c * kk + ki * g.kw + kj];
                for_each_tap_row(g, ki, kj, |oy, iy, xlo, xhi, offx| {
                    let orow = &mut op[oy * g.wo..(oy + 1) * g.wo];
                    let irow = &xp[iy * g.w..(iy + 1) * g.w];
                    if g.sw == 1 {
                        let start = (xlo as isize + offx) as usize;
                        for (o, &i) in orow[xlo..xhi].iter_mut().zip(&irow[start..]) {
                            *o += wv * i;
                        }
                    } else {
                        for ox in xlo..xhi {
                            orow[ox] += wv * irow[((ox * g.sw) as isize + offx) as usize];
                        }
                    }
                });
            }
        }
    }
}

fn depthwise_backward<T: Real>(
    x: &[T],
    w: &[T],
    gy: &[T],
    g: &Geom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let (hw, l, kk) = (g.h * g.w, g.ho * g.wo, g.kh * g.kw);
    for c in 0..g.c {
        let xp = &x[c * hw..(c + 1) * hw];
        let gp = &gy[c * l..(c + 1) * l];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let wi = c * kk + ki * g.kw + kj;
                let wv = w[wi];
                let mut acc = T::zero();
                let dxp = dx.as_deref_mut().map(|d| &mut d[c * hw..(c + 1) * hw]);
                let mut dxp = dxp;
                for_each_tap_row(g, ki, kj, |oy, iy, xlo, xhi, offx| {
                    let grow = &gp[oy * g.wo..(oy + 1) * g.wo];
                    let irow = &xp[iy * g.w..(iy + 1) * g.w];
                    if g.sw == 1 {
                        let start = (xlo as isize + offx) as usize;
                        let n = xhi - xlo;
                        acc += grow[xlo..xhi]
                            .iter()
                            .zip(&irow[start..start + n])
                            .map(|(&a, &b)| a * b)
                            .sum::<T>();
                        if let Some(d) = dxp.as_deref_mut() {
                            let drow = &mut d[iy * g.w + start..iy * g.w + start + n];
                            for (d, &gv) in drow.iter_mut().zip(&grow[xlo..xhi]) {
                                *d += wv * gv;
                            }
                        }
                    } else {
                        for ox in xlo..xhi {
                            let ix = ((ox * g.sw) as isize + offx) as usize;
                            acc += grow[ox] * irow[ix];
                            if let Some(d) = dxp.as_deref_mut() {
                                d[iy * g.w + ix] += wv * grow[ox];
                            }
                        }
                    }
                });
                if let Some(dw) = dw.as_deref_mut() {
                    dw[wi] = acc;
                }
            }
        }
    }
}

impl<T: Real> Tape<T> {
    /// `x: [Cin, H, W]`, `w: [Cout, Cin / groups, kh, kw]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 4 || spec.groups == 0 {
            return Err(shape_err("conv2d", &xs, &ws));
        }
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, cin_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let gr = spec.groups;
        if cin_g * gr != cin || cout % gr != 0 || kh == 0 || kw == 0 {
            return Err(shape_err("conv2d", &xs, &ws));
        }
        if spec.stride.0 == 0 || spec.stride.1 == 0 || spec.dilation.0 == 0 || spec.dilation.1 == 0 {
            return Err(AecError::config("conv2d stride and dilation must be positive"));
        }
        check_bias(self, b, cout, "conv2d bias")?;
        let [pt, pb, pl, pr] = spec.padding;
        let ho = out_len(h, pt + pb, kh, spec.dilation.0, spec.stride.0)
            .ok_or_else(|| shape_err("conv2d", &xs, &ws))?;
        let wo = out_len(wd, pl + pr, kw, spec.dilation.1, spec.stride.1)
            .ok_or_else(|| shape_err("conv2d", &xs, &ws))?;
        let geom = Geom {
            c: cin_g,
            h,
            w: wd,
            kh,
            kw,
            sh: spec.stride.0,
            sw: spec.stride.1,
            dh: spec.dilation.0,
            dw: spec.dilation.1,
            pt,
            pl,
            ho,
            wo,
        };
        if cin_g == 1 && cout == cin {
            return self.depthwise(x, w, b, geom);
        }
        let cout_g = cout / gr;
        let kk = cin_g * kh * kw;
        let l = ho * wo;
        let in_sz = cin_g * h * wd;
        // A 1x1 unpadded, unstrided convolution reads the input as its own
        // column matrix.
        let pointwise = kh == 1 && kw == 1 && spec.stride == (1, 1) && spec.padding == [0; 4];

        let mut out = vec![T::zero(); cout * l];
        let mut col = vec![T::zero(); if pointwise { 0 } else { kk * l }];
        {
            let xv = &self.value(x).data;
            let wv = &self.value(w).data;
            for g in 0..gr {
                let xg = &xv[g * in_sz..(g + 1) * in_sz];
                let cols: &[T] = if pointwise {
                    xg
                } else {
                    im2col(xg, &geom, &mut col);
                    &col
                };
                matmul_into(
                    cout_g,
                    kk,
                    l,
                    &wv[g * cout_g * kk..(g + 1) * cout_g * kk],
                    false,
                    cols,
                    false,
                    &mut out[g * cout_g * l..(g + 1) * cout_g * l],
                    false,
                );
            }
            if let Some(b) = b {
                for (c, &bv) in self.value(b).data.iter().enumerate() {
                    out[c * l..(c + 1) * l].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let value = Tensor {
            shape: vec![cout, ho, wo],
            data: out,
        };
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(value, &parents, move |ctx: &BackCtx<'_, T>| {
            let (xv, wv) = (&ctx.inputs[0].data, &ctx.inputs[1].data);
            let gy = ctx.grad;
            let mut dx = ctx.needs[0].then(|| vec![T::zero(); xv.len()]);
            let mut dw = ctx.needs[1].then(|| vec![T::zero(); wv.len()]);
            let scratch = if pointwise { 0 } else { kk * l };
            let mut col = vec![T::zero(); scratch];
            let mut dcol = vec![T::zero(); scratch];
            for g in 0..gr {
                let gy_g = &gy[g * cout_g * l..(g + 1) * cout_g * l];
                if let Some(dw) = dw.as_mut() {
                    let xg = &xv[g * in_sz..(g + 1) * in_sz];
                    let cols: &[T] = if pointwise {
                        xg
                    } else {
                        im2col(xg, &geom, &mut col);
                        &col
                    };
                    matmul_into(
                        cout_g,
                        l,
                        kk,
                        gy_g,
                        false,
                        cols,
                        true,
                        &mut dw[g * cout_g * kk..(g + 1) * cout_g * kk],
                        false,
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    let dxg = &mut dx[g * in_sz..(g + 1) * in_sz];
                    let target: &mut [T] = if pointwise { dxg } else { &mut dcol };
                    matmul_into(
                        kk,
                        cout_g,
                        l,
                        &wv[g * cout_g * kk..(g + 1) * cout_g * kk],
                        true,
                        gy_g,
                        false,
                        target,
                        false,
                    );
                    if !pointwise {
                        col2im(&dcol, &geom, &mut dx[g * in_sz..(g + 1) * in_sz]);
                    }
                }
            }
            let mut res = vec![dx, dw];
            if ctx.inputs.len() == 3 {
                res.push(ctx.needs[2].then(|| {
                    (0..cout).map(|c| gy[c * l..(c + 1) * l].iter().copied().sum()).collect()
                }));
            }
            res
        })
    }

    /// Depthwise case of [`Tape::conv2d`]: one filter per channel.
    fn depthwise(&mut self, x: Var, w: Var, b: Option<Var>, geom: Geom) -> Result<Var> {
        let c = self.shape(x)[0];
        let geom = Geom { c, ..geom };
        let l = geom.ho * geom.wo;
        let mut out = vec![T::zero(); c * l];
        if let Some(b) = b {
            for (ch, &bv) in self.value(b).data.iter().enumerate() {
                out[ch * l..(ch + 1) * l].iter_mut().for_each(|v| *v = bv);
            }
        }
        depthwise_forward(&self.value(x).data, &self.value(w).data, &geom, &mut out);
        let value = Tensor {
            shape: vec![c, geom.ho, geom.wo],
            data: out,
        };
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(value, &parents, move |ctx: &BackCtx<'_, T>| {
            let (xv, wv) = (&ctx.inputs[0].data, &ctx.inputs[1].data);
            let gy = ctx.grad;
            let mut dx = ctx.needs[0].then(|| vec![T::zero(); xv.len()]);
            let mut dw = ctx.needs[1].then(|| vec![T::zero(); wv.len()]);
            depthwise_backward(xv, wv, gy, &geom, dx.as_deref_mut(), dw.as_deref_mut());
            let mut res = vec![dx, dw];
            if ctx.inputs.len() == 3 {
                res.push(ctx.needs[2].then(|| {
                    (0..c).map(|ch| gy[ch * l..(ch + 1) * l].iter().copied().sum()).collect()
                }));
            }
            res
        })
    }

    /// `x: [Cin, H, W]`, `w: [Cin, Cout / groups, kh, kw]`, `b: [Cout]`.
    /// Full output is `(H - 1) * sh + dh * (kh - 1) + 1` rows before cropping.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvTranspose2dSpec,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 4 || spec.groups == 0 {
            return Err(shape_err("conv_transpose2d", &xs, &ws));
        }
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (wcin, cout_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let gr = spec.groups;
        if wcin != cin || cin % gr != 0 || kh == 0 || kw == 0 || h == 0 || wd == 0 {
            return Err(shape_err("conv_transpose2d", &xs, &ws));
        }
        if spec.stride.0 == 0 || spec.stride.1 == 0 || spec.dilation.0 == 0 || spec.dilation.1 == 0 {
            return Err(AecError::config("conv_transpose2d stride and dilation must be positive"));
        }
        let cout = cout_g * gr;
        check_bias(self, b, cout, "conv_transpose2d bias")?;
        let cin_g = cin / gr;
        let [ct, cb, cl, cr] = spec.crop;
        let hf = (h - 1) * spec.stride.0 + spec.dilation.0 * (kh - 1) + 1;
        let wf = (wd - 1) * spec.stride.1 + spec.dilation.1 * (kw - 1) + 1;
        if ct + cb >= hf || cl + cr >= wf {
            return Err(AecError::config("conv_transpose2d crop removes the whole output"));
        }
        let (ho, wo) = (hf - ct - cb, wf - cl - cr);
        // Geometry of the adjoint convolution: output image -> input grid.
        let geom = Geom {
            c: cout_g,
            h: ho,
            w: wo,
            kh,
            kw,
            sh: spec.stride.0,
            sw: spec.stride.1,
            dh: spec.dilation.0,
            dw: spec.dilation.1,
            pt: ct,
            pl: cl,
            ho: h,
            wo: wd,
        };
        let kk = cout_g * kh * kw;
        let l = h * wd;
        let out_sz = cout_g * ho * wo;

        let mut out = vec![T::zero(); cout * ho * wo];
        let mut col = vec![T::zero(); kk * l];
        {
            let xv = &self.value(x).data;
            let wv = &self.value(w).data;
            for g in 0..gr {
                matmul_into(
                    kk,
                    cin_g,
                    l,
                    &wv[g * cin_g * kk..(g + 1) * cin_g * kk],
                    true,
                    &xv[g * cin_g * l..(g + 1) * cin_g * l],
                    false,
                    &mut col,
                    false,
                );
                col2im(&col, &geom, &mut out[g * out_sz..(g + 1) * out_sz]);
            }
            if let Some(b) = b {
                let plane = ho * wo;
                for (c, &bv) in self.value(b).data.iter().enumerate() {
                    out[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let value = Tensor {
            shape: vec![cout, ho, wo],
            data: out,
        };
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(value, &parents, move |ctx: &BackCtx<'_, T>| {
            let (xv, wv) = (&ctx.inputs[0].data, &ctx.inputs[1].data);
            let gy = ctx.grad;
            let mut dx = ctx.needs[0].then(|| vec![T::zero(); xv.len()]);
            let mut dw = ctx.needs[1].then(|| vec![T::zero(); wv.len()]);
            let mut dcol = vec![T::zero(); kk * l];
            for g in 0..gr {
                im2col(&gy[g * out_sz..(g + 1) * out_sz], &geom, &mut dcol);
                if let Some(dx) = dx.as_mut() {
                    matmul_into(
                        cin_g,
                        kk,
                        l,
                        &wv[g * cin_g * kk..(g + 1) * cin_g * kk],
                        false,
                        &dcol,
                        false,
                        &mut dx[g * cin_g * l..(g + 1) * cin_g * l],
                        false,
                    );
                }
                if let Some(dw) = dw.as_mut() {
                    matmul_into(
                        cin_g,
                        l,
                        kk,
                        &xv[g * cin_g * l..(g + 1) * cin_g * l],
                        false,
                        &dcol,
                        true,
                        &mut dw[g * cin_g * kk..(g + 1) * cin_g * kk],
                        false,
                    );
                }
            }
            let mut res = vec![dx, dw];
            if ctx.inputs.len() == 3 {
                let plane = ho * wo;
                res.push(ctx.needs[2].then(|| {
                    (0..cout)
                        .map(|c| gy[c * plane..(c + 1) * plane].iter().copied().sum())
                        .collect()
                }));
            }
            res
        })
    }
}
