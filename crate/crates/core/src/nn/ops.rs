//! Forward and backward implementations of the operator set.
//!
//! Convolution uses the cross-correlation convention (no kernel flip) with
//! zero padding on all three axes. Stride-1 calls take a row-slice fast path;
//! other strides fall back to plain index loops.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::math::{Mask, NormalMap};
use crate::nn::{Backward, Real, Shape5, Tensor};

/// Norm below which a pixel is zeroed (with zero gradient) by
/// [`l2_normalize_channels`]; background pixels can produce near-zero
/// activations.
pub const L2_NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    b: usize,
    cin: usize,
    cout: usize,
    d: usize,
    h: usize,
    w: usize,
    kd: usize,
    kh: usize,
    kw: usize,
    od: usize,
    oh: usize,
    ow: usize,
    stride: (usize, usize, usize),
    padding: (usize, usize, usize),
}

fn out_len(n: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    if s == 0 {
        return Err(CoreError::InvalidConfig("stride must be >= 1".into()));
    }
    let padded = n + 2 * p;
    if padded < k {
        return Err(CoreError::DimensionMismatch(format!(
            "kernel extent {} exceeds padded input {}",
            k, padded
        )));
    }
    Ok((padded - k) / s + 1)
}

fn conv_dims(
    x: Shape5,
    w: Shape5,
    stride: (usize, usize, usize),
    padding: (usize, usize, usize),
) -> Result<ConvDims> {
    if w.c != x.c {
        return Err(CoreError::DimensionMismatch(format!(
            "weight expects {} input channels, tensor has {}",
            w.c, x.c
        )));
    }
    if w.d == 0 || w.h == 0 || w.w == 0 || w.b == 0 {
        return Err(CoreError::InvalidConfig("kernel extents must be >= 1".into()));
    }
    Ok(ConvDims {
        b: x.b,
        cin: x.c,
        cout: w.b,
        d: x.d,
        h: x.h,
        w: x.w,
        kd: w.d,
        kh: w.h,
        kw: w.w,
        od: out_len(x.d, w.d, stride.0, padding.0)?,
        oh: out_len(x.h, w.h, stride.1, padding.1)?,
        ow: out_len(x.w, w.w, stride.2, padding.2)?,
        stride,
        padding,
    })
}

/// Output index range [lo, hi) along one stride-1 axis for kernel offset `k`
/// and padding `p`: every o in the range reads input index o + k - p.
fn window(k: usize, p: usize, len_in: usize, len_out: usize) -> (usize, usize) {
    let lo = (p as isize - k as isize).max(0);
    let hi = (len_in as isize + p as isize - k as isize)
        .min(len_out as isize)
        .max(lo);
    (lo as usize, hi as usize)
}

/// 3D cross-correlation over (frames, height, width) with full channel
/// mixing. `weight` shape is (C_out, C_in, kD, kH, kW) carried in a
/// [`Shape5`]; `bias` has C_out entries.
pub fn conv3d<F: Real>(
    x: &Tensor<F>,
    weight: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    stride: (usize, usize, usize),
    padding: (usize, usize, usize),
) -> Result<Tensor<F>> {
    let dims = conv_dims(x.shape(), weight.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.shape().len() != dims.cout {
            return Err(CoreError::DimensionMismatch(format!(
                "bias has {} entries, expected {}",
                b.shape().len(),
                dims.cout
            )));
        }
    }

    let out_shape = Shape5::new(dims.b, dims.cout, dims.od, dims.oh, dims.ow);
    let mut out = alloc::vec![F::zero(); out_shape.len()];
    if let Some(b) = bias {
        let bv = b.values();
        let plane = dims.od * dims.oh * dims.ow;
        for bi in 0..dims.b {
            for co in 0..dims.cout {
                let base = (bi * dims.cout + co) * plane;
                out[base..base + plane].fill(bv[co]);
            }
        }
    }

    if stride == (1, 1, 1) {
        conv_forward_unit_stride(x.values(), weight.values(), &mut out, &dims);
    } else {
        conv_forward_generic(x.values(), weight.values(), &mut out, &dims);
    }

    let op = Conv3dBackward {
        x: x.clone(),
        weight: weight.clone(),
        bias: bias.cloned(),
        dims,
    };
    Ok(Tensor::from_op(out_shape, out, Box::new(op)))
}

fn conv_forward_unit_stride<F: Real>(xv: &[F], wv: &[F], out: &mut [F], dm: &ConvDims) {
    let (pd, ph, pw) = dm.padding;
    let in_plane = dm.h * dm.w;
    let out_plane = dm.oh * dm.ow;
    for bi in 0..dm.b {
        for co in 0..dm.cout {
            let obase = (bi * dm.cout + co) * dm.od * out_plane;
            for ci in 0..dm.cin {
                let ibase = (bi * dm.cin + ci) * dm.d * in_plane;
                for a in 0..dm.kd {
                    let (dlo, dhi) = window(a, pd, dm.d, dm.od);
                    for bk in 0..dm.kh {
                        let (hlo, hhi) = window(bk, ph, dm.h, dm.oh);
                        for ck in 0..dm.kw {
                            let (xlo, xhi) = window(ck, pw, dm.w, dm.ow);
                            if xlo >= xhi || dlo >= dhi || hlo >= hhi {
                                continue;
                            }
                            let coef =
                                wv[(((co * dm.cin + ci) * dm.kd + a) * dm.kh + bk) * dm.kw + ck];
                            let len = xhi - xlo;
                            let ixlo = xlo + ck - pw;
                            for od in dlo..dhi {
                                let id = od + a - pd;
                                let orow0 = obase + od * out_plane;
                                let irow0 = ibase + id * in_plane;
                                for oh in hlo..hhi {
                                    let ih = oh + bk - ph;
                                    let dst = &mut out
                                        [orow0 + oh * dm.ow + xlo..orow0 + oh * dm.ow + xhi];
                                    let src =
                                        &xv[irow0 + ih * dm.w + ixlo..irow0 + ih * dm.w + ixlo + len];
                                    for (o, i) in dst.iter_mut().zip(src) {
                                        *o = *o + coef * *i;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward_generic<F: Real>(xv: &[F], wv: &[F], out: &mut [F], dm: &ConvDims) {
    let (sd, sh, sw) = dm.stride;
    let (pd, ph, pw) = dm.padding;
    let mut oi = 0usize;
    for bi in 0..dm.b {
        for co in 0..dm.cout {
            for od in 0..dm.od {
                for oh in 0..dm.oh {
                    for ow in 0..dm.ow {
                        let mut acc = out[oi];
                        for ci in 0..dm.cin {
                            for a in 0..dm.kd {
                                let id = (od * sd + a) as isize - pd as isize;
                                if id < 0 || id >= dm.d as isize {
                                    continue;
                                }
                                for bk in 0..dm.kh {
                                    let ih = (oh * sh + bk) as isize - ph as isize;
                                    if ih < 0 || ih >= dm.h as isize {
                                        continue;
                                    }
                                    for ck in 0..dm.kw {
                                        let iw = (ow * sw + ck) as isize - pw as isize;
                                        if iw < 0 || iw >= dm.w as isize {
                                            continue;
                                        }
                                        let xi = (((bi * dm.cin + ci) * dm.d + id as usize)
                                            * dm.h
                                            + ih as usize)
                                            * dm.w
                                            + iw as usize;
                                        let wi = (((co * dm.cin + ci) * dm.kd + a) * dm.kh + bk)
                                            * dm.kw
                                            + ck;
                                        acc = acc + wv[wi] * xv[xi];
                                    }
                                }
                            }
                        }
                        out[oi] = acc;
                        oi += 1;
                    }
                }
            }
        }
    }
}

struct Conv3dBackward<F: Real> {
    x: Tensor<F>,
    weight: Tensor<F>,
    bias: Option<Tensor<F>>,
    dims: ConvDims,
}

impl<F: Real> Backward<F> for Conv3dBackward<F> {
    fn parents(&self) -> Vec<Tensor<F>> {
        let mut p = alloc::vec![self.x.clone(), self.weight.clone()];
        if let Some(b) = &self.bias {
            p.push(b.clone());
        }
        p
    }

    fn apply(&self, grad_out: &[F]) {
        let dm = &self.dims;
        if let Some(b) = &self.bias {
            if b.needs_grad() {
                let mut gb = alloc::vec![F::zero(); dm.cout];
                let plane = dm.od * dm.oh * dm.ow;
                for bi in 0..dm.b {
                    for co in 0..dm.cout {
                        let base = (bi * dm.cout + co) * plane;
                        let mut s = F::zero();
                        for g in &grad_out[base..base + plane] {
                            s += *g;
                        }
                        gb[co] += s;
                    }
                }
                b.accumulate_grad(&gb);
            }
        }
        let unit = dm.stride == (1, 1, 1);
        if self.weight.needs_grad() {
            let mut gw = alloc::vec![F::zero(); self.weight.shape().len()];
            if unit {
                grad_weight_unit_stride(self.x.values(), grad_out, &mut gw, dm);
            } else {
                grad_weight_generic(self.x.values(), grad_out, &mut gw, dm);
            }
            self.weight.accumulate_grad(&gw);
        }
        if self.x.needs_grad() {
            let mut gx = alloc::vec![F::zero(); self.x.shape().len()];
            if unit {
                grad_input_unit_stride(self.weight.values(), grad_out, &mut gx, dm);
            } else {
                grad_input_generic(self.weight.values(), grad_out, &mut gx, dm);
            }
            self.x.accumulate_grad(&gx);
        }
    }
}

fn grad_weight_unit_stride<F: Real>(xv: &[F], gout: &[F], gw: &mut [F], dm: &ConvDims) {
    let (pd, ph, pw) = dm.padding;
    let in_plane = dm.h * dm.w;
    let out_plane = dm.oh * dm.ow;
    for bi in 0..dm.b {
        for co in 0..dm.cout {
            let obase = (bi * dm.cout + co) * dm.od * out_plane;
            for ci in 0..dm.cin {
                let ibase = (bi * dm.cin + ci) * dm.d * in_plane;
                for a in 0..dm.kd {
                    let (dlo, dhi) = window(a, pd, dm.d, dm.od);
                    for bk in 0..dm.kh {
                        let (hlo, hhi) = window(bk, ph, dm.h, dm.oh);
                        for ck in 0..dm.kw {
                            let (xlo, xhi) = window(ck, pw, dm.w, dm.ow);
                            if xlo >= xhi || dlo >= dhi || hlo >= hhi {
                                continue;
                            }
                            let len = xhi - xlo;
                            let ixlo = xlo + ck - pw;
                            let mut acc = F::zero();
                            for od in dlo..dhi {
                                let id = od + a - pd;
                                let orow0 = obase + od * out_plane;
                                let irow0 = ibase + id * in_plane;
                                for oh in hlo..hhi {
                                    let ih = oh + bk - ph;
                                    let g = &gout[orow0 + oh * dm.ow + xlo..orow0 + oh * dm.ow + xhi];
                                    let xr = &xv
                                        [irow0 + ih * dm.w + ixlo..irow0 + ih * dm.w + ixlo + len];
                                    let mut s = F::zero();
                                    for (gi, xi) in g.iter().zip(xr) {
                                        s = s + *gi * *xi;
                                    }
                                    acc += s;
                                }
                            }
                            gw[(((co * dm.cin + ci) * dm.kd + a) * dm.kh + bk) * dm.kw + ck] += acc;
                        }
                    }
                }
            }
        }
    }
}

fn grad_input_unit_stride<F: Real>(wv: &[F], gout: &[F], gx: &mut [F], dm: &ConvDims) {
    let (pd, ph, pw) = dm.padding;
    let in_plane = dm.h * dm.w;
    let out_plane = dm.oh * dm.ow;
    for bi in 0..dm.b {
        for co in 0..dm.cout {
            let obase = (bi * dm.cout + co) * dm.od * out_plane;
            for ci in 0..dm.cin {
                let ibase = (bi * dm.cin + ci) * dm.d * in_plane;
                for a in 0..dm.kd {
                    let (dlo, dhi) = window(a, pd, dm.d, dm.od);
                    for bk in 0..dm.kh {
                        let (hlo, hhi) = window(bk, ph, dm.h, dm.oh);
                        for ck in 0..dm.kw {
                            let (xlo, xhi) = window(ck, pw, dm.w, dm.ow);
                            if xlo >= xhi || dlo >= dhi || hlo >= hhi {
                                continue;
                            }
                            let coef =
                                wv[(((co * dm.cin + ci) * dm.kd + a) * dm.kh + bk) * dm.kw + ck];
                            let len = xhi - xlo;
                            let ixlo = xlo + ck - pw;
                            for od in dlo..dhi {
                                let id = od + a - pd;
                                let orow0 = obase + od * out_plane;
                                let irow0 = ibase + id * in_plane;
                                for oh in hlo..hhi {
                                    let ih = oh + bk - ph;
                                    let g = &gout[orow0 + oh * dm.ow + xlo..orow0 + oh * dm.ow + xhi];
                                    let dst = &mut gx
                                        [irow0 + ih * dm.w + ixlo..irow0 + ih * dm.w + ixlo + len];
                                    for (d, gi) in dst.iter_mut().zip(g) {
                                        *d = *d + coef * *gi;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn grad_weight_generic<F: Real>(xv: &[F], gout: &[F], gw: &mut [F], dm: &ConvDims) {
    scatter_generic(dm, |bi, co, ci, a, bk, ck, xi, oi| {
        let wi = (((co * dm.cin + ci) * dm.kd + a) * dm.kh + bk) * dm.kw + ck;
        let _ = bi;
        gw[wi] += gout[oi] * xv[xi];
    });
}

fn grad_input_generic<F: Real>(wv: &[F], gout: &[F], gx: &mut [F], dm: &ConvDims) {
    scatter_generic(dm, |bi, co, ci, a, bk, ck, xi, oi| {
        let wi = (((co * dm.cin + ci) * dm.kd + a) * dm.kh + bk) * dm.kw + ck;
        let _ = bi;
        gx[xi] += wv[wi] * gout[oi];
    });
}

/// Visits every (output, input, kernel) coincidence for arbitrary strides.
fn scatter_generic<FN>(dm: &ConvDims, mut f: FN)
where
    FN: FnMut(usize, usize, usize, usize, usize, usize, usize, usize),
{
    let (sd, sh, sw) = dm.stride;
    let (pd, ph, pw) = dm.padding;
    let mut oi = 0usize;
    for bi in 0..dm.b {
        for co in 0..dm.cout {
            for od in 0..dm.od {
                for oh in 0..dm.oh {
                    for ow in 0..dm.ow {
                        for ci in 0..dm.cin {
                            for a in 0..dm.kd {
                                let id = (od * sd + a) as isize - pd as isize;
                                if id < 0 || id >= dm.d as isize {
                                    continue;
                                }
                                for bk in 0..dm.kh {
                                    let ih = (oh * sh + bk) as isize - ph as isize;
                                    if ih < 0 || ih >= dm.h as isize {
                                        continue;
                                    }
                                    for ck in 0..dm.kw {
                                        let iw = (ow * sw + ck) as isize - pw as isize;
                                        if iw < 0 || iw >= dm.w as isize {
                                            continue;
                                        }
                                        let xi = (((bi * dm.cin + ci) * dm.d + id as usize)
                                            * dm.h
                                            + ih as usize)
                                            * dm.w
                                            + iw as usize;
                                        f(bi, co, ci, a, bk, ck, xi, oi);
                                    }
                                }
                            }
                        }
                        oi += 1;
                    }
                }
            }
        }
    }
}

/// Elementwise max(slope * x, x); gradient is 1 for x > 0 and `slope`
/// otherwise.
pub fn leaky_relu<F: Real>(x: &Tensor<F>, slope: f64) -> Tensor<F> {
    let s = F::from_f64(slope);
    let out = x
        .values()
        .iter()
        .map(|&v| if v > F::zero() { v } else { v * s })
        .collect();
    Tensor::from_op(
        x.shape(),
        out,
        Box::new(LeakyReluBackward {
            x: x.clone(),
            slope: s,
        }),
    )
}

struct LeakyReluBackward<F: Real> {
    x: Tensor<F>,
    slope: F,
}

impl<F: Real> Backward<F> for LeakyReluBackward<F> {
    fn parents(&self) -> Vec<Tensor<F>> {
        alloc::vec![self.x.clone()]
    }

    fn apply(&self, grad_out: &[F]) {
        if !self.x.needs_grad() {
            return;
        }
        let gx: Vec<F> = self
            .x
            .values()
            .iter()
            .zip(grad_out)
            .map(|(&v, &g)| if v > F::zero() { g } else { g * self.slope })
            .collect();
        self.x.accumulate_grad(&gx);
    }
}

/// Inverted dropout. In training mode each element is zeroed independently
/// with probability `rate` and survivors are scaled by 1/(1-rate); in eval
/// mode this is exactly the identity. Deterministic given `seed`.
pub fn dropout<F: Real>(x: &Tensor<F>, rate: f64, training: bool, seed: u64) -> Result<Tensor<F>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(CoreError::InvalidConfig(format!(
            "dropout rate must be in [0, 1), got {}",
            rate
        )));
    }
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let scale = F::from_f64(1.0 / (1.0 - rate));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask: Vec<F> = (0..x.shape().len())
        .map(|_| {
            if rng.random::<f64>() < rate {
                F::zero()
            } else {
                scale
            }
        })
        .collect();
    let out = x
        .values()
        .iter()
        .zip(&mask)
        .map(|(&v, &m)| v * m)
        .collect();
    Ok(Tensor::from_op(
        x.shape(),
        out,
        Box::new(DropoutBackward {
            x: x.clone(),
            mask,
        }),
    ))
}

struct DropoutBackward<F: Real> {
    x: Tensor<F>,
    mask: Vec<F>,
}

impl<F: Real> Backward<F> for DropoutBackward<F> {
    fn parents(&self) -> Vec<Tensor<F>> {
        alloc::vec![self.x.clone()]
    }

    fn apply(&self, grad_out: &[F]) {
        if !self.x.needs_grad() {
            return;
        }
        let gx: Vec<F> = grad_out
            .iter()
            .zip(&self.mask)
            .map(|(&g, &m)| g * m)
            .collect();
        self.x.accumulate_grad(&gx);
    }
}

/// Elementwise max over the frame axis, collapsing D to 1. The gradient
/// routes to the argmax entry, first frame index on ties.
pub fn framewise_maxpool<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let s = x.shape();
    let hw = s.h * s.w;
    let out_shape = Shape5::new(s.b, s.c, 1, s.h, s.w);
    let mut out = alloc::vec![F::zero(); out_shape.len()];
    let mut argmax = alloc::vec![0u32; out_shape.len()];
    let xv = x.values();
    for bc in 0..s.b * s.c {
        let xbase = bc * s.d * hw;
        let obase = bc * hw;
        out[obase..obase + hw].copy_from_slice(&xv[xbase..xbase + hw]);
        for di in 1..s.d {
            let frame = &xv[xbase + di * hw..xbase + (di + 1) * hw];
            for (i, &v) in frame.iter().enumerate() {
                if v > out[obase + i] {
                    out[obase + i] = v;
                    argmax[obase + i] = di as u32;
                }
            }
        }
    }
    Tensor::from_op(
        out_shape,
        out,
        Box::new(MaxpoolBackward {
            x: x.clone(),
            argmax,
        }),
    )
}

struct MaxpoolBackward<F: Real> {
    x: Tensor<F>,
    argmax: Vec<u32>,
}

impl<F: Real> Backward<F> for MaxpoolBackward<F> {
    fn parents(&self) -> Vec<Tensor<F>> {
        alloc::vec![self.x.clone()]
    }

    fn apply(&self, grad_out: &[F]) {
        if !self.x.needs_grad() {
            return;
        }
        let s = self.x.shape();
        let hw = s.h * s.w;
        let mut gx = alloc::vec![F::zero(); s.len()];
        for bc in 0..s.b * s.c {
            let xbase = bc * s.d * hw;
            let obase = bc * hw;
            for i in 0..hw {
                let di = self.argmax[obase + i] as usize;
                gx[xbase + di * hw + i] += grad_out[obase + i];
            }
        }
        self.x.accumulate_grad(&gx);
    }
}

/// Normalizes each pixel's 3-channel vector to unit length. Pixels with norm
/// below [`L2_NORM_EPS`] output (0, 0, 0) and receive zero gradient.
pub fn l2_normalize_channels<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let s = x.shape();
    if s.c != 3 {
        return Err(CoreError::DimensionMismatch(format!(
            "l2_normalize_channels expects 3 channels, got {}",
            s.c
        )));
    }
    let eps = F::from_f64(L2_NORM_EPS);
    let dhw = s.d * s.h * s.w;
    let xv = x.values();
    let mut out = alloc::vec![F::zero(); s.len()];
    for bi in 0..s.b {
        let base = bi * 3 * dhw;
        for p in 0..dhw {
            let i0 = base + p;
            let (v0, v1, v2) = (xv[i0], xv[i0 + dhw], xv[i0 + 2 * dhw]);
            let n = (v0 * v0 + v1 * v1 + v2 * v2).sqrt();
            if n >= eps {
                out[i0] = v0 / n;
                out[i0 + dhw] = v1 / n;
                out[i0 + 2 * dhw] = v2 / n;
            }
        }
    }
    Ok(Tensor::from_op(
        s,
        out,
        Box::new(L2NormalizeBackward { x: x.clone() }),
    ))
}

struct L2NormalizeBackward<F: Real> {
    x: Tensor<F>,
}

impl<F: Real> Backward<F> for L2NormalizeBackward<F> {
    fn parents(&self) -> Vec<Tensor<F>> {
        alloc::vec![self.x.clone()]
    }

    fn apply(&self, grad_out: &[F]) {
        if !self.x.needs_grad() {
            return;
        }
        let s = self.x.shape();
        let eps = F::from_f64(L2_NORM_EPS);
        let dhw = s.d * s.h * s.w;
        let xv = self.x.values();
        let mut gx = alloc::vec![F::zero(); s.len()];
        for bi in 0..s.b {
            let base = bi * 3 * dhw;
            for p in 0..dhw {
                let i0 = base + p;
                let (v0, v1, v2) = (xv[i0], xv[i0 + dhw], xv[i0 + 2 * dhw]);
                let n = (v0 * v0 + v1 * v1 + v2 * v2).sqrt();
                if n < eps {
                    continue;
                }
                let (y0, y1, y2) = (v0 / n, v1 / n, v2 / n);
                let (g0, g1, g2) = (grad_out[i0], grad_out[i0 + dhw], grad_out[i0 + 2 * dhw]);
                let dot = g0 * y0 + g1 * y1 + g2 * y2;
                gx[i0] = (g0 - dot * y0) / n;
                gx[i0 + dhw] = (g1 - dot * y1) / n;
                gx[i0 + 2 * dhw] = (g2 - dot * y2) / n;
            }
        }
        self.x.accumulate_grad(&gx);
    }
}

/// Cosine similarity loss: mean over mask==1 pixels of (1 - pred . gt).
/// `pred` must be (1, 3, 1, H, W).
pub fn cosine_loss<F: Real>(pred: &Tensor<F>, gt: &NormalMap, mask: &Mask) -> Result<Tensor<F>> {
    let s = pred.shape();
    if s.b != 1 || s.c != 3 || s.d != 1 {
        return Err(CoreError::DimensionMismatch(format!(
            "cosine_loss expects shape (1, 3, 1, H, W), got {}",
            s
        )));
    }
    if s.h != mask.height() || s.w != mask.width() {
        return Err(CoreError::DimensionMismatch(format!(
            "prediction {}x{} does not match mask {}x{}",
            s.w,
            s.h,
            mask.width(),
            mask.height()
        )));
    }
    if gt.width() != mask.width() || gt.height() != mask.height() {
        return Err(CoreError::DimensionMismatch(
            "ground truth and mask must share dimensions".into(),
        ));
    }
    let hw = s.h * s.w;
    // Ground truth laid out channel-major to mirror the prediction tensor.
    let mut gtv = alloc::vec![F::zero(); 3 * hw];
    for (p, n) in gt.data().iter().enumerate() {
        gtv[p] = F::from_f64(n.x());
        gtv[p + hw] = F::from_f64(n.y());
        gtv[p + 2 * hw] = F::from_f64(n.z());
    }
    let m = mask.count_ones();
    let pv = pred.values();
    let mut sum = F::zero();
    for (p, &mv) in mask.data().iter().enumerate() {
        if mv == 1 {
            let dot = pv[p] * gtv[p] + pv[p + hw] * gtv[p + hw] + pv[p + 2 * hw] * gtv[p + 2 * hw];
            sum += F::one() - dot;
        }
    }
    let loss = sum / F::from_f64(m as f64);
    Ok(Tensor::from_op(
        Shape5::scalar(),
        alloc::vec![loss],
        Box::new(CosineLossBackward {
            pred: pred.clone(),
            gt: gtv,
            mask: mask.clone(),
            count: m,
        }),
    ))
}

struct CosineLossBackward<F: Real> {
    pred: Tensor<F>,
    gt: Vec<F>,
    mask: Mask,
    count: usize,
}

impl<F: Real> Backward<F> for CosineLossBackward<F> {
    fn parents(&self) -> Vec<Tensor<F>> {
        alloc::vec![self.pred.clone()]
    }

    fn apply(&self, grad_out: &[F]) {
        if !self.pred.needs_grad() {
            return;
        }
        let g0 = grad_out[0];
        let s = self.pred.shape();
        let hw = s.h * s.w;
        let inv = F::from_f64(-1.0 / self.count as f64) * g0;
        let mut gx = alloc::vec![F::zero(); s.len()];
        for (p, &mv) in self.mask.data().iter().enumerate() {
            if mv == 1 {
                gx[p] = inv * self.gt[p];
                gx[p + hw] = inv * self.gt[p + hw];
                gx[p + 2 * hw] = inv * self.gt[p + 2 * hw];
            }
        }
        self.pred.accumulate_grad(&gx);
    }
}

/// Fixed-coefficient scalarizer: sum_i coeffs[i] * x[i]. Used to reduce
/// non-scalar operator outputs for gradient checking.
pub fn weighted_sum<F: Real>(x: &Tensor<F>, coeffs: &[F]) -> Result<Tensor<F>> {
    if coeffs.len() != x.shape().len() {
        return Err(CoreError::DimensionMismatch(format!(
            "weighted_sum: {} coefficients for {} values",
            coeffs.len(),
            x.shape().len()
        )));
    }
    let s: F = x
        .values()
        .iter()
        .zip(coeffs)
        .map(|(&v, &c)| v * c)
        .fold(F::zero(), |a, b| a + b);
    Ok(Tensor::from_op(
        Shape5::scalar(),
        alloc::vec![s],
        Box::new(WeightedSumBackward {
            x: x.clone(),
            coeffs: coeffs.to_vec(),
        }),
    ))
}

struct WeightedSumBackward<F: Real> {
    x: Tensor<F>,
    coeffs: Vec<F>,
}

impl<F: Real> Backward<F> for WeightedSumBackward<F> {
    fn parents(&self) -> Vec<Tensor<F>> {
        alloc::vec![self.x.clone()]
    }

    fn apply(&self, grad_out: &[F]) {
        if !self.x.needs_grad() {
            return;
        }
        let g0 = grad_out[0];
        let gx: Vec<F> = self.coeffs.iter().map(|&c| c * g0).collect();
        self.x.accumulate_grad(&gx);
    }
}

/// Sum of two scalar tensors.
pub fn add_scalars<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let v = a.scalar()? + b.scalar()?;
    Ok(Tensor::from_op(
        Shape5::scalar(),
        alloc::vec![v],
        Box::new(AddScalarsBackward {
            a: a.clone(),
            b: b.clone(),
        }),
    ))
}

struct AddScalarsBackward<F: Real> {
    a: Tensor<F>,
    b: Tensor<F>,
}

impl<F: Real> Backward<F> for AddScalarsBackward<F> {
    fn parents(&self) -> Vec<Tensor<F>> {
        alloc::vec![self.a.clone(), self.b.clone()]
    }

    fn apply(&self, grad_out: &[F]) {
        self.a.accumulate_grad(grad_out);
        self.b.accumulate_grad(grad_out);
    }
}

/// Copies `shape.len()` values starting at `offset` of a flat tensor into a
/// new tensor of the given shape. The gradient scatters back into the range.
pub fn narrow_reshape<F: Real>(x: &Tensor<F>, offset: usize, shape: Shape5) -> Result<Tensor<F>> {
    let len = shape.len();
    if offset + len > x.shape().len() {
        return Err(CoreError::DimensionMismatch(format!(
            "narrow_reshape range {}..{} out of bounds for {} values",
            offset,
            offset + len,
            x.shape().len()
        )));
    }
    let out = x.values()[offset..offset + len].to_vec();
    Ok(Tensor::from_op(
        shape,
        out,
        Box::new(NarrowBackward {
            x: x.clone(),
            offset,
            len,
        }),
    ))
}

struct NarrowBackward<F: Real> {
    x: Tensor<F>,
    offset: usize,
    len: usize,
}

impl<F: Real> Backward<F> for NarrowBackward<F> {
    fn parents(&self) -> Vec<Tensor<F>> {
        alloc::vec![self.x.clone()]
    }

    fn apply(&self, grad_out: &[F]) {
        if !self.x.needs_grad() {
            return;
        }
        let mut gx = alloc::vec![F::zero(); self.x.shape().len()];
        gx[self.offset..self.offset + self.len].copy_from_slice(&grad_out[..self.len]);
        self.x.accumulate_grad(&gx);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{normalize_vec, Vec3};
    use alloc::vec;

    fn t(shape: Shape5, values: Vec<f64>, rg: bool) -> Tensor<f64> {
        Tensor::leaf(shape, values, rg).unwrap()
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Independent reference: literal definition of padded strided
    /// cross-correlation, one multiply at a time.
    fn naive_conv3d(
        x: &[f64],
        xs: (usize, usize, usize, usize, usize),
        w: &[f64],
        ws: (usize, usize, usize, usize, usize),
        bias: Option<&[f64]>,
        stride: (usize, usize, usize),
        pad: (usize, usize, usize),
    ) -> Vec<f64> {
        let (b, cin, d, h, wd) = xs;
        let (cout, _, kd, kh, kw) = ws;
        let od = (d + 2 * pad.0 - kd) / stride.0 + 1;
        let oh = (h + 2 * pad.1 - kh) / stride.1 + 1;
        let ow = (wd + 2 * pad.2 - kw) / stride.2 + 1;
        let mut out = vec![0.0; b * cout * od * oh * ow];
        for bi in 0..b {
            for co in 0..cout {
                for z in 0..od {
                    for y in 0..oh {
                        for xo in 0..ow {
                            let mut acc = bias.map_or(0.0, |bv| bv[co]);
                            for ci in 0..cin {
                                for a in 0..kd {
                                    for e in 0..kh {
                                        for c in 0..kw {
                                            let id = (z * stride.0 + a) as isize - pad.0 as isize;
                                            let ih = (y * stride.1 + e) as isize - pad.1 as isize;
                                            let iw = (xo * stride.2 + c) as isize - pad.2 as isize;
                                            if id < 0
                                                || ih < 0
                                                || iw < 0
                                                || id >= d as isize
                                                || ih >= h as isize
                                                || iw >= wd as isize
                                            {
                                                continue;
                                            }
                                            let xi = (((bi * cin + ci) * d + id as usize) * h
                                                + ih as usize)
                                                * wd
                                                + iw as usize;
                                            let wi =
                                                (((co * cin + ci) * kd + a) * kh + e) * kw + c;
                                            acc += x[xi] * w[wi];
                                        }
                                    }
                                }
                            }
                            out[(((bi * cout + co) * od + z) * oh + y) * ow + xo] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(Shape5::new(1, 1, 2, 2, 2), vec![1., 2., 3., 4., 5., 6., 7., 8.], false);
        let w = t(Shape5::new(1, 1, 1, 1, 1), vec![1.0], false);
        let b = t(Shape5::new(1, 1, 1, 1, 1), vec![0.0], false);
        let y = conv3d(&x, &w, Some(&b), (1, 1, 1), (0, 0, 0)).unwrap();
        assert_eq!(y.values(), x.values());
    }

    #[test]
    fn conv_frame_padding_arithmetic() {
        // All-ones 3x1x1 kernel on constant-1 input of D=3 with frame padding 1:
        // interior frames see 3 contributions, border frames 2.
        let x = t(Shape5::new(1, 1, 3, 1, 1), vec![1.0; 3], false);
        let w = t(Shape5::new(1, 1, 3, 1, 1), vec![1.0; 3], false);
        let y = conv3d(&x, &w, None, (1, 1, 1), (1, 0, 0)).unwrap();
        assert_eq!(y.values(), &[2.0, 3.0, 2.0]);
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cases = [
            ((1, 1, 3, 4, 4), (2, 1, 1, 3, 3), (1, 1, 1), (0, 1, 1)),
            ((2, 3, 4, 5, 5), (4, 3, 3, 3, 3), (1, 1, 1), (1, 1, 1)),
            ((1, 2, 5, 6, 7), (3, 2, 3, 1, 1), (1, 1, 1), (1, 0, 0)),
            ((1, 2, 6, 6, 6), (2, 2, 3, 3, 3), (2, 2, 2), (1, 1, 1)),
            ((1, 1, 1, 8, 8), (1, 1, 1, 5, 5), (1, 3, 3), (0, 2, 2)),
        ];
        for (xs, ws, stride, pad) in cases {
            let xlen = xs.0 * xs.1 * xs.2 * xs.3 * xs.4;
            let wlen = ws.0 * ws.1 * ws.2 * ws.3 * ws.4;
            let xv = rand_vec(&mut rng, xlen);
            let wv = rand_vec(&mut rng, wlen);
            let bv = rand_vec(&mut rng, ws.0);
            let x = t(Shape5::new(xs.0, xs.1, xs.2, xs.3, xs.4), xv.clone(), false);
            let w = t(Shape5::new(ws.0, ws.1, ws.2, ws.3, ws.4), wv.clone(), false);
            let b = t(Shape5::new(1, ws.0, 1, 1, 1), bv.clone(), false);
            let y = conv3d(&x, &w, Some(&b), stride, pad).unwrap();
            let want = naive_conv3d(&xv, xs, &wv, ws, Some(&bv), stride, pad);
            assert_eq!(y.values().len(), want.len());
            for (a, e) in y.values().iter().zip(&want) {
                assert!((a - e).abs() < 1e-10, "conv mismatch: {} vs {}", a, e);
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = t(Shape5::new(1, 2, 1, 1, 1), vec![1.0, 2.0], false);
        let w = t(Shape5::new(1, 3, 1, 1, 1), vec![1.0; 3], false);
        assert!(matches!(
            conv3d(&x, &w, None, (1, 1, 1), (0, 0, 0)),
            Err(CoreError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn conv_backward_zero_upstream() {
        let x = t(Shape5::new(1, 1, 2, 2, 2), vec![1.0; 8], true);
        let w = t(Shape5::new(1, 1, 1, 1, 1), vec![2.0], true);
        let y = conv3d(&x, &w, None, (1, 1, 1), (0, 0, 0)).unwrap();
        // Zero-coefficient reduction means zero upstream gradient everywhere.
        let s = weighted_sum(&y, &vec![0.0; 8]).unwrap();
        s.backward().unwrap();
        assert!(x.grad().unwrap().iter().all(|&g| g == 0.0));
        assert!(w.grad().unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn conv_backward_identity_kernel_passes_grad() {
        let x = t(Shape5::new(1, 1, 1, 2, 2), vec![1., 2., 3., 4.], true);
        let w = t(Shape5::new(1, 1, 1, 1, 1), vec![1.0], false);
        let y = conv3d(&x, &w, None, (1, 1, 1), (0, 0, 0)).unwrap();
        let coeffs = vec![0.5, -1.0, 2.0, 0.25];
        let s = weighted_sum(&y, &coeffs).unwrap();
        s.backward().unwrap();
        assert_eq!(x.grad().unwrap(), coeffs);
    }

    #[test]
    fn leaky_relu_fixtures() {
        let x = t(Shape5::new(1, 1, 1, 1, 3), vec![2.0, -2.0, 0.0], true);
        let y = leaky_relu(&x, 0.1);
        assert_eq!(y.values(), &[2.0, -0.2, 0.0]);
        let s = weighted_sum(&y, &[1.0, 1.0, 1.0]).unwrap();
        s.backward().unwrap();
        // Gradient at x = -3 (any negative) is the slope.
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.1, 0.1]);
    }

    #[test]
    fn dropout_rate_zero_and_eval_are_identity() {
        let x = t(Shape5::new(1, 1, 1, 1, 4), vec![1., 2., 3., 4.], false);
        let y = dropout(&x, 0.0, true, 7).unwrap();
        assert_eq!(y.values(), x.values());
        let y = dropout(&x, 0.9, false, 7).unwrap();
        assert_eq!(y.values(), x.values());
    }

    #[test]
    fn dropout_rejects_rate_one() {
        let x = t(Shape5::scalar(), vec![1.0], false);
        assert!(matches!(
            dropout(&x, 1.0, true, 0),
            Err(CoreError::InvalidConfig(_))
        ));
    }

    #[test]
    fn dropout_statistics() {
        let n = 1_000_000usize;
        let shape = Shape5::new(1, 1, 1, 1000, 1000);
        let x = t(shape, vec![1.0; n], false);
        let y = dropout(&x, 0.5, true, 42).unwrap();
        let survivors = y.values().iter().filter(|&&v| v != 0.0).count();
        let frac = survivors as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.01, "survivor fraction {}", frac);
        let mean: f64 = y.values().iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "scaled mean {}", mean);
    }

    #[test]
    fn dropout_deterministic_given_seed() {
        let x = t(Shape5::new(1, 1, 1, 10, 10), vec![1.0; 100], false);
        let a = dropout(&x, 0.3, true, 5).unwrap();
        let b = dropout(&x, 0.3, true, 5).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn maxpool_single_frame_is_identity() {
        let x = t(Shape5::new(1, 2, 1, 1, 2), vec![1., 2., 3., 4.], false);
        let y = framewise_maxpool(&x);
        assert_eq!(y.values(), x.values());
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = t(Shape5::new(1, 1, 3, 1, 1), vec![1.0, 5.0, 3.0], true);
        let y = framewise_maxpool(&x);
        assert_eq!(y.values(), &[5.0]);
        let s = weighted_sum(&y, &[1.0]).unwrap();
        s.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn maxpool_tie_breaks_to_first_frame() {
        let x = t(Shape5::new(1, 1, 2, 1, 1), vec![2.0, 2.0], true);
        let y = framewise_maxpool(&x);
        let s = weighted_sum(&y, &[1.0]).unwrap();
        s.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn maxpool_invariant_under_frame_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (d, hw) = (5, 12);
        let base = rand_vec(&mut rng, d * hw);
        let x = t(Shape5::new(1, 1, d, 3, 4), base.clone(), false);
        let y0 = framewise_maxpool(&x);
        let perm = [4usize, 2, 0, 3, 1];
        let mut permuted = vec![0.0; d * hw];
        for (dst, &src) in perm.iter().enumerate() {
            permuted[dst * hw..(dst + 1) * hw].copy_from_slice(&base[src * hw..(src + 1) * hw]);
        }
        let y1 = framewise_maxpool(&t(Shape5::new(1, 1, d, 3, 4), permuted, false));
        assert_eq!(y0.values(), y1.values());
    }

    #[test]
    fn l2_normalize_fixtures() {
        let x = t(Shape5::new(1, 3, 1, 1, 1), vec![0.0, 0.0, 2.0], false);
        let y = l2_normalize_channels(&x).unwrap();
        assert_eq!(y.values(), &[0.0, 0.0, 1.0]);

        // Already-unit input is unchanged.
        let x = t(Shape5::new(1, 3, 1, 1, 1), vec![0.6, 0.0, 0.8], false);
        let y = l2_normalize_channels(&x).unwrap();
        assert!((y.values()[0] - 0.6).abs() < 1e-15);
        assert!((y.values()[2] - 0.8).abs() < 1e-15);

        // Near-zero pixel collapses to (0,0,0).
        let x = t(Shape5::new(1, 3, 1, 1, 1), vec![1e-10, 0.0, 0.0], true);
        let y = l2_normalize_channels(&x).unwrap();
        assert_eq!(y.values(), &[0.0, 0.0, 0.0]);
        let s = weighted_sum(&y, &[1.0, 1.0, 1.0]).unwrap();
        s.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn cosine_loss_fixtures() {
        let z = normalize_vec(Vec3::new(0.0, 0.0, 1.0)).unwrap();
        let gt = NormalMap::filled(2, 1, z);
        let mask = Mask::full(2, 1);

        // pred == gt -> 0
        let pred = t(Shape5::new(1, 3, 1, 1, 2), vec![0., 0., 0., 0., 1., 1.], true);
        let loss = cosine_loss(&pred, &gt, &mask).unwrap();
        assert_eq!(loss.scalar().unwrap(), 0.0);
        loss.backward().unwrap();
        let g = pred.grad().unwrap();
        // d/dpred of mean(1 - dot) is -gt/m on masked pixels.
        assert_eq!(g, vec![0.0, 0.0, 0.0, 0.0, -0.5, -0.5]);

        // orthogonal -> 1
        let pred = t(Shape5::new(1, 3, 1, 1, 2), vec![1., 1., 0., 0., 0., 0.], false);
        let loss = cosine_loss(&pred, &gt, &mask).unwrap();
        assert_eq!(loss.scalar().unwrap(), 1.0);

        // opposite -> 2
        let pred = t(Shape5::new(1, 3, 1, 1, 2), vec![0., 0., 0., 0., -1., -1.], false);
        let loss = cosine_loss(&pred, &gt, &mask).unwrap();
        assert_eq!(loss.scalar().unwrap(), 2.0);
    }

    #[test]
    fn narrow_reshape_roundtrip_gradient() {
        let x = t(Shape5::new(1, 1, 1, 1, 6), vec![1., 2., 3., 4., 5., 6.], true);
        let y = narrow_reshape(&x, 2, Shape5::new(1, 1, 1, 1, 3)).unwrap();
        assert_eq!(y.values(), &[3.0, 4.0, 5.0]);
        let s = weighted_sum(&y, &[1.0, 10.0, 100.0]).unwrap();
        s.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 1.0, 10.0, 100.0, 0.0]);
    }
}
