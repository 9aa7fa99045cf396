//! 2-D convolution (cross-correlation, zero padding) and its transpose.
//!
//! Dense and grouped convolutions are lowered to im2col + GEMM. The
//! depthwise case (`groups == C_in == C_out`) runs a direct kernel.

use crate::error::{config_err, shape_err, Result};

use super::scalar::gemm;
use super::tape::{Backward, BackwardCtx};
use super::{Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

impl Geometry {
    fn depthwise(&self) -> bool {
        self.groups == self.c_in && self.c_out == self.c_in && self.groups > 1
    }
}

fn out_extent(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (size + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

/// Unfolds one `[c, h, w]` image into `[c * kh * kw, ho * wo]` columns.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let plane = ho * wo;
    for ci in 0..c {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut cols[((ci * kh + ky) * kw + kx) * plane..][..plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into `[c, h, w]`.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [T],
) {
    let plane = ho * wo;
    for ci in 0..c {
        let xc = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &cols[((ci * kh + ky) * kw + kx) * plane..][..plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut xc[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in row[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel tap `k`.
fn tap_range(out: usize, size: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // need 0 <= o*stride + k - pad < size
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if size + pad > k {
        ((size + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn depthwise_forward<T: Scalar>(g: &Geometry, x: &[T], w: &[T], out: &mut [T]) {
    let (h, wd, ho, wo, s, p) = (g.h, g.w, g.ho, g.wo, g.stride, g.pad);
    for n in 0..g.n {
        for c in 0..g.c_in {
            let xc = &x[(n * g.c_in + c) * h * wd..][..h * wd];
            let oc = &mut out[(n * g.c_in + c) * ho * wo..][..ho * wo];
            let kc = &w[c * g.kh * g.kw..][..g.kh * g.kw];
            for ky in 0..g.kh {
                let (oy0, oy1) = tap_range(ho, h, ky, s, p);
                for kx in 0..g.kw {
                    let (ox0, ox1) = tap_range(wo, wd, kx, s, p);
                    let k = kc[ky * g.kw + kx];
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - p;
                        let row = &xc[iy * wd..(iy + 1) * wd];
                        let dst = &mut oc[oy * wo..(oy + 1) * wo];
                        if s == 1 {
                            let src = &row[ox0 + kx - p..ox1 + kx - p];
                            dst[ox0..ox1]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &v)| *d += k * v);
                        } else {
                            for ox in ox0..ox1 {
                                dst[ox] += k * row[ox * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward<T: Scalar>(
    g: &Geometry,
    x: &[T],
    w: &[T],
    grad: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
) {
    let (h, wd, ho, wo, s, p) = (g.h, g.w, g.ho, g.wo, g.stride, g.pad);
    let kk = g.kh * g.kw;
    let mut dx = dx;
    let mut dw = dw;
    for n in 0..g.n {
        for c in 0..g.c_in {
            let base_in = (n * g.c_in + c) * h * wd;
            let gc = &grad[(n * g.c_in + c) * ho * wo..][..ho * wo];
            for ky in 0..g.kh {
                let (oy0, oy1) = tap_range(ho, h, ky, s, p);
                for kx in 0..g.kw {
                    let (ox0, ox1) = tap_range(wo, wd, kx, s, p);
                    let k = w[c * kk + ky * g.kw + kx];
                    let mut acc = T::zero();
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - p;
                        let grow = &gc[oy * wo..(oy + 1) * wo];
                        let row_off = base_in + iy * wd;
                        if dw.is_some() {
                            let xrow = &x[row_off..row_off + wd];
                            for ox in ox0..ox1 {
                                acc += grow[ox] * xrow[ox * s + kx - p];
                            }
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            let drow = &mut dx[row_off..row_off + wd];
                            for ox in ox0..ox1 {
                                drow[ox * s + kx - p] += grow[ox] * k;
                            }
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[c * kk + ky * g.kw + kx] += acc;
                    }
                }
            }
        }
    }
}

fn grouped_forward<T: Scalar>(g: &Geometry, x: &[T], w: &[T], out: &mut [T]) {
    let cg = g.c_in / g.groups;
    let og = g.c_out / g.groups;
    let kdim = cg * g.kh * g.kw;
    let plane = g.ho * g.wo;
    let direct = g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0;
    let mut cols = if direct { Vec::new() } else { vec![T::zero(); kdim * plane] };
    for n in 0..g.n {
        for grp in 0..g.groups {
            let xg = &x[(n * g.c_in + grp * cg) * g.h * g.w..][..cg * g.h * g.w];
            let src: &[T] = if direct {
                xg
            } else {
                im2col(xg, cg, g.h, g.w, g.kh, g.kw, g.stride, g.pad, g.ho, g.wo, &mut cols);
                &cols
            };
            let wg = &w[grp * og * kdim..][..og * kdim];
            let dst = &mut out[(n * g.c_out + grp * og) * plane..][..og * plane];
            gemm(false, false, og, kdim, plane, wg, src, dst, false);
        }
    }
}

fn grouped_backward<T: Scalar>(
    g: &Geometry,
    x: &[T],
    w: &[T],
    grad: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let cg = g.c_in / g.groups;
    let og = g.c_out / g.groups;
    let kdim = cg * g.kh * g.kw;
    let plane = g.ho * g.wo;
    let direct = g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0;
    let mut cols = if direct { Vec::new() } else { vec![T::zero(); kdim * plane] };
    let mut dcols = vec![T::zero(); kdim * plane];
    for n in 0..g.n {
        for grp in 0..g.groups {
            let x_off = (n * g.c_in + grp * cg) * g.h * g.w;
            let xg = &x[x_off..][..cg * g.h * g.w];
            let gg = &grad[(n * g.c_out + grp * og) * plane..][..og * plane];
            let wg = &w[grp * og * kdim..][..og * kdim];
            if let Some(dw) = dw.as_deref_mut() {
                let src: &[T] = if direct {
                    xg
                } else {
                    im2col(xg, cg, g.h, g.w, g.kh, g.kw, g.stride, g.pad, g.ho, g.wo, &mut cols);
                    &cols
                };
                gemm(false, true, og, plane, kdim, gg, src, &mut dw[grp * og * kdim..][..og * kdim], true);
            }
            if let Some(dx) = dx.as_deref_mut() {
                let dxg = &mut dx[x_off..][..cg * g.h * g.w];
                if direct {
                    gemm(true, false, kdim, og, plane, wg, gg, dxg, true);
                } else {
                    gemm(true, false, kdim, og, plane, wg, gg, &mut dcols, false);
                    col2im(&dcols, cg, g.h, g.w, g.kh, g.kw, g.stride, g.pad, g.ho, g.wo, dxg);
                }
            }
        }
    }
}

fn bias_grad<T: Scalar>(grad: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for b in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            *o += grad[(b * c + ch) * plane..][..plane].iter().copied().sum::<T>();
        }
    }
    out
}

struct Conv2d {
    geo: Geometry,
    has_bias: bool,
}

impl<T: Scalar> Backward<T> for Conv2d {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = &self.geo;
        let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
        let grad = ctx.grad.data();
        let mut dx = ctx.needs[0].then(|| vec![T::zero(); x.numel()]);
        let mut dw = ctx.needs[1].then(|| vec![T::zero(); w.numel()]);
        if g.depthwise() {
            depthwise_backward(g, x.data(), w.data(), grad, dx.as_deref_mut(), dw.as_deref_mut());
        } else {
            grouped_backward(g, x.data(), w.data(), grad, dx.as_deref_mut(), dw.as_deref_mut());
        }
        let mut out = vec![
            dx.map(|v| Tensor::from_parts(x.shape().to_vec(), v)),
            dw.map(|v| Tensor::from_parts(w.shape().to_vec(), v)),
        ];
        if self.has_bias {
            out.push(ctx.needs[2].then(|| {
                Tensor::from_parts(vec![g.c_out], bias_grad(grad, g.n, g.c_out, g.ho * g.wo))
            }));
        }
        out
    }
}

struct ConvTranspose2d {
    geo: Geometry,
    has_bias: bool,
}

impl<T: Scalar> Backward<T> for ConvTranspose2d {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        // Geometry here describes the forward conv from output (h, w) back to input (ho, wo).
        let g = &self.geo;
        let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
        let grad = ctx.grad.data();
        let (c_in, c_out) = (g.c_out, g.c_in);
        let kdim = c_out * g.kh * g.kw;
        let plane = g.ho * g.wo;
        let mut dx = ctx.needs[0].then(|| vec![T::zero(); x.numel()]);
        let mut dw = ctx.needs[1].then(|| vec![T::zero(); w.numel()]);
        let mut cols = vec![T::zero(); kdim * plane];
        for n in 0..g.n {
            let gn = &grad[n * c_out * g.h * g.w..][..c_out * g.h * g.w];
            im2col(gn, c_out, g.h, g.w, g.kh, g.kw, g.stride, g.pad, g.ho, g.wo, &mut cols);
            let xn = &x.data()[n * c_in * plane..][..c_in * plane];
            if let Some(dx) = dx.as_mut() {
                gemm(false, false, c_in, kdim, plane, w.data(), &cols, &mut dx[n * c_in * plane..][..c_in * plane], false);
            }
            if let Some(dw) = dw.as_mut() {
                gemm(false, true, c_in, plane, kdim, xn, &cols, dw, true);
            }
        }
        let mut out = vec![
            dx.map(|v| Tensor::from_parts(x.shape().to_vec(), v)),
            dw.map(|v| Tensor::from_parts(w.shape().to_vec(), v)),
        ];
        if self.has_bias {
            out.push(ctx.needs[2].then(|| {
                Tensor::from_parts(vec![c_out], bias_grad(grad, g.n, c_out, g.h * g.w))
            }));
        }
        out
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    /// 2-D cross-correlation over `[N, C_in, H, W]` with weights
    /// `[C_out, C_in / groups, kh, kw]` and zero padding.
    pub fn conv2d(
        self,
        weight: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let w = weight.value();
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 {
            return Err(shape_err!("conv2d input {xs:?} and weight {ws:?} must be 4-D"));
        }
        if groups == 0 || stride == 0 {
            return Err(config_err!("conv2d groups and stride must be positive"));
        }
        let (n, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, cg, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if c_in % groups != 0 || c_out % groups != 0 {
            return Err(config_err!(
                "conv2d channels ({c_in} in, {c_out} out) not divisible by {groups} groups"
            ));
        }
        if cg != c_in / groups {
            return Err(shape_err!(
                "conv2d weight {ws:?} expects {} input channels per group, input has {c_in}/{groups}",
                cg
            ));
        }
        let (Some(ho), Some(wo)) = (out_extent(h, kh, stride, padding), out_extent(wd, kw, stride, padding)) else {
            return Err(shape_err!(
                "conv2d output extent < 1 for input {xs:?}, kernel {kh}x{kw}, padding {padding}"
            ));
        };
        let geo = Geometry { n, c_in, h, w: wd, c_out, kh, kw, ho, wo, stride, pad: padding, groups };
        let mut out = vec![T::zero(); n * c_out * ho * wo];
        if geo.depthwise() {
            depthwise_forward(&geo, x.data(), w.data(), &mut out);
        } else {
            grouped_forward(&geo, x.data(), w.data(), &mut out);
        }
        let mut inputs = vec![self, weight];
        if let Some(b) = bias {
            add_channel_bias(&mut out, &b.value(), n, c_out, ho * wo)?;
            inputs.push(b);
        }
        self.tape().push(
            "conv2d",
            Tensor::from_parts(vec![n, c_out, ho, wo], out),
            &inputs,
            Conv2d { geo, has_bias: bias.is_some() },
        )
    }

    /// Transposed convolution (adjoint of [`Var::conv2d`]) with weights
    /// `[C_in, C_out, kh, kw]`; output extent `(H - 1) * stride - 2 * padding + kh`.
    pub fn conv_transpose2d(
        self,
        weight: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let w = weight.value();
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[0] {
            return Err(shape_err!("conv_transpose2d input {xs:?} with weight {ws:?}"));
        }
        if stride == 0 {
            return Err(config_err!("conv_transpose2d stride must be positive"));
        }
        let (n, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, kh, kw) = (ws[1], ws[2], ws[3]);
        let span = |size: usize, k: usize| ((size - 1) * stride + k).checked_sub(2 * padding).filter(|&v| v > 0);
        let (Some(ho), Some(wo)) = (span(h, kh), span(wd, kw)) else {
            return Err(shape_err!("conv_transpose2d output extent < 1 for input {xs:?}"));
        };
        // the equivalent forward conv maps (ho, wo) -> (h, w)
        let geo = Geometry { n, c_in: c_out, h: ho, w: wo, c_out: c_in, kh, kw, ho: h, wo: wd, stride, pad: padding, groups: 1 };
        let kdim = c_out * kh * kw;
        let plane = h * wd;
        let mut cols = vec![T::zero(); kdim * plane];
        let mut out = vec![T::zero(); n * c_out * ho * wo];
        for b in 0..n {
            let xb = &x.data()[b * c_in * plane..][..c_in * plane];
            gemm(true, false, kdim, c_in, plane, w.data(), xb, &mut cols, false);
            col2im(&cols, c_out, ho, wo, kh, kw, stride, padding, h, wd, &mut out[b * c_out * ho * wo..][..c_out * ho * wo]);
        }
        let mut inputs = vec![self, weight];
        if let Some(bv) = bias {
            add_channel_bias(&mut out, &bv.value(), n, c_out, ho * wo)?;
            inputs.push(bv);
        }
        self.tape().push(
            "conv_transpose2d",
            Tensor::from_parts(vec![n, c_out, ho, wo], out),
            &inputs,
            ConvTranspose2d { geo, has_bias: bias.is_some() },
        )
    }
}

fn add_channel_bias<T: Scalar>(out: &mut [T], bias: &Tensor<T>, n: usize, c: usize, plane: usize) -> Result<()> {
    if bias.shape() != [c] {
        return Err(shape_err!("bias {:?} for {c} channels", bias.shape()));
    }
    for b in 0..n {
        for (ch, &bv) in bias.data().iter().enumerate() {
            out[(b * c + ch) * plane..][..plane].iter_mut().for_each(|v| *v += bv);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn ones_kernel_counts_overlaps() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones([1, 1, 3, 3]));
        let w = tape.constant(Tensor::ones([1, 1, 3, 3]));
        let y = x.conv2d(w, None, 1, 1, 1).unwrap().value();
        assert_eq!(y.at(&[0, 0, 1, 1]), 9.0);
        for (i, j) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(y.at(&[0, 0, i, j]), 4.0);
        }
        assert_eq!(y.at(&[0, 0, 0, 1]), 6.0);
    }

    #[test]
    fn depthwise_keeps_channels_separate() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64([1, 2, 1, 1], &[3.0, 5.0]).unwrap());
        let w = tape.constant(Tensor::from_f64([2, 1, 1, 1], &[2.0, -1.0]).unwrap());
        let y = x.conv2d(w, None, 1, 0, 2).unwrap().value();
        assert_eq!(y.data(), &[6.0, -5.0]);
    }

    #[test]
    fn strided_depthwise_matches_grouped_path() {
        // Same math through the im2col path by splitting into per-channel convs.
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn([1, 2, 7, 6], |i| ((i * 37) % 11) as f64 - 5.0));
        let w = tape.constant(Tensor::from_fn([2, 1, 3, 3], |i| ((i * 13) % 7) as f64 - 3.0));
        let y = x.conv2d(w, None, 2, 1, 2).unwrap().value();
        for c in 0..2 {
            let xc = x.slice(1, c, 1).unwrap();
            let wc = w.slice(0, c, 1).unwrap();
            let yc = xc.conv2d(wc, None, 2, 1, 1).unwrap().value();
            assert_eq!(yc.shape(), &[1, 1, 4, 3]);
            for i in 0..4 {
                for j in 0..3 {
                    assert_eq!(y.at(&[0, c, i, j]), yc.at(&[0, 0, i, j]));
                }
            }
        }
    }

    #[test]
    fn identity_kernel_is_identity() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn([2, 3, 5, 4], |i| i as f64 * 0.1));
        let mut k = Tensor::<f64>::zeros([3, 1, 3, 3]);
        for c in 0..3 {
            k.data_mut()[c * 9 + 4] = 1.0;
        }
        let y = x.conv2d(tape.constant(k), None, 1, 1, 3).unwrap().value();
        assert_eq!(*y, *x.value());
    }

    #[test]
    fn config_and_shape_errors() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::<f64>::zeros([1, 3, 2, 2]));
        let w = tape.constant(Tensor::<f64>::zeros([2, 1, 3, 3]));
        assert!(matches!(x.conv2d(w, None, 1, 1, 2), Err(crate::Error::Config(_))));
        let w = tape.constant(Tensor::<f64>::zeros([1, 3, 3, 3]));
        assert!(matches!(x.conv2d(w, None, 1, 0, 1), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn transpose_single_pixel_broadcast() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64([1, 1, 1, 1], &[2.5]).unwrap());
        let w = tape.constant(Tensor::ones([1, 1, 2, 2]));
        let y = x.conv_transpose2d(w, None, 2, 0).unwrap().value();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[2.5; 4]);
    }

    #[test]
    fn transpose_then_conv_is_kernel_gram() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64([1, 1, 1, 1], &[3.0]).unwrap());
        let w = tape.constant(Tensor::from_f64([1, 1, 2, 2], &[1.0, 2.0, -1.0, 0.5]).unwrap());
        let up = x.conv_transpose2d(w, None, 2, 0).unwrap();
        let back = up.conv2d(w, None, 2, 0, 1).unwrap().value();
        let gram = 1.0 + 4.0 + 1.0 + 0.25;
        assert_eq!(back.data(), &[3.0 * gram]);
    }

    #[test]
    fn tap_range_matches_bruteforce() {
        for size in 1..9 {
            for k in 0..5 {
                for stride in 1..4 {
                    for pad in 0..3 {
                        let Some(out) = out_extent(size, 5.max(k + 1), stride, pad) else { continue };
                        let (lo, hi) = tap_range(out, size, k, stride, pad);
                        for o in 0..out {
                            let i = (o * stride + k) as isize - pad as isize;
                            let valid = i >= 0 && i < size as isize;
                            assert_eq!(valid, o >= lo && o < hi, "size {size} k {k} s {stride} p {pad} o {o}");
                        }
                    }
                }
            }
        }
    }
}
