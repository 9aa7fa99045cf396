//! Depthwise convolution on channels-last maps.

use crate::error::{shape_err, Result};

use super::tape::{Backward, BackwardCtx};
use super::{Scalar, Tensor, Var};

#[derive(Clone, Copy)]
struct Dims {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    pad: usize,
}

/// Valid output rows `[lo, hi)` for kernel tap `t`: `0 <= o + t - pad < size`.
fn span(size: usize, t: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(t);
    let hi = (size + pad).saturating_sub(t).min(size);
    (lo, hi.max(lo))
}

/// `[C, 1, k, k] -> [k, k, C]`.
fn taps_last<T: Scalar>(w: &[T], c: usize, kk: usize) -> Vec<T> {
    let mut out = vec![T::zero(); w.len()];
    for ch in 0..c {
        for t in 0..kk {
            out[t * c + ch] = w[ch * kk + t];
        }
    }
    out
}

fn forward<T: Scalar>(d: Dims, x: &[T], wt: &[T], out: &mut [T]) {
    let Dims { n, h, w, c, k, pad } = d;
    for b in 0..n {
        let xb = &x[b * h * w * c..][..h * w * c];
        let ob = &mut out[b * h * w * c..][..h * w * c];
        for ky in 0..k {
            let (y0, y1) = span(h, ky, pad);
            for kx in 0..k {
                let (x0, x1) = span(w, kx, pad);
                let tap = &wt[(ky * k + kx) * c..][..c];
                for oy in y0..y1 {
                    let iy = oy + ky - pad;
                    for ox in x0..x1 {
                        let ix = ox + kx - pad;
                        let src = &xb[(iy * w + ix) * c..][..c];
                        let dst = &mut ob[(oy * w + ox) * c..][..c];
                        for ((o, &v), &t) in dst.iter_mut().zip(src).zip(tap) {
                            *o += v * t;
                        }
                    }
                }
            }
        }
    }
}

struct Rule<T> {
    dims: Dims,
    taps: Vec<T>,
    has_bias: bool,
}

impl<T: Scalar> Backward<T> for Rule<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let Dims { n, h, w, c, k, pad } = self.dims;
        let x = ctx.inputs[0].data();
        let g = ctx.grad.data();
        let mut dx = ctx.needs[0].then(|| vec![T::zero(); x.len()]);
        let mut dwt = ctx.needs[1].then(|| vec![T::zero(); k * k * c]);
        for b in 0..n {
            let base = b * h * w * c;
            for ky in 0..k {
                let (y0, y1) = span(h, ky, pad);
                for kx in 0..k {
                    let (x0, x1) = span(w, kx, pad);
                    let t = (ky * k + kx) * c;
                    for oy in y0..y1 {
                        let iy = oy + ky - pad;
                        for ox in x0..x1 {
                            let ix = ox + kx - pad;
                            let gi = base + (oy * w + ox) * c;
                            let xi = base + (iy * w + ix) * c;
                            let gr = &g[gi..gi + c];
                            if let Some(dx) = dx.as_mut() {
                                let tap = &self.taps[t..t + c];
                                for ((o, &gv), &tv) in dx[xi..xi + c].iter_mut().zip(gr).zip(tap) {
                                    *o += gv * tv;
                                }
                            }
                            if let Some(dwt) = dwt.as_mut() {
                                let xr = &x[xi..xi + c];
                                for ((o, &gv), &xv) in dwt[t..t + c].iter_mut().zip(gr).zip(xr) {
                                    *o += gv * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
        let kk = k * k;
        let dw = dwt.map(|dwt| {
            let mut out = vec![T::zero(); dwt.len()];
            for ch in 0..c {
                for t in 0..kk {
                    out[ch * kk + t] = dwt[t * c + ch];
                }
            }
            Tensor::from_parts(vec![c, 1, k, k], out)
        });
        let mut grads = vec![dx.map(|v| Tensor::from_parts(ctx.inputs[0].shape().to_vec(), v)), dw];
        if self.has_bias {
            grads.push(ctx.needs[2].then(|| {
                let mut db = vec![T::zero(); c];
                for row in g.chunks_exact(c) {
                    db.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
                }
                Tensor::from_parts(vec![c], db)
            }));
        }
        grads
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Stride-1 depthwise cross-correlation of a channels-last map
    /// `[N, H, W, C]` with weights `[C, 1, k, k]` and zero padding `k / 2`.
    ///
    /// Equivalent to `conv2d` with `groups == C` on the NCHW permutation.
    pub fn depthwise_conv_nhwc(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        let x = self.value();
        let wv = weight.value();
        let (xs, ws) = (x.shape(), wv.shape());
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[3] || ws[1] != 1 || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(shape_err!(
                "depthwise conv of {xs:?} needs an odd square [C, 1, k, k] kernel, got {ws:?}"
            ));
        }
        let dims = Dims { n: xs[0], h: xs[1], w: xs[2], c: xs[3], k: ws[2], pad: ws[2] / 2 };
        let taps = taps_last(wv.data(), dims.c, dims.k * dims.k);
        let mut out = vec![T::zero(); x.numel()];
        forward(dims, x.data(), &taps, &mut out);
        let mut inputs = vec![self, weight];
        if let Some(b) = bias {
            let bv = b.value();
            if bv.shape() != [dims.c] {
                return Err(shape_err!("bias {:?} for {} channels", bv.shape(), dims.c));
            }
            for row in out.chunks_exact_mut(dims.c) {
                row.iter_mut().zip(bv.data()).for_each(|(o, &v)| *o += v);
            }
            inputs.push(b);
        }
        self.tape().push(
            "depthwise_conv_nhwc",
            Tensor::from_parts(xs.to_vec(), out),
            &inputs,
            Rule { dims, taps, has_bias: bias.is_some() },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn matches_grouped_conv_on_permuted_input() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn([2, 5, 3, 4], |i| ((i * 7919) % 31) as f64 - 15.0));
        for k in [1, 3, 7] {
            let w = tape.constant(Tensor::from_fn([4, 1, k, k], |i| (i as f64 * 0.37).sin()));
            let b = tape.constant(Tensor::from_f64([4], &[0.5, -1.0, 0.0, 2.0]).unwrap());
            let fast = x.depthwise_conv_nhwc(w, Some(b)).unwrap().value();
            let slow = x
                .permute(&[0, 3, 1, 2])
                .unwrap()
                .conv2d(w, Some(b), 1, k / 2, 4)
                .unwrap()
                .permute(&[0, 2, 3, 1])
                .unwrap()
                .value();
            assert!(fast.max_abs_diff(&slow) < 1e-12, "k = {k}");
        }
    }

    #[test]
    fn rejects_even_kernel() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros([1, 4, 4, 2]));
        let w = tape.constant(Tensor::zeros([2, 1, 2, 2]));
        assert!(x.depthwise_conv_nhwc(w, None).is_err());
    }
}
