//! Batched matrix products and the affine map over the last axis.

use crate::error::{shape_err, Result};

use super::elementwise::{broadcast_shape, zip_broadcast};
use super::scalar::gemm;
use super::tape::{Backward, BackwardCtx};
use super::{numel, Scalar, Tensor, Var};

struct MatMul {
    m: usize,
    k: usize,
    n: usize,
    batch: Vec<usize>,
}

/// Pairs of (out, a, b) batch indices for broadcast batch dimensions.
fn batch_pairs(out: &[usize], a: &[usize], b: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut pairs = Vec::with_capacity(numel(out));
    zip_broadcast(out, a, b, |i, ia, ib| pairs.push((i, ia, ib)));
    pairs
}

impl<T: Scalar> Backward<T> for MatMul {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        let (m, k, n) = (self.m, self.k, self.n);
        let a_batch = &a.shape()[..a.ndim() - 2];
        let b_batch = &b.shape()[..b.ndim() - 2];
        let pairs = batch_pairs(&self.batch, a_batch, b_batch);
        let g = ctx.grad.data();
        let mut ga = ctx.needs[0].then(|| vec![T::zero(); a.numel()]);
        let mut gb = ctx.needs[1].then(|| vec![T::zero(); b.numel()]);
        for &(io, ia, ib) in &pairs {
            let gs = &g[io * m * n..(io + 1) * m * n];
            if let Some(ga) = ga.as_mut() {
                // dA = G @ B^T
                let bs = &b.data()[ib * k * n..(ib + 1) * k * n];
                gemm(false, true, m, n, k, gs, bs, &mut ga[ia * m * k..(ia + 1) * m * k], true);
            }
            if let Some(gb) = gb.as_mut() {
                // dB = A^T @ G
                let as_ = &a.data()[ia * m * k..(ia + 1) * m * k];
                gemm(true, false, k, m, n, as_, gs, &mut gb[ib * k * n..(ib + 1) * k * n], true);
            }
        }
        vec![
            ga.map(|v| Tensor::from_parts(a.shape().to_vec(), v)),
            gb.map(|v| Tensor::from_parts(b.shape().to_vec(), v)),
        ]
    }
}

struct Linear {
    rows: usize,
    fan_in: usize,
    fan_out: usize,
    has_bias: bool,
}

impl<T: Scalar> Backward<T> for Linear {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
        let g = ctx.grad.data();
        let (r, i, o) = (self.rows, self.fan_in, self.fan_out);
        let gx = ctx.needs[0].then(|| {
            // dX = G @ W, G: r x o, W: o x i
            let mut buf = vec![T::zero(); r * i];
            gemm(false, false, r, o, i, g, w.data(), &mut buf, false);
            Tensor::from_parts(x.shape().to_vec(), buf)
        });
        let gw = ctx.needs[1].then(|| {
            // dW = G^T @ X
            let mut buf = vec![T::zero(); o * i];
            gemm(true, false, o, r, i, g, x.data(), &mut buf, false);
            Tensor::from_parts(w.shape().to_vec(), buf)
        });
        let mut out = vec![gx, gw];
        if self.has_bias {
            out.push(ctx.needs[2].then(|| {
                let mut buf = vec![T::zero(); o];
                for row in g.chunks_exact(o) {
                    buf.iter_mut().zip(row).for_each(|(b, &v)| *b += v);
                }
                Tensor::from_parts(vec![o], buf)
            }));
        }
        out
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Batched matrix product `[..., m, k] x [..., k, n] -> [..., m, n]`.
    ///
    /// Leading batch axes broadcast; a 2-D operand is shared by every batch.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(shape_err!("matmul of {sa:?} and {sb:?}"));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let a_batch = &sa[..sa.len() - 2];
        let b_batch = &sb[..sb.len() - 2];
        let batch = broadcast_shape(a_batch, b_batch)
            .map_err(|_| shape_err!("matmul batch dims of {sa:?} and {sb:?}"))?;
        let nb = numel(&batch);
        let mut out = vec![T::zero(); nb * m * n];
        for (io, ia, ib) in batch_pairs(&batch, a_batch, b_batch) {
            gemm(
                false,
                false,
                m,
                k,
                n,
                &a.data()[ia * m * k..(ia + 1) * m * k],
                &b.data()[ib * k * n..(ib + 1) * k * n],
                &mut out[io * m * n..(io + 1) * m * n],
                false,
            );
        }
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);
        self.tape().push(
            "matmul",
            Tensor::from_parts(out_shape, out),
            &[self, other],
            MatMul { m, k, n, batch },
        )
    }

    /// Affine map over the last axis: `x @ W^T + b` with `W: [out, in]`.
    pub fn linear(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        let x = self.value();
        let w = weight.value();
        let xs = x.shape();
        if w.ndim() != 2 || xs.is_empty() || xs[xs.len() - 1] != w.shape()[1] {
            return Err(shape_err!(
                "linear of input {xs:?} with weight {:?}",
                w.shape()
            ));
        }
        let (fan_out, fan_in) = (w.shape()[0], w.shape()[1]);
        let rows = x.numel() / fan_in;
        let mut out = vec![T::zero(); rows * fan_out];
        gemm(false, true, rows, fan_in, fan_out, x.data(), w.data(), &mut out, false);
        let mut inputs = vec![self, weight];
        if let Some(b) = bias {
            let bv = b.value();
            if bv.shape() != [fan_out] {
                return Err(shape_err!(
                    "linear bias {:?} for {fan_out} outputs",
                    bv.shape()
                ));
            }
            for row in out.chunks_exact_mut(fan_out) {
                row.iter_mut().zip(bv.data()).for_each(|(o, &b)| *o += b);
            }
            inputs.push(b);
        }
        let mut out_shape = xs.to_vec();
        *out_shape.last_mut().unwrap() = fan_out;
        self.tape().push(
            "linear",
            Tensor::from_parts(out_shape, out),
            &inputs,
            Linear {
                rows,
                fan_in,
                fan_out,
                has_bias: bias.is_some(),
            },
        )
    }
}
