//! Shape and layout operations: reshape, permute, concat, slice, gather.

use std::sync::Arc;

use crate::error::{shape_err, Result};

use super::elementwise::split_axis;
use super::tape::{Backward, BackwardCtx};
use super::{numel, strides, Scalar, Tensor, Var};

struct Reshape;

impl<T: Scalar> Backward<T> for Reshape {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(Tensor::from_parts(
            ctx.inputs[0].shape().to_vec(),
            ctx.grad.data().to_vec(),
        ))]
    }
}

/// Copies `src` (shaped `shape`) into a new buffer laid out as `perm` of its axes.
pub(crate) fn permute_data<T: Copy>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let nd = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    if nd == 0 {
        out.extend_from_slice(src);
        return out;
    }
    let inner = out_shape[nd - 1];
    let inner_stride = src_strides[nd - 1];
    let mut idx = vec![0usize; nd - 1];
    let mut base = 0usize;
    while out.len() < n {
        if inner_stride == 1 {
            out.extend_from_slice(&src[base..base + inner]);
        } else {
            let mut o = base;
            for _ in 0..inner {
                out.push(src[o]);
                o += inner_stride;
            }
        }
        let mut d = nd - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            base += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

struct Permute {
    inverse: Vec<usize>,
}

impl<T: Scalar> Backward<T> for Permute {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let data = permute_data(ctx.grad.data(), ctx.grad.shape(), &self.inverse);
        vec![Some(Tensor::from_parts(ctx.inputs[0].shape().to_vec(), data))]
    }
}

struct Concat {
    axis: usize,
}

impl<T: Scalar> Backward<T> for Concat {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = ctx.grad.data();
        let (outer, total, inner) = split_axis(ctx.grad.shape(), self.axis);
        let mut start = 0;
        ctx.inputs
            .iter()
            .zip(&ctx.needs)
            .map(|(x, &need)| {
                let n = x.shape()[self.axis];
                let out = need.then(|| {
                    let mut buf = Vec::with_capacity(x.numel());
                    for o in 0..outer {
                        let off = (o * total + start) * inner;
                        buf.extend_from_slice(&g[off..off + n * inner]);
                    }
                    Tensor::from_parts(x.shape().to_vec(), buf)
                });
                start += n;
                out
            })
            .collect()
    }
}

struct Slice {
    axis: usize,
    start: usize,
}

impl<T: Scalar> Backward<T> for Slice {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let in_shape = ctx.inputs[0].shape();
        let (outer, total, inner) = split_axis(in_shape, self.axis);
        let len = ctx.grad.shape()[self.axis];
        let g = ctx.grad.data();
        let mut out = vec![T::zero(); ctx.inputs[0].numel()];
        for o in 0..outer {
            let dst = (o * total + self.start) * inner;
            out[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
        }
        vec![Some(Tensor::from_parts(in_shape.to_vec(), out))]
    }
}

struct Gather {
    index: Arc<Vec<usize>>,
}

impl<T: Scalar> Backward<T> for Gather {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let mut out = vec![T::zero(); ctx.inputs[0].numel()];
        for (&src, &g) in self.index.iter().zip(ctx.grad.data()) {
            out[src] += g;
        }
        vec![Some(Tensor::from_parts(ctx.inputs[0].shape().to_vec(), out))]
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let shape = shape.into();
        let x = self.value();
        if numel(&shape) != x.numel() || shape.contains(&0) {
            return Err(shape_err!("cannot reshape {:?} into {shape:?}", x.shape()));
        }
        let out = Tensor::from_parts(shape, x.data().to_vec());
        self.tape().push("reshape", out, &[self], Reshape)
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let nd = x.ndim();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err!("invalid permutation {perm:?} for shape {:?}", x.shape()));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
        let data = permute_data(x.data(), x.shape(), perm);
        let mut inverse = vec![0; nd];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.tape().push(
            "permute",
            Tensor::from_parts(out_shape, data),
            &[self],
            Permute { inverse },
        )
    }

    /// Swaps the last two axes.
    pub fn transpose_last(self) -> Result<Var<'t, T>> {
        let nd = self.shape().len();
        if nd < 2 {
            return Err(shape_err!("transpose needs at least 2 axes"));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(&perm)
    }

    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape();
        if axis >= base.len() {
            return Err(shape_err!("concat axis {axis} on shape {base:?}"));
        }
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err!("concat of {base:?} and {s:?} along axis {axis}"));
            }
            total += s[axis];
        }
        let mut out_shape = base.to_vec();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for v in &values {
                let n = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * n..(o + 1) * n]);
            }
        }
        first.tape().push(
            "concat",
            Tensor::from_parts(out_shape, out),
            parts,
            Concat { axis },
        )
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(shape_err!(
                "slice [{start}, {}) on axis {axis} of {shape:?}",
                start + len
            ));
        }
        let (outer, total, inner) = split_axis(shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * total + start) * inner;
            out.extend_from_slice(&x.data()[off..off + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        self.tape().push(
            "slice",
            Tensor::from_parts(out_shape, out),
            &[self],
            Slice { axis, start },
        )
    }

    /// `out.flat[i] = self.flat[index[i]]`, reshaped to `shape`.
    ///
    /// Indices may repeat; gradients scatter-add back.
    pub fn gather(self, index: Arc<Vec<usize>>, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let shape = shape.into();
        let x = self.value();
        if numel(&shape) != index.len() {
            return Err(shape_err!(
                "gather of {} indices into shape {shape:?}",
                index.len()
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= x.numel()) {
            return Err(shape_err!("gather index {bad} out of range for {:?}", x.shape()));
        }
        let xd = x.data();
        let out = index.iter().map(|&i| xd[i]).collect();
        self.tape().push(
            "gather",
            Tensor::from_parts(shape, out),
            &[self],
            Gather { index },
        )
    }
}
