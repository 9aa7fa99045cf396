//! Broadcasting binary arithmetic, unary maps and reductions.

use crate::error::{shape_err, Result};

use super::tape::{Backward, BackwardCtx};
use super::{numel, Scalar, Tensor, Var};

/// Numpy-style right-aligned broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out` (right-aligned), zero where broadcast.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let offset = nd - shape.len();
    let mut strides = vec![0; nd];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of `out`.
pub(crate) fn zip_broadcast(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(out);
    if a == out && b == out {
        (0..n).for_each(|i| f(i, i, i));
        return;
    }
    let na = numel(a);
    let nb = numel(b);
    if a == out && out.ends_with(trim_leading_ones(b)) {
        (0..n).for_each(|i| f(i, i, i % nb));
        return;
    }
    if b == out && out.ends_with(trim_leading_ones(a)) {
        (0..n).for_each(|i| f(i, i % na, i));
        return;
    }
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let nd = out.len();
    let inner = out[nd - 1];
    let (ia_step, ib_step) = (sa[nd - 1], sb[nd - 1]);
    let mut idx = vec![0usize; nd - 1];
    let mut i = 0;
    let (mut base_a, mut base_b) = (0usize, 0usize);
    while i < n {
        let (mut oa, mut ob) = (base_a, base_b);
        for _ in 0..inner {
            f(i, oa, ob);
            i += 1;
            oa += ia_step;
            ob += ib_step;
        }
        // advance the outer multi-index
        let mut d = nd - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            base_a += sa[d];
            base_b += sb[d];
            if idx[d] < out[d] {
                break;
            }
            base_a -= sa[d] * out[d];
            base_b -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn trim_leading_ones(s: &[usize]) -> &[usize] {
    let k = s.iter().take_while(|&&d| d == 1).count();
    &s[k..]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

struct Binary {
    kind: BinaryKind,
}

impl<T: Scalar> Backward<T> for Binary {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        let g = ctx.grad;
        let out_shape = g.shape();
        let gd = g.data();
        let mut ga = ctx.needs[0].then(|| vec![T::zero(); a.numel()]);
        let mut gb = ctx.needs[1].then(|| vec![T::zero(); b.numel()]);
        let (ad, bd) = (a.data(), b.data());
        match self.kind {
            BinaryKind::Add | BinaryKind::Sub => {
                let sign = if self.kind == BinaryKind::Sub {
                    -T::one()
                } else {
                    T::one()
                };
                zip_broadcast(out_shape, a.shape(), b.shape(), |i, ia, ib| {
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += gd[i];
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] += sign * gd[i];
                    }
                });
            }
            BinaryKind::Mul => {
                zip_broadcast(out_shape, a.shape(), b.shape(), |i, ia, ib| {
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += gd[i] * bd[ib];
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] += gd[i] * ad[ia];
                    }
                });
            }
            BinaryKind::Div => {
                zip_broadcast(out_shape, a.shape(), b.shape(), |i, ia, ib| {
                    let inv = T::one() / bd[ib];
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += gd[i] * inv;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] -= gd[i] * ad[ia] * inv * inv;
                    }
                });
            }
        }
        vec![
            ga.map(|v| Tensor::from_parts(a.shape().to_vec(), v)),
            gb.map(|v| Tensor::from_parts(b.shape().to_vec(), v)),
        ]
    }
}

struct Affine<T> {
    scale: T,
}

impl<T: Scalar> Backward<T> for Affine<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(ctx.grad.map(|g| g * self.scale))]
    }
}

struct Gelu;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    x * half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = T::from_f64(FRAC_1_SQRT_2PI) * (-half * x * x).exp();
    cdf + x * pdf
}

impl<T: Scalar> Backward<T> for Gelu {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let x = ctx.inputs[0].data();
        let data = ctx
            .grad
            .data()
            .iter()
            .zip(x)
            .map(|(&g, &x)| g * gelu_grad_scalar(x))
            .collect();
        vec![Some(Tensor::from_parts(ctx.grad.shape().to_vec(), data))]
    }
}

struct SumAll;

impl<T: Scalar> Backward<T> for SumAll {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(Tensor::full(ctx.inputs[0].shape().to_vec(), ctx.grad.item()))]
    }
}

struct SumAxis {
    axis: usize,
}

/// (outer, axis extent, inner) factorisation of `shape` around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

impl<T: Scalar> Backward<T> for SumAxis {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let shape = ctx.inputs[0].shape();
        let (outer, n, inner) = split_axis(shape, self.axis);
        let g = ctx.grad.data();
        let mut out = vec![T::zero(); outer * n * inner];
        for o in 0..outer {
            for k in 0..n {
                let dst = &mut out[(o * n + k) * inner..(o * n + k + 1) * inner];
                dst.copy_from_slice(&g[o * inner..(o + 1) * inner]);
            }
        }
        vec![Some(Tensor::from_parts(shape.to_vec(), out))]
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    fn binary(self, other: Var<'t, T>, kind: BinaryKind) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = other.value();
        let out_shape = broadcast_shape(a.shape(), b.shape())?;
        let mut out = vec![T::zero(); numel(&out_shape)];
        let (ad, bd) = (a.data(), b.data());
        match kind {
            BinaryKind::Add => {
                zip_broadcast(&out_shape, a.shape(), b.shape(), |i, x, y| {
                    out[i] = ad[x] + bd[y]
                })
            }
            BinaryKind::Sub => {
                zip_broadcast(&out_shape, a.shape(), b.shape(), |i, x, y| {
                    out[i] = ad[x] - bd[y]
                })
            }
            BinaryKind::Mul => {
                zip_broadcast(&out_shape, a.shape(), b.shape(), |i, x, y| {
                    out[i] = ad[x] * bd[y]
                })
            }
            BinaryKind::Div => {
                zip_broadcast(&out_shape, a.shape(), b.shape(), |i, x, y| {
                    out[i] = ad[x] / bd[y]
                })
            }
        }
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        self.tape().push(
            name,
            Tensor::from_parts(out_shape, out),
            &[self, other],
            Binary { kind },
        )
    }

    /// Elementwise sum with broadcasting.
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Sub)
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Div)
    }

    /// `x * scale + shift`.
    pub fn affine(self, scale: f64, shift: f64) -> Result<Var<'t, T>> {
        let (s, c) = (T::from_f64(scale), T::from_f64(shift));
        let out = self.value().map(|v| v * s + c);
        self.tape().push("affine", out, &[self], Affine { scale: s })
    }

    pub fn scale(self, s: f64) -> Result<Var<'t, T>> {
        self.affine(s, 0.0)
    }

    /// Exact GELU, `x * Phi(x)` with the Gaussian CDF.
    pub fn gelu(self) -> Result<Var<'t, T>> {
        let out = self.value().map(gelu_scalar);
        self.tape().push("gelu", out, &[self], Gelu)
    }

    /// Sum of all elements as a scalar.
    pub fn sum(self) -> Result<Var<'t, T>> {
        let out = Tensor::scalar(self.value().sum());
        self.tape().push("sum", out, &[self], SumAll)
    }

    pub fn mean(self) -> Result<Var<'t, T>> {
        let n = self.value().numel();
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(shape_err!("sum_axis {axis} on shape {shape:?}"));
        }
        let (outer, n, inner) = split_axis(shape, axis);
        let xd = x.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for k in 0..n {
                let src = &xd[(o * n + k) * inner..(o * n + k + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        self.tape().push(
            "sum_axis",
            Tensor::from_parts(out_shape, out),
            &[self],
            SumAxis { axis },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]).unwrap(), vec![2, 3, 4]);
        assert!(broadcast_shape(&[2, 3], &[2]).is_err());
    }

    #[test]
    fn general_broadcast_matches_manual() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_fn([2, 1, 3], |i| i as f64));
        let b = tape.constant(Tensor::from_fn([4, 1], |i| 10.0 * i as f64));
        let c = a.add(b).unwrap().value();
        assert_eq!(c.shape(), &[2, 4, 3]);
        for i in 0..2 {
            for j in 0..4 {
                for k in 0..3 {
                    let want = (i * 3 + k) as f64 + 10.0 * j as f64;
                    assert_eq!(c.at(&[i, j, k]), want);
                }
            }
        }
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert!((gelu_scalar(10.0f64) - 10.0).abs() < 1e-4);
        assert!(gelu_scalar(-10.0f64).abs() < 1e-4);
        // x * Phi(x) at x = 1: Phi(1) = 0.841344746...
        assert!((gelu_scalar(1.0f64) - 0.841_344_746_068_543).abs() < 1e-12);
    }

    #[test]
    fn sum_axis_middle() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn([2, 3, 2], |i| i as f64));
        let s = x.sum_axis(1).unwrap().value();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[6.0, 9.0, 24.0, 27.0]);
    }
}
