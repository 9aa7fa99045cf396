//! Normalisation, softmax and the classification loss.

use crate::error::{shape_err, Result};

use super::tape::{Backward, BackwardCtx};
use super::{Scalar, Tensor, Var};

struct LayerNorm<T> {
    dim: usize,
    xhat: Vec<T>,
    rstd: Vec<T>,
}

impl<T: Scalar> Backward<T> for LayerNorm<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let d = self.dim;
        let gamma = ctx.inputs[1].data();
        let g = ctx.grad.data();
        let inv_d = T::one() / T::from_f64(d as f64);
        let dx = ctx.needs[0].then(|| {
            let mut out = vec![T::zero(); g.len()];
            for (r, ((gr, xr), or)) in g
                .chunks_exact(d)
                .zip(self.xhat.chunks_exact(d))
                .zip(out.chunks_exact_mut(d))
                .enumerate()
            {
                let mut mean_dy = T::zero();
                let mut mean_dy_x = T::zero();
                for j in 0..d {
                    let dy = gr[j] * gamma[j];
                    mean_dy += dy;
                    mean_dy_x += dy * xr[j];
                }
                mean_dy *= inv_d;
                mean_dy_x *= inv_d;
                let rstd = self.rstd[r];
                for j in 0..d {
                    or[j] = rstd * (gr[j] * gamma[j] - mean_dy - xr[j] * mean_dy_x);
                }
            }
            Tensor::from_parts(ctx.inputs[0].shape().to_vec(), out)
        });
        let dgamma = ctx.needs[1].then(|| {
            let mut out = vec![T::zero(); d];
            for (gr, xr) in g.chunks_exact(d).zip(self.xhat.chunks_exact(d)) {
                for j in 0..d {
                    out[j] += gr[j] * xr[j];
                }
            }
            Tensor::from_parts(vec![d], out)
        });
        let dbeta = ctx.needs[2].then(|| {
            let mut out = vec![T::zero(); d];
            for gr in g.chunks_exact(d) {
                out.iter_mut().zip(gr).for_each(|(o, &v)| *o += v);
            }
            Tensor::from_parts(vec![d], out)
        });
        vec![dx, dgamma, dbeta]
    }
}

struct Softmax {
    dim: usize,
}

impl<T: Scalar> Backward<T> for Softmax {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let y = ctx.output.data();
        let g = ctx.grad.data();
        let mut out = vec![T::zero(); y.len()];
        for ((yr, gr), or) in y
            .chunks_exact(self.dim)
            .zip(g.chunks_exact(self.dim))
            .zip(out.chunks_exact_mut(self.dim))
        {
            let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
            for j in 0..self.dim {
                or[j] = yr[j] * (gr[j] - dot);
            }
        }
        vec![Some(Tensor::from_parts(ctx.output.shape().to_vec(), out))]
    }
}

/// Max-subtracted softmax of each `row` in place.
pub(crate) fn softmax_rows<T: Scalar>(data: &mut [T], dim: usize) {
    for row in data.chunks_exact_mut(dim) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        let inv = T::one() / total;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

struct CrossEntropy<T> {
    probs: Vec<T>,
    labels: Vec<usize>,
    classes: usize,
}

impl<T: Scalar> Backward<T> for CrossEntropy<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let k = self.classes;
        let scale = ctx.grad.item() / T::from_f64(self.labels.len() as f64);
        let mut out = self.probs.clone();
        for (row, &label) in out.chunks_exact_mut(k).zip(&self.labels) {
            row[label] -= T::one();
            row.iter_mut().for_each(|v| *v *= scale);
        }
        vec![Some(Tensor::from_parts(ctx.inputs[0].shape().to_vec(), out))]
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Normalises each position over the last axis (biased variance).
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        let x = self.value();
        let d = *x.shape().last().ok_or_else(|| shape_err!("layer_norm on a scalar"))?;
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(shape_err!(
                "layer_norm over {d} channels with gamma {:?}, beta {:?}",
                gv.shape(),
                bv.shape()
            ));
        }
        let rows = x.numel() / d;
        let inv_d = T::one() / T::from_f64(d as f64);
        let eps = T::from_f64(eps);
        let mut xhat = vec![T::zero(); x.numel()];
        let mut rstd = Vec::with_capacity(rows);
        let mut out = vec![T::zero(); x.numel()];
        for ((xr, hr), or) in x
            .data()
            .chunks_exact(d)
            .zip(xhat.chunks_exact_mut(d))
            .zip(out.chunks_exact_mut(d))
        {
            let mean = xr.iter().copied().sum::<T>() * inv_d;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for j in 0..d {
                hr[j] = (xr[j] - mean) * r;
                or[j] = hr[j] * gv.data()[j] + bv.data()[j];
            }
        }
        self.tape().push(
            "layer_norm",
            Tensor::from_parts(x.shape().to_vec(), out),
            &[self, gamma, beta],
            LayerNorm { dim: d, xhat, rstd },
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let d = *x.shape().last().ok_or_else(|| shape_err!("softmax on a scalar"))?;
        let mut out = x.data().to_vec();
        softmax_rows(&mut out, d);
        self.tape().push(
            "softmax",
            Tensor::from_parts(x.shape().to_vec(), out),
            &[self],
            Softmax { dim: d },
        )
    }

    /// Mean negative log-likelihood of `labels` under softmax of the last
    /// axis; one label per row.
    pub fn cross_entropy_with_logits(self, labels: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let k = *x.shape().last().ok_or_else(|| shape_err!("cross entropy on a scalar"))?;
        if x.numel() / k != labels.len() {
            return Err(shape_err!(
                "cross entropy logits {:?} with {} labels",
                x.shape(),
                labels.len()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(shape_err!("label {bad} out of range for {k} classes"));
        }
        let mut probs = x.data().to_vec();
        let mut total = 0.0f64;
        for (row, &label) in x.data().chunks_exact(k).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total += (lse - row[label]).as_f64();
        }
        softmax_rows(&mut probs, k);
        let loss = T::from_f64(total / labels.len() as f64);
        self.tape().push(
            "cross_entropy",
            Tensor::scalar(loss),
            &[self],
            CrossEntropy {
                probs,
                labels: labels.to_vec(),
                classes: k,
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn softmax_uniform_and_stable() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros([3]));
        for &v in x.softmax().unwrap().value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = tape.constant(Tensor::from_f64([2], &[1000.0, 0.0]).unwrap());
        let p = y.softmax().unwrap().value();
        assert_eq!(p.data()[0], 1.0);
        assert!(p.data()[1] >= 0.0 && p.data()[1] < 1e-300);
    }

    #[test]
    fn layer_norm_constant_gives_beta() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full([2, 4], 3.7));
        let g = tape.constant(Tensor::from_f64([4], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::from_f64([4], &[0.1, -0.2, 0.3, 0.0]).unwrap());
        let y = x.layer_norm(g, b, 1e-5).unwrap().value();
        assert_eq!(&y.data()[..4], b.value().data());
        assert_eq!(&y.data()[4..], b.value().data());
    }

    #[test]
    fn layer_norm_unit_input() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64([2], &[1.0, -1.0]).unwrap());
        let g = tape.constant(Tensor::ones([2]));
        let b = tape.constant(Tensor::zeros([2]));
        let y = x.layer_norm(g, b, 0.0).unwrap().value();
        assert_eq!(y.data(), &[1.0, -1.0]);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros([4, 2]));
        let l = x.cross_entropy_with_logits(&[0, 1, 1, 0]).unwrap().value().item();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(x.cross_entropy_with_logits(&[0, 2, 1, 0]).is_err());
    }
}
