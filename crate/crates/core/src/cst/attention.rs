//! Windowed convolutional multi-head self-attention.

use std::sync::Arc;

use crate::error::{config_err, shape_err, Result};
use crate::layers::{Conv, Linear, Norm};
use crate::params::{Bound, Builder, Init, ParamId};
use crate::tensor::{Scalar, Var};

use super::window::{
    attention_mask, cyclic_shift, relative_position_index, window_partition, window_reverse,
    WindowGrid,
};
use super::BlockOptions;

/// How queries, keys and values are produced from a window.
#[derive(Debug, Clone)]
pub enum QkvProj {
    /// Separate depthwise 3x3 conv + layer norm for each of q, k, v.
    Depthwise { convs: [Conv; 3], norms: [Norm; 3] },
    /// A single linear map `d -> 3d`.
    Linear(Linear),
}

/// Projection applied to the concatenated heads.
#[derive(Debug, Clone)]
pub enum OutputProj {
    /// Depthwise 3x3 conv on the re-formed `M x M` window.
    Refine(Conv),
    Linear(Linear),
}

/// Parameters of one (shifted-)window attention module.
#[derive(Debug, Clone)]
pub struct Cmsa {
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub qkv: QkvProj,
    /// `[(2M - 1)^2, heads]`.
    pub bias_table: Option<ParamId>,
    pub out: OutputProj,
    rel_index: Arc<Vec<usize>>,
}

impl Cmsa {
    pub fn build<T: Scalar>(
        b: &mut Builder<'_, T>,
        dim: usize,
        heads: usize,
        window: usize,
        opts: BlockOptions,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(config_err!("{dim} channels cannot be split into {heads} heads"));
        }
        let qkv = if opts.conv_projection {
            let mut convs = Vec::with_capacity(3);
            let mut norms = Vec::with_capacity(3);
            for name in ["q", "k", "v"] {
                convs.push(Conv::depthwise(&mut b.sub(format!("{name}_conv")), dim, 3, false)?);
                norms.push(Norm::build(&mut b.sub(format!("{name}_norm")), dim)?);
            }
            QkvProj::Depthwise {
                convs: convs.try_into().expect("three convs"),
                norms: norms.try_into().expect("three norms"),
            }
        } else {
            QkvProj::Linear(Linear::build(&mut b.sub("qkv"), dim, 3 * dim, true)?)
        };
        let span = 2 * window - 1;
        let bias_table = if opts.bias_table {
            Some(b.param("bias_table", &[span * span, heads], Init::TruncNormal(0.02))?)
        } else {
            None
        };
        let out = if opts.conv_refine {
            OutputProj::Refine(Conv::depthwise(&mut b.sub("refine"), dim, 3, true)?)
        } else {
            OutputProj::Linear(Linear::build(&mut b.sub("proj"), dim, dim, true)?)
        };
        let n = window * window;
        let rel = relative_position_index(window);
        let rel_index = (0..heads)
            .flat_map(|h| rel.iter().map(move |&r| r * heads + h))
            .collect::<Vec<_>>();
        debug_assert_eq!(rel_index.len(), heads * n * n);
        Ok(Cmsa {
            dim,
            heads,
            window,
            qkv,
            bias_table,
            out,
            rel_index: Arc::new(rel_index),
        })
    }

    /// Q, K, V for a batch of windows `[B, M, M, d]`, each `[B, M^2, d]`.
    pub fn project_qkv<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        windows: Var<'t, T>,
    ) -> Result<[Var<'t, T>; 3]> {
        let s = windows.shape();
        let (b, n, d) = (s[0], s[1] * s[2], s[3]);
        match &self.qkv {
            QkvProj::Depthwise { convs, norms } => {
                let mut out = Vec::with_capacity(3);
                for (conv, norm) in convs.iter().zip(norms) {
                    let y = conv.forward_nhwc(p, windows)?;
                    out.push(norm.forward(p, y)?.reshape([b, n, d])?);
                }
                Ok(out.try_into().expect("three projections"))
            }
            QkvProj::Linear(lin) => {
                let y = lin.forward(p, windows.reshape([b, n, d])?)?;
                Ok([y.slice(2, 0, d)?, y.slice(2, d, d)?, y.slice(2, 2 * d, d)?])
            }
        }
    }

    /// Relative position bias `[heads, M^2, M^2]`, if enabled.
    pub fn position_bias<'t, T: Scalar>(&self, p: &Bound<'t, T>) -> Result<Option<Var<'t, T>>> {
        let Some(id) = self.bias_table else {
            return Ok(None);
        };
        let n = self.window * self.window;
        p[id].gather(self.rel_index.clone(), [self.heads, n, n]).map(Some)
    }

    /// Attention over already-normalised tokens `[N, H, W, d]`.
    pub fn forward<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        x: Var<'t, T>,
        grid: &WindowGrid,
    ) -> Result<Var<'t, T>> {
        if grid.window != self.window {
            return Err(shape_err!(
                "attention built for window {} used with window {}",
                self.window,
                grid.window
            ));
        }
        let s = grid.shift as isize;
        let x = if s > 0 { cyclic_shift(x, -s, -s)? } else { x };
        let windows = window_partition(x, grid)?;
        let [q, k, v] = self.project_qkv(p, windows)?;
        let mask = attention_mask::<T>(grid).map(|m| x.constant(m));
        let probs = attention_probs(q, k, self.heads, self.position_bias(p)?, mask)?;
        let bw = probs.shape()[0];
        let m = self.window;
        let attended = probs
            .matmul(split_heads(v, self.heads)?)?
            .permute(&[0, 2, 1, 3])?
            .reshape([bw, m, m, self.dim])?;
        let y = match &self.out {
            OutputProj::Refine(conv) => conv.forward_nhwc(p, attended)?,
            OutputProj::Linear(lin) => lin.forward(p, attended)?,
        };
        let y = window_reverse(y, grid)?;
        if s > 0 {
            cyclic_shift(y, s, s)
        } else {
            Ok(y)
        }
    }
}

fn split_heads<T: Scalar>(x: Var<'_, T>, heads: usize) -> Result<Var<'_, T>> {
    let s = x.shape();
    x.reshape([s[0], s[1], heads, s[2] / heads])?
        .permute(&[0, 2, 1, 3])
}

/// Attention weights `[B, heads, n, n]` from `q`, `k` of shape `[B, n, d]`.
///
/// Logits are `q k^T / sqrt(d / heads)` plus an optional bias `[heads, n, n]`
/// and an optional additive mask `[nW, 1, n, n]`, where `B` is a multiple of
/// `nW` and windows cycle fastest in the batch.
pub fn attention_probs<'t, T: Scalar>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    heads: usize,
    bias: Option<Var<'t, T>>,
    mask: Option<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    let s = q.shape();
    if s.len() != 3 || k.shape() != s || !s[2].is_multiple_of(heads) {
        return Err(shape_err!(
            "attention q {s:?}, k {:?} with {heads} heads",
            k.shape()
        ));
    }
    let (b, n, d) = (s[0], s[1], s[2]);
    let scale = 1.0 / ((d / heads) as f64).sqrt();
    let mut logits = split_heads(q, heads)?
        .matmul(split_heads(k, heads)?.transpose_last()?)?
        .scale(scale)?;
    if let Some(bias) = bias {
        logits = logits.add(bias)?;
    }
    if let Some(mask) = mask {
        let nw = mask.shape()[0];
        if b % nw != 0 {
            return Err(shape_err!("{b} windows cannot carry a mask for {nw} windows"));
        }
        logits = logits
            .reshape([b / nw, nw, heads, n, n])?
            .add(mask)?
            .reshape([b, heads, n, n])?;
    }
    logits.softmax()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::{Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(opts: BlockOptions) -> (ParamStore<f64>, Cmsa) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cmsa = Cmsa::build(&mut Builder::new(&mut store, &mut rng), 4, 2, 2, opts).unwrap();
        (store, cmsa)
    }

    #[test]
    fn heads_must_divide_channels() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Builder::new(&mut store, &mut rng);
        assert!(Cmsa::build(&mut b, 6, 4, 2, BlockOptions::FULL).is_err());
    }

    #[test]
    fn parameter_names() {
        let (store, _) = build(BlockOptions { bias_table: true, ..BlockOptions::FULL });
        let names: Vec<_> = store.names().iter().map(String::as_str).collect();
        assert_eq!(
            names,
            [
                "q_conv.weight",
                "q_norm.weight",
                "q_norm.bias",
                "k_conv.weight",
                "k_norm.weight",
                "k_norm.bias",
                "v_conv.weight",
                "v_norm.weight",
                "v_norm.bias",
                "bias_table",
                "refine.weight",
                "refine.bias",
            ]
        );
        assert_eq!(store.get(store.id("bias_table").unwrap()).shape(), &[9, 2]);
    }

    #[test]
    fn zero_window_gives_norm_offsets() {
        let (mut store, cmsa) = build(BlockOptions::FULL);
        let beta = store.id("k_norm.bias").unwrap();
        store.get_mut(beta).data_mut().copy_from_slice(&[0.5, -1.0, 2.0, 0.25]);
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let x = tape.constant(Tensor::zeros([3, 2, 2, 4]));
        let [_, k, _] = cmsa.project_qkv(&p, x).unwrap();
        for row in k.value().data().chunks(4) {
            assert_eq!(row, &[0.5, -1.0, 2.0, 0.25]);
        }
    }

    #[test]
    fn uniform_attention_averages_values() {
        let tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::zeros([2, 3, 4]));
        let k = tape.constant(Tensor::from_fn([2, 3, 4], |i| (i as f64).sin()));
        let p = attention_probs(q, k, 2, None, None).unwrap().value();
        assert!(p.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }
}
