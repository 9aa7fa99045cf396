use crate::error::Result;
use crate::layers::{Conv, Linear, Norm};
use crate::params::{Bound, Builder};
use crate::tensor::{Scalar, Var};

const EXPANSION: usize = 4;

/// Feed-forward branch of a block (residual excluded).
#[derive(Debug, Clone)]
pub enum FeedForward {
    /// Depthwise 7x7 conv, layer norm, pointwise expand, GELU, pointwise project.
    Separable {
        dw: Conv,
        norm: Norm,
        expand: Linear,
        project: Linear,
    },
    /// Layer norm, linear expand, GELU, linear project.
    Mlp {
        norm: Norm,
        expand: Linear,
        project: Linear,
    },
}

impl FeedForward {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, dim: usize, separable: bool) -> Result<Self> {
        let hidden = EXPANSION * dim;
        if separable {
            Ok(FeedForward::Separable {
                dw: Conv::depthwise(&mut b.sub("dw"), dim, 7, true)?,
                norm: Norm::build(&mut b.sub("norm"), dim)?,
                expand: Linear::build(&mut b.sub("expand"), dim, hidden, true)?,
                project: Linear::build(&mut b.sub("project"), hidden, dim, true)?,
            })
        } else {
            Ok(FeedForward::Mlp {
                norm: Norm::build(&mut b.sub("norm"), dim)?,
                expand: Linear::build(&mut b.sub("expand"), dim, hidden, true)?,
                project: Linear::build(&mut b.sub("project"), hidden, dim, true)?,
            })
        }
    }

    /// `[N, H, W, d] -> [N, H, W, d]`.
    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (norm, expand, project, x) = match self {
            FeedForward::Separable { dw, norm, expand, project } => {
                (norm, expand, project, dw.forward_nhwc(p, x)?)
            }
            FeedForward::Mlp { norm, expand, project } => (norm, expand, project, x),
        };
        let h = expand.forward(p, norm.forward(p, x)?)?.gelu()?;
        project.forward(p, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::{Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shape_is_preserved_on_small_and_large_maps() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ffn = FeedForward::build(&mut Builder::new(&mut store, &mut rng), 3, true).unwrap();
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        for (h, w) in [(2, 3), (9, 8)] {
            let x = tape.constant(Tensor::from_fn([1, h, w, 3], |i| (i as f64 * 0.3).cos()));
            assert_eq!(ffn.forward(&p, x).unwrap().shape(), vec![1, h, w, 3]);
        }
    }

    #[test]
    fn parameter_count() {
        let d = 8;
        for (separable, extra) in [(true, 49 * d + d), (false, 0)] {
            let mut store = ParamStore::<f32>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            FeedForward::build(&mut Builder::new(&mut store, &mut rng), d, separable).unwrap();
            assert_eq!(store.num_scalars(), 8 * d * d + 7 * d + extra);
        }
    }
}
