use crate::error::Result;
use crate::layers::Norm;
use crate::params::{Bound, Builder, Init, ParamId};
use crate::tensor::{Scalar, Var};

use super::attention::Cmsa;
use super::ffn::FeedForward;
use super::window::WindowGrid;
use super::BlockOptions;

/// Initial value of the residual-branch gains.
pub const LAYER_SCALE_INIT: f64 = 1e-6;

/// `z = x + g_a * attn(LN(x)); out = z + g_f * ffn(z)`.
#[derive(Debug, Clone)]
pub struct CstBlock {
    pub norm: Norm,
    pub attn: Cmsa,
    pub ffn: FeedForward,
    pub gain_attn: ParamId,
    pub gain_ffn: ParamId,
    /// Uses windows shifted by `M / 2`.
    pub shifted: bool,
}

impl CstBlock {
    pub fn build<T: Scalar>(
        b: &mut Builder<'_, T>,
        dim: usize,
        heads: usize,
        window: usize,
        shifted: bool,
        opts: BlockOptions,
    ) -> Result<Self> {
        Ok(CstBlock {
            norm: Norm::build(&mut b.sub("norm"), dim)?,
            attn: Cmsa::build(&mut b.sub("attn"), dim, heads, window, opts)?,
            ffn: FeedForward::build(&mut b.sub("ffn"), dim, opts.dsf)?,
            gain_attn: b.param("gain_attn", &[dim], Init::Constant(LAYER_SCALE_INIT))?,
            gain_ffn: b.param("gain_ffn", &[dim], Init::Constant(LAYER_SCALE_INIT))?,
            shifted,
        })
    }

    /// The grid this block attends over for an `h x w` map. A map covered by a
    /// single window is never shifted.
    pub fn grid(&self, height: usize, width: usize) -> Result<WindowGrid> {
        let m = self.attn.window;
        let shift = if self.shifted && (height > m || width > m) { m / 2 } else { 0 };
        WindowGrid::new(m, shift, height, width)
    }

    /// `[N, H, W, d] -> [N, H, W, d]`.
    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        let grid = self.grid(s[1], s[2])?;
        let a = self.attn.forward(p, self.norm.forward(p, x)?, &grid)?;
        let z = x.add(a.mul(p[self.gain_attn])?)?;
        let f = self.ffn.forward(p, z)?;
        z.add(f.mul(p[self.gain_ffn])?)
    }
}

/// A run of blocks; regular layers alternate unshifted and shifted windows.
#[derive(Debug, Clone)]
pub struct CstLayer {
    pub blocks: Vec<CstBlock>,
}

impl CstLayer {
    /// `depth` blocks, shifting every second one when `alternate_shift`.
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Scalar>(
        b: &mut Builder<'_, T>,
        dim: usize,
        heads: usize,
        window: usize,
        depth: usize,
        alternate_shift: bool,
        opts: BlockOptions,
    ) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| {
                let shifted = alternate_shift && i % 2 == 1;
                CstBlock::build(&mut b.sub(i), dim, heads, window, shifted, opts)
            })
            .collect::<Result<_>>()?;
        Ok(CstLayer { blocks })
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.blocks.iter().try_fold(x, |x, blk| blk.forward(p, x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::{Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(opts: BlockOptions) -> (ParamStore<f64>, CstLayer) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let l = CstLayer::build(&mut Builder::new(&mut store, &mut rng), 8, 2, 2, 2, true, opts)
            .unwrap();
        (store, l)
    }

    #[test]
    fn block_parameter_count() {
        let d = 8;
        let (store, _) = layer(BlockOptions::FULL);
        assert_eq!(store.num_scalars(), 2 * (8 * d * d + 104 * d));
        let (store, _) = layer(BlockOptions { bias_table: true, ..BlockOptions::FULL });
        assert_eq!(store.num_scalars(), 2 * (8 * d * d + 104 * d + 9 * 2));
    }

    #[test]
    fn second_block_is_shifted() {
        let (_, l) = layer(BlockOptions::FULL);
        assert_eq!(l.blocks[0].grid(4, 4).unwrap().shift, 0);
        assert_eq!(l.blocks[1].grid(4, 4).unwrap().shift, 1);
        assert_eq!(l.blocks[1].grid(2, 2).unwrap().shift, 0);
    }

    #[test]
    fn zero_gains_are_identity() {
        let (mut store, l) = layer(BlockOptions::FULL);
        for blk in &l.blocks {
            for id in [blk.gain_attn, blk.gain_ffn] {
                store.get_mut(id).data_mut().fill(0.0);
            }
        }
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let x = tape.constant(Tensor::from_fn([1, 4, 4, 8], |i| (i as f64).sqrt()));
        assert_eq!(*l.forward(&p, x).unwrap().value(), *x.value());
    }
}
