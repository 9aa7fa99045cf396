//! Named finite-difference checks for every differentiable operation and
//! building block, plus a sampled check of the whole network.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cst::{
    attention_mask, attention_probs, cyclic_shift, window_partition, window_reverse, BlockOptions,
    Cmsa, CstBlock, FeedForward, WindowGrid,
};
use crate::error::Result;
use crate::layers::{Conv, Linear, Norm, LN_EPS};
use crate::network::{depth_to_space, space_to_depth, CsUnet, Embedding, ModelConfig, SkipFusion, Upsample};
use crate::params::{Bound, Builder, ParamStore};
use crate::tensor::gradcheck::{check, GradCheckReport};
use crate::tensor::{Tape, Tensor, Var};
use crate::training::{combined_loss, soft_dice_loss};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Perturbed elements per check beyond which points are sampled.
pub const MAX_POINTS: usize = 160;
/// Parameter elements perturbed by [`full_model`].
pub const FULL_MODEL_SAMPLES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    /// A single tensor operation.
    Elementary,
    /// A layer or block built from several operations.
    Composite,
    /// The whole network.
    Model,
}

impl Tier {
    pub fn tolerance(self) -> f64 {
        match self {
            Tier::Elementary => 1e-6,
            Tier::Composite => 1e-5,
            Tier::Model => 1e-4,
        }
    }
}

pub struct OpCheck {
    pub name: &'static str,
    pub tier: Tier,
    run: fn(u64) -> Result<GradCheckReport>,
}

impl OpCheck {
    pub fn run(&self, seed: u64) -> Result<GradCheckReport> {
        (self.run)(seed)
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Reduces `y` to a scalar with fixed pseudo-random weights so every output
/// element contributes a distinct gradient.
fn project<'t>(y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = uniform(&mut rng, &y.shape(), -1.0, 1.0);
    y.mul(y.constant(w))?.sum()
}

/// Perturbation points: everything when small, else a seeded sample.
fn points(inputs: &[Tensor<f64>], seed: u64) -> Option<Vec<(usize, usize)>> {
    let all: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |e| (i, e)))
        .collect();
    if all.len() <= MAX_POINTS {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = sample(&mut rng, all.len(), MAX_POINTS).into_vec();
    picked.sort_unstable();
    Some(picked.into_iter().map(|i| all[i]).collect())
}

fn run<F>(inputs: Vec<Tensor<f64>>, seed: u64, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let pts = points(&inputs, seed);
    check(&inputs, |t, v| project(f(t, v)?, seed), STEP, pts.as_deref())
}

/// Moves layer-scale gains off their tiny initial value so every branch of a
/// block carries a measurable gradient.
fn randomise_gains(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).contains("gain_")).collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = rng.gen_range(0.5..1.0);
        }
    }
}

/// Builds a module with `build`, then checks `forward` with respect to the
/// input `x` and every parameter.
fn module<M>(
    seed: u64,
    x_shape: &[usize],
    build: impl FnOnce(&mut Builder<'_, f64>) -> Result<M>,
    forward: impl for<'t> Fn(&M, &Bound<'t, f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let m = build(&mut Builder::new(&mut store, &mut rng))?;
    randomise_gains(&mut store, &mut rng);
    let mut inputs = vec![uniform(&mut rng, x_shape, -1.0, 1.0)];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    run(inputs, seed, |_, v| {
        let p = Bound::from_vars(v[1..].to_vec());
        forward(&m, &p, v[0])
    })
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

macro_rules! binary {
    ($name:ident, $op:ident, $lo:expr) => {
        fn $name(seed: u64) -> Result<GradCheckReport> {
            let mut r = rng(seed);
            let a = uniform(&mut r, &[2, 3, 4], -1.0, 1.0);
            let b = uniform(&mut r, &[3, 1], $lo, 1.5);
            run(vec![a, b], seed, |_, v| v[0].$op(v[1]))
        }
    };
}

binary!(op_add, add, -1.5);
binary!(op_sub, sub, -1.5);
binary!(op_mul, mul, -1.5);
binary!(op_div, div, 0.5);

fn unary(seed: u64, shape: &[usize], f: for<'t> fn(Var<'t, f64>) -> Result<Var<'t, f64>>) -> Result<GradCheckReport> {
    let x = uniform(&mut rng(seed), shape, -2.0, 2.0);
    run(vec![x], seed, move |_, v| f(v[0]))
}

fn op_affine(seed: u64) -> Result<GradCheckReport> {
    unary(seed, &[3, 5], |x| x.affine(-1.7, 0.3))
}

fn op_scale(seed: u64) -> Result<GradCheckReport> {
    unary(seed, &[3, 5], |x| x.scale(2.5))
}

fn op_gelu(seed: u64) -> Result<GradCheckReport> {
    unary(seed, &[4, 6], |x| x.gelu())
}

fn op_sum(seed: u64) -> Result<GradCheckReport> {
    unary(seed, &[3, 4], |x| x.sum()?.scale(0.5))
}

fn op_mean(seed: u64) -> Result<GradCheckReport> {
    unary(seed, &[3, 4], |x| x.mean())
}

fn op_sum_axis(seed: u64) -> Result<GradCheckReport> {
    unary(seed, &[2, 3, 4], |x| x.sum_axis(1))
}

fn op_reshape(seed: u64) -> Result<GradCheckReport> {
    unary(seed, &[2, 3, 4], |x| x.reshape([4, 6]))
}

fn op_permute(seed: u64) -> Result<GradCheckReport> {
    unary(seed, &[2, 3, 4], |x| x.permute(&[2, 0, 1]))
}

fn op_transpose_last(seed: u64) -> Result<GradCheckReport> {
    unary(seed, &[2, 3, 4], |x| x.transpose_last())
}

fn op_slice(seed: u64) -> Result<GradCheckReport> {
    unary(seed, &[2, 5, 3], |x| x.slice(1, 1, 3))
}

fn op_concat(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let a = uniform(&mut r, &[2, 2, 3], -1.0, 1.0);
    let b = uniform(&mut r, &[2, 4, 3], -1.0, 1.0);
    run(vec![a, b], seed, |_, v| Var::concat(&[v[0], v[1]], 1))
}

fn op_gather(seed: u64) -> Result<GradCheckReport> {
    let x = uniform(&mut rng(seed), &[10], -1.0, 1.0);
    // repeated indices exercise gradient accumulation
    let index = Arc::new(vec![3, 1, 4, 1, 5, 9, 2, 6, 5, 3, 5, 8]);
    run(vec![x], seed, move |_, v| v[0].gather(index.clone(), [3, 4]))
}

fn op_matmul(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let a = uniform(&mut r, &[2, 3, 4], -1.0, 1.0);
    let b = uniform(&mut r, &[2, 4, 5], -1.0, 1.0);
    run(vec![a, b], seed, |_, v| v[0].matmul(v[1]))
}

fn op_linear(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[2, 3, 4], -1.0, 1.0);
    let w = uniform(&mut r, &[5, 4], -1.0, 1.0);
    let b = uniform(&mut r, &[5], -1.0, 1.0);
    run(vec![x, w, b], seed, |_, v| v[0].linear(v[1], Some(v[2])))
}

fn op_conv2d(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[2, 4, 5, 5], -1.0, 1.0);
    let w = uniform(&mut r, &[6, 2, 3, 3], -1.0, 1.0);
    let b = uniform(&mut r, &[6], -1.0, 1.0);
    run(vec![x, w, b], seed, |_, v| v[0].conv2d(v[1], Some(v[2]), 2, 1, 2))
}

fn op_conv_transpose2d(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[2, 3, 3, 3], -1.0, 1.0);
    let w = uniform(&mut r, &[3, 2, 2, 2], -1.0, 1.0);
    let b = uniform(&mut r, &[2], -1.0, 1.0);
    run(vec![x, w, b], seed, |_, v| v[0].conv_transpose2d(v[1], Some(v[2]), 2, 0))
}

fn op_depthwise_conv(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[2, 4, 4, 3], -1.0, 1.0);
    let w = uniform(&mut r, &[3, 1, 3, 3], -1.0, 1.0);
    let b = uniform(&mut r, &[3], -1.0, 1.0);
    run(vec![x, w, b], seed, |_, v| v[0].depthwise_conv_nhwc(v[1], Some(v[2])))
}

fn op_layer_norm(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[3, 2, 6], -2.0, 2.0);
    let g = uniform(&mut r, &[6], 0.5, 1.5);
    let b = uniform(&mut r, &[6], -1.0, 1.0);
    run(vec![x, g, b], seed, |_, v| v[0].layer_norm(v[1], v[2], LN_EPS))
}

fn op_softmax(seed: u64) -> Result<GradCheckReport> {
    unary(seed, &[3, 2, 5], |x| x.softmax())
}

fn op_cross_entropy(seed: u64) -> Result<GradCheckReport> {
    let x = uniform(&mut rng(seed), &[6, 4], -2.0, 2.0);
    run(vec![x], seed, |_, v| v[0].cross_entropy_with_logits(&[0, 3, 1, 2, 2, 0]))
}

fn labels(seed: u64, n: usize, k: usize) -> Vec<usize> {
    let mut r = rng(seed ^ 0x1abe1);
    (0..n).map(|_| r.gen_range(0..k)).collect()
}

fn soft_dice(seed: u64) -> Result<GradCheckReport> {
    let x = uniform(&mut rng(seed), &[12, 3], -2.0, 2.0);
    let y = labels(seed, 12, 3);
    run(vec![x], seed, move |_, v| soft_dice_loss(v[0].softmax()?, &y))
}

fn loss(seed: u64) -> Result<GradCheckReport> {
    let x = uniform(&mut rng(seed), &[2, 3, 3, 2], -2.0, 2.0);
    let y = labels(seed, 2 * 3 * 2, 3);
    run(vec![x], seed, move |_, v| combined_loss(v[0], &y))
}

fn window_roundtrip(seed: u64) -> Result<GradCheckReport> {
    let grid = WindowGrid::new(2, 0, 4, 4)?;
    unary_with(seed, &[1, 4, 4, 2], move |x| {
        let w = window_partition(x, &grid)?;
        window_reverse(w.gelu()?, &grid)
    })
}

fn shift(seed: u64) -> Result<GradCheckReport> {
    unary_with(seed, &[1, 4, 6, 2], |x| cyclic_shift(x.gelu()?, -1, 2))
}

fn unary_with(
    seed: u64,
    shape: &[usize],
    f: impl for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
) -> Result<GradCheckReport> {
    let x = uniform(&mut rng(seed), shape, -2.0, 2.0);
    run(vec![x], seed, move |_, v| f(v[0]))
}

fn attention(seed: u64) -> Result<GradCheckReport> {
    let grid = WindowGrid::new(2, 1, 4, 4)?;
    let (heads, n, d) = (2, grid.tokens(), 4);
    let b = grid.windows_per_image();
    let mut r = rng(seed);
    let q = uniform(&mut r, &[b, n, d], -1.0, 1.0);
    let k = uniform(&mut r, &[b, n, d], -1.0, 1.0);
    let bias = uniform(&mut r, &[heads, n, n], -0.5, 0.5);
    let mask = attention_mask::<f64>(&grid).expect("shifted grid has a mask");
    run(vec![q, k, bias], seed, move |t, v| {
        attention_probs(v[0], v[1], heads, Some(v[2]), Some(t.constant(mask.clone())))
    })
}

fn cmsa(seed: u64, shifted: bool, opts: BlockOptions) -> Result<GradCheckReport> {
    let grid = WindowGrid::new(2, if shifted { 1 } else { 0 }, 4, 4)?;
    module(
        seed,
        &[1, 4, 4, 4],
        |b| Cmsa::build(b, 4, 2, 2, opts),
        move |m, p, x| m.forward(p, x, &grid),
    )
}

fn w_cmsa(seed: u64) -> Result<GradCheckReport> {
    cmsa(seed, false, BlockOptions::FULL)
}

fn sw_cmsa(seed: u64) -> Result<GradCheckReport> {
    cmsa(seed, true, BlockOptions::FULL)
}

fn w_msa(seed: u64) -> Result<GradCheckReport> {
    let opts = BlockOptions { conv_projection: false, bias_table: true, conv_refine: false, dsf: false };
    cmsa(seed, true, opts)
}

fn dsf(seed: u64) -> Result<GradCheckReport> {
    module(seed, &[1, 3, 3, 4], |b| FeedForward::build(b, 4, true), |m, p, x| m.forward(p, x))
}

fn mlp(seed: u64) -> Result<GradCheckReport> {
    module(seed, &[1, 3, 3, 4], |b| FeedForward::build(b, 4, false), |m, p, x| m.forward(p, x))
}

fn cst_block(seed: u64) -> Result<GradCheckReport> {
    module(
        seed,
        &[1, 4, 4, 4],
        |b| CstBlock::build(b, 4, 2, 2, true, BlockOptions::FULL),
        |m, p, x| m.forward(p, x),
    )
}

fn embedding_cfg(conv: bool) -> ModelConfig {
    ModelConfig { in_channels: 2, base_dim: 4, conv_embedding: conv, ..ModelConfig::tiny() }
}

fn conv_embedding(seed: u64) -> Result<GradCheckReport> {
    module(seed, &[1, 2, 8, 8], |b| Embedding::build(b, &embedding_cfg(true)), |m, p, x| m.forward(p, x))
}

fn patch_embedding(seed: u64) -> Result<GradCheckReport> {
    module(seed, &[1, 2, 8, 8], |b| Embedding::build(b, &embedding_cfg(false)), |m, p, x| m.forward(p, x))
}

fn patch_merging(seed: u64) -> Result<GradCheckReport> {
    module(
        seed,
        &[1, 4, 4, 3],
        |b| Linear::build(b, 12, 6, false),
        |m, p, x| m.forward(p, space_to_depth(x)?),
    )
}

fn upsample_conv(seed: u64) -> Result<GradCheckReport> {
    module(
        seed,
        &[1, 2, 2, 4],
        |b| {
            Ok(Upsample::Conv {
                norm: Norm::build(&mut b.sub("norm"), 4)?,
                deconv: Conv::transposed(&mut b.sub("deconv"), 4, 2, 2, 2)?,
            })
        },
        |m, p, x| m.forward(p, x),
    )
}

fn patch_expand(seed: u64) -> Result<GradCheckReport> {
    module(
        seed,
        &[1, 2, 2, 4],
        |b| Linear::build(b, 4, 16, false),
        |m, p, x| depth_to_space(m.forward(p, x)?, 2),
    )
}

fn skip_conv(seed: u64) -> Result<GradCheckReport> {
    module(
        seed,
        &[1, 3, 3, 4],
        |b| {
            Ok(SkipFusion::Conv([
                Conv::build(&mut b.sub("conv1"), 4, 2, 3, 1, 1, 1, true)?,
                Conv::build(&mut b.sub("conv2"), 2, 2, 3, 1, 1, 1, true)?,
            ]))
        },
        // the input carries both halves; split it into up-sampled and skip maps
        |m, p, x| m.forward(p, x.slice(3, 0, 2)?, x.slice(3, 2, 2)?),
    )
}

/// Checks, in the order they are reported.
pub fn registry() -> &'static [OpCheck] {
    use Tier::*;
    macro_rules! c {
        ($name:literal, $tier:ident, $f:expr) => {
            OpCheck { name: $name, tier: $tier, run: $f }
        };
    }
    static CHECKS: &[OpCheck] = &[
        c!("add", Elementary, op_add),
        c!("sub", Elementary, op_sub),
        c!("mul", Elementary, op_mul),
        c!("div", Elementary, op_div),
        c!("affine", Elementary, op_affine),
        c!("scale", Elementary, op_scale),
        c!("gelu", Elementary, op_gelu),
        c!("sum", Elementary, op_sum),
        c!("mean", Elementary, op_mean),
        c!("sum_axis", Elementary, op_sum_axis),
        c!("reshape", Elementary, op_reshape),
        c!("permute", Elementary, op_permute),
        c!("transpose", Elementary, op_transpose_last),
        c!("slice", Elementary, op_slice),
        c!("concat", Elementary, op_concat),
        c!("gather", Elementary, op_gather),
        c!("matmul", Elementary, op_matmul),
        c!("linear", Elementary, op_linear),
        c!("conv2d", Elementary, op_conv2d),
        c!("conv_transpose2d", Elementary, op_conv_transpose2d),
        c!("depthwise_conv", Elementary, op_depthwise_conv),
        c!("layer_norm", Elementary, op_layer_norm),
        c!("softmax", Elementary, op_softmax),
        c!("cross_entropy", Elementary, op_cross_entropy),
        c!("soft_dice", Composite, soft_dice),
        c!("combined_loss", Composite, loss),
        c!("window_partition", Composite, window_roundtrip),
        c!("cyclic_shift", Composite, shift),
        c!("attention_probs", Composite, attention),
        c!("w_cmsa", Composite, w_cmsa),
        c!("sw_cmsa", Composite, sw_cmsa),
        c!("w_msa", Composite, w_msa),
        c!("dsf", Composite, dsf),
        c!("mlp", Composite, mlp),
        c!("cst_block", Composite, cst_block),
        c!("conv_embedding", Composite, conv_embedding),
        c!("patch_embedding", Composite, patch_embedding),
        c!("patch_merging", Composite, patch_merging),
        c!("upsample_conv", Composite, upsample_conv),
        c!("patch_expand", Composite, patch_expand),
        c!("skip_conv", Composite, skip_conv),
    ];
    CHECKS
}

pub fn find(name: &str) -> Option<&'static OpCheck> {
    registry().iter().find(|c| c.name == name)
}

/// The tiny network in `f64` with randomised layer scales: perturbs one
/// element in each of [`FULL_MODEL_SAMPLES`] randomly chosen parameters.
pub fn full_model(seed: u64) -> Result<GradCheckReport> {
    let cfg = ModelConfig::tiny();
    let (model, mut store) = CsUnet::new::<f64>(&cfg, seed)?;
    let mut r = rng(seed);
    randomise_gains(&mut store, &mut r);
    let [h, w] = cfg.input_size;
    let image = uniform(&mut r, &[1, cfg.in_channels, h, w], 0.0, 1.0);
    let y = labels(seed, h * w, cfg.num_classes);
    let params: Vec<Tensor<f64>> = store.iter().map(|(_, t)| t.clone()).collect();
    let pts: Vec<(usize, usize)> = sample(&mut r, params.len(), FULL_MODEL_SAMPLES.min(params.len()))
        .into_iter()
        .map(|i| (i, r.gen_range(0..params[i].numel())))
        .collect();
    check(
        &params,
        |t, v| {
            let p = Bound::from_vars(v.to_vec());
            combined_loss(model.forward(&p, t.constant(image.clone()))?, &y)
        },
        STEP,
        Some(&pts),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut names: Vec<_> = registry().iter().map(|c| c.name).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), registry().len());
        assert!(find("w_cmsa").is_some() && find("nope").is_none());
    }
}
