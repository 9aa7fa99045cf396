use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor, Var};

pub const DICE_SMOOTH: f64 = 1e-5;

/// `0.5 * cross-entropy + 0.5 * soft Dice` for logits `[N, K, H, W]` and
/// one label per pixel in `[N, H, W]` order.
pub fn combined_loss<'t, T: Scalar>(logits: Var<'t, T>, labels: &[usize]) -> Result<Var<'t, T>> {
    if logits.shape().len() != 4 {
        return Err(shape_err!("loss expects [N, K, H, W] logits, got {:?}", logits.shape()));
    }
    combined_loss_nhwc(logits.permute(&[0, 2, 3, 1])?, labels)
}

/// [`combined_loss`] on channels-last logits `[..., K]`.
pub fn combined_loss_nhwc<'t, T: Scalar>(logits: Var<'t, T>, labels: &[usize]) -> Result<Var<'t, T>> {
    let shape = logits.shape();
    let k = *shape.last().ok_or_else(|| shape_err!("loss on scalar logits"))?;
    let pixels = shape.iter().product::<usize>() / k;
    if labels.len() != pixels {
        return Err(shape_err!(
            "{} labels for logits {shape:?} ({pixels} pixels)",
            labels.len()
        ));
    }
    let flat = logits.reshape([pixels, k])?;
    let ce = flat.cross_entropy_with_logits(labels)?;
    let dice = soft_dice_loss(flat.softmax()?, labels)?;
    ce.add(dice)?.scale(0.5)
}

/// `1 - mean_k (2 sum p g + eps) / (sum p + sum g + eps)` over probabilities `[P, K]`.
pub fn soft_dice_loss<'t, T: Scalar>(probs: Var<'t, T>, labels: &[usize]) -> Result<Var<'t, T>> {
    let s = probs.shape();
    let (p, k) = (s[0], s[1]);
    let mut onehot = vec![T::zero(); p * k];
    let mut counts = vec![T::zero(); k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(shape_err!("label {l} out of range for {k} classes"));
        }
        onehot[i * k + l] = T::one();
        counts[l] += T::one();
    }
    let onehot = probs.constant(Tensor::new([p, k], onehot)?);
    let inter = probs.mul(onehot)?.sum_axis(0)?.affine(2.0, DICE_SMOOTH)?;
    let denom = probs
        .sum_axis(0)?
        .add(probs.constant(Tensor::new([k], counts)?))?
        .affine(1.0, DICE_SMOOTH)?;
    inter.div(denom)?.mean()?.affine(-1.0, 1.0)
}
