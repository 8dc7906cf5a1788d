use super::LabelVolume;
use crate::error::{shape_err, Result};
use crate::tensor::{Element, Graph, Tensor, Var};

/// Smoothing term of the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;
/// Probabilities are clamped to this floor before the logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Flattens `probs` to `[C, V]` and builds the matching one-hot constant.
fn flatten<T: Element>(
    g: &mut Graph<T>,
    probs: Var,
    target: &LabelVolume,
) -> Result<(Var, Tensor<T>)> {
    let shape = g.shape(probs).to_vec();
    if shape.len() != 4 || shape[1..] != target.extents {
        return shape_err(
            "loss",
            format!(
                "probabilities {shape:?} do not match label extents {:?}",
                target.extents
            ),
        );
    }
    let c = shape[0];
    let v = target.voxels();
    let p = g.reshape(probs, &[c, v])?;
    Ok((p, target.one_hot::<T>(c)?.reshape(&[c, v])?))
}

/// `1 − mean_c (2 Σ p·g + ε) / (Σ p + Σ g + ε)` over all classes.
pub fn dice_loss<T: Element>(g: &mut Graph<T>, probs: Var, target: &LabelVolume) -> Result<Var> {
    let (p, onehot) = flatten(g, probs, target)?;
    let c = onehot.shape()[0];
    let v = onehot.shape()[1];
    let eps = T::from_f64(DICE_SMOOTH);
    let gsum = Tensor::from_fn(&[c], |k| {
        onehot.data()[k * v..(k + 1) * v].iter().copied().sum::<T>() + eps
    });
    let gsum = g.constant(gsum);
    let onehot = g.constant(onehot);

    let pg = g.mul(p, onehot)?;
    let inter = g.sum_last(pg)?;
    let num = g.scale(inter, 2.0)?;
    let num = g.add_scalar(num, DICE_SMOOTH)?;
    let psum = g.sum_last(p)?;
    let den = g.add(psum, gsum)?;
    let ratio = g.div(num, den)?;
    let mean = g.mean_all(ratio)?;
    let neg = g.scale(mean, -1.0)?;
    g.add_scalar(neg, 1.0)
}

/// `−mean_v ln max(p_true(v), floor)`.
pub fn cross_entropy_loss<T: Element>(
    g: &mut Graph<T>,
    probs: Var,
    target: &LabelVolume,
) -> Result<Var> {
    let (p, onehot) = flatten(g, probs, target)?;
    let v = onehot.shape()[1];
    let onehot = g.constant(onehot);
    let logp = g.log_clamped(p, LOG_FLOOR)?;
    let picked = g.mul(logp, onehot)?;
    let total = g.sum_all(picked)?;
    g.scale(total, -1.0 / v as f64)
}

/// Dice and cross-entropy with equal weight.
pub fn combined_loss<T: Element>(
    g: &mut Graph<T>,
    probs: Var,
    target: &LabelVolume,
) -> Result<Var> {
    let d = dice_loss(g, probs, target)?;
    let ce = cross_entropy_loss(g, probs, target)?;
    g.add(d, ce)
}
