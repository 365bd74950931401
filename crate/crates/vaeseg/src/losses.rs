//! Training objective: soft dice over the segmentation channels plus the
//! weighted reconstruction and divergence terms from the variational branch.

use crate::error::{Error, Result};
use crate::model::ForwardPass;
use crate::ops;
use crate::tensor::{Graph, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub w_l2: f32,
    pub w_kl: f32,
    pub dice_eps: f32,
    pub l2_reduction: Reduction,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_l2: 0.1, w_kl: 0.1, dice_eps: 1e-8, l2_reduction: Reduction::Mean }
    }
}

/// Soft dice overlap 2*sum(p*t) / (sum(p^2) + sum(t^2) + eps), a scalar in
/// [0, 1] for inputs in [0, 1]. Differentiable in both arguments.
pub fn dice_coefficient(
    g: &mut Graph,
    pred: NodeId,
    target: NodeId,
    eps: f32,
) -> Result<NodeId> {
    if g.value(pred).shape() != g.value(target).shape() {
        return Err(Error::Shape(format!(
            "dice shapes differ: {:?} vs {:?}",
            g.value(pred).shape(),
            g.value(target).shape()
        )));
    }
    let prod = ops::mul(g, pred, target)?;
    let num = ops::sum(g, prod)?;
    let num = ops::mul_scalar(g, num, 2.0)?;
    let p2 = ops::square(g, pred)?;
    let p2 = ops::sum(g, p2)?;
    let t2 = ops::square(g, target)?;
    let t2 = ops::sum(g, t2)?;
    let den = ops::add(g, p2, t2)?;
    let den = ops::add_scalar(g, den, eps)?;
    ops::div(g, num, den)
}

/// Sum over the three tumor-region channels of (1 - dice), in [0, 3].
pub fn dice_loss(g: &mut Graph, pred: NodeId, target: NodeId, eps: f32) -> Result<NodeId> {
    let shape = g.value(pred).shape().to_vec();
    if shape.len() != 4 || shape[0] != 3 {
        return Err(Error::Shape(format!(
            "dice loss expects [3, D, H, W] predictions, got {shape:?}"
        )));
    }
    if g.value(target).shape() != shape {
        return Err(Error::Shape(format!(
            "dice loss target shape {:?} differs from prediction {shape:?}",
            g.value(target).shape()
        )));
    }
    let vox: usize = shape[1..].iter().product();
    let mut dice_sum = None;
    for c in 0..3 {
        let pc = ops::slice(g, pred, c * vox, vec![vox])?;
        let tc = ops::slice(g, target, c * vox, vec![vox])?;
        let d = dice_coefficient(g, pc, tc, eps)?;
        dice_sum = Some(match dice_sum {
            None => d,
            Some(acc) => ops::add(g, acc, d)?,
        });
    }
    let neg = ops::mul_scalar(g, dice_sum.unwrap(), -1.0)?;
    ops::add_scalar(g, neg, 3.0)
}

/// Squared reconstruction error, summed or averaged over all elements.
pub fn l2_recon_loss(
    g: &mut Graph,
    recon: NodeId,
    input: NodeId,
    reduction: Reduction,
) -> Result<NodeId> {
    if g.value(recon).shape() != g.value(input).shape() {
        return Err(Error::Shape(format!(
            "reconstruction shape {:?} differs from input {:?}",
            g.value(recon).shape(),
            g.value(input).shape()
        )));
    }
    let diff = ops::sub(g, recon, input)?;
    let sq = ops::square(g, diff)?;
    let total = ops::sum(g, sq)?;
    match reduction {
        Reduction::Sum => Ok(total),
        Reduction::Mean => {
            let n = g.value(recon).len();
            ops::mul_scalar(g, total, 1.0 / n as f32)
        }
    }
}

/// Divergence penalty (1/n_voxels) * sum(mu^2 + e^logvar - logvar - 1),
/// non-negative, zero exactly at the standard normal. `n_voxels` is the
/// spatial voxel count of the input crop.
pub fn kl_loss(g: &mut Graph, mu: NodeId, logvar: NodeId, n_voxels: usize) -> Result<NodeId> {
    if g.value(mu).shape() != g.value(logvar).shape() {
        return Err(Error::Shape(format!(
            "mu shape {:?} differs from logvar {:?}",
            g.value(mu).shape(),
            g.value(logvar).shape()
        )));
    }
    if n_voxels == 0 {
        return Err(Error::Graph("kl normalizer must be positive".into()));
    }
    let dims = g.value(mu).len();
    let mu2 = ops::square(g, mu)?;
    let var = ops::exp(g, logvar)?;
    let t = ops::add(g, mu2, var)?;
    let t = ops::sub(g, t, logvar)?;
    let s = ops::sum(g, t)?;
    let s = ops::add_scalar(g, s, -(dims as f32))?;
    ops::mul_scalar(g, s, 1.0 / n_voxels as f32)
}

/// Scalar node ids of the combined objective and its three components.
pub struct TotalLoss {
    pub total: NodeId,
    pub dice: NodeId,
    pub l2: NodeId,
    pub kl: NodeId,
}

/// dice + w_l2 * l2 + w_kl * kl over a completed forward pass. `target` must
/// be a node in the pass's graph shaped like the segmentation output.
pub fn total_loss(
    pass: &mut ForwardPass,
    target: NodeId,
    weights: &LossWeights,
) -> Result<TotalLoss> {
    let (seg, recon, mu, logvar, input) =
        (pass.seg, pass.recon, pass.mu, pass.logvar, pass.input);
    let g = &mut pass.graph;
    let n_voxels: usize = g.value(input).shape()[1..].iter().product();
    let dice = dice_loss(g, seg, target, weights.dice_eps)?;
    let l2 = l2_recon_loss(g, recon, input, weights.l2_reduction)?;
    let kl = kl_loss(g, mu, logvar, n_voxels)?;
    let wl2 = ops::mul_scalar(g, l2, weights.w_l2)?;
    let wkl = ops::mul_scalar(g, kl, weights.w_kl)?;
    let total = ops::add(g, dice, wl2)?;
    let total = ops::add(g, total, wkl)?;
    Ok(TotalLoss { total, dice, l2, kl })
}
