//! Group normalization over `[C, D, H, W]` volumes.
//!
//! Statistics are population moments per group, accumulated in f64 and frozen
//! at forward time so the backward pass reuses exactly the values that shaped
//! the output.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Op, OpCtx, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupNormSpec {
    pub channels: usize,
    pub groups: usize,
    pub eps: f32,
}

impl GroupNormSpec {
    pub fn new(channels: usize, groups: usize) -> Self {
        Self { channels, groups, eps: 1e-5 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.groups == 0 {
            return Err(Error::Config("group norm needs nonzero channels and groups".into()));
        }
        if self.channels % self.groups != 0 {
            return Err(Error::Config(format!(
                "groups {} do not divide channels {}",
                self.groups, self.channels
            )));
        }
        if self.eps <= 0.0 {
            return Err(Error::Config("group norm eps must be positive".into()));
        }
        Ok(())
    }
}

struct GroupNorm {
    spec: GroupNormSpec,
    /// Per-group (mean, 1/sqrt(var + eps)) captured during the forward pass.
    stats: Vec<(f64, f64)>,
}

impl Op for GroupNorm {
    fn name(&self) -> &'static str {
        "group_norm"
    }

    fn backward(&self, grad_out: &[f32], ctx: &OpCtx<'_>) -> Vec<Option<Vec<f32>>> {
        let x = ctx.inputs[0].data();
        let gamma = ctx.inputs[1].data();
        let shape = ctx.inputs[0].shape();
        let voxels: usize = shape[1..].iter().product();
        let cpg = self.spec.channels / self.spec.groups;
        let group_len = cpg * voxels;

        let dx = ctx.needs[0].then(|| {
            let mut dx = vec![0.0f32; x.len()];
            dx.par_chunks_mut(group_len).enumerate().for_each(|(gi, slab)| {
                let (mean, invstd) = self.stats[gi];
                let base = gi * group_len;
                let m = group_len as f64;
                let mut sum1 = 0.0f64;
                let mut sum2 = 0.0f64;
                for i in 0..group_len {
                    let c = (base + i) / voxels;
                    let dxhat = (grad_out[base + i] * gamma[c]) as f64;
                    let xhat = (x[base + i] as f64 - mean) * invstd;
                    sum1 += dxhat;
                    sum2 += dxhat * xhat;
                }
                for i in 0..group_len {
                    let c = (base + i) / voxels;
                    let dxhat = (grad_out[base + i] * gamma[c]) as f64;
                    let xhat = (x[base + i] as f64 - mean) * invstd;
                    slab[i] = (invstd * (dxhat - sum1 / m - xhat * sum2 / m)) as f32;
                }
            });
            dx
        });

        let per_channel = |with_xhat: bool| -> Vec<f32> {
            (0..self.spec.channels)
                .into_par_iter()
                .map(|c| {
                    let (mean, invstd) = self.stats[c / cpg];
                    let base = c * voxels;
                    let mut acc = 0.0f64;
                    for v in 0..voxels {
                        let go = grad_out[base + v] as f64;
                        if with_xhat {
                            acc += go * (x[base + v] as f64 - mean) * invstd;
                        } else {
                            acc += go;
                        }
                    }
                    acc as f32
                })
                .collect()
        };

        let dgamma = ctx.needs[1].then(|| per_channel(true));
        let dbeta = ctx.needs[2].then(|| per_channel(false));
        vec![dx, dgamma, dbeta]
    }
}

/// Normalize `x: [C, D, H, W]` per channel group, then scale and shift with
/// the per-channel `gamma` and `beta`.
pub fn group_norm(
    g: &mut Graph,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    spec: GroupNormSpec,
) -> Result<NodeId> {
    spec.validate()?;
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 4 || shape[0] != spec.channels {
        return Err(Error::Shape(format!(
            "group_norm: input {shape:?} does not match {} channels",
            spec.channels
        )));
    }
    for (name, id) in [("gamma", gamma), ("beta", beta)] {
        if g.value(id).shape() != [spec.channels] {
            return Err(Error::Shape(format!(
                "group_norm: {name} {:?}, expected [{}]",
                g.value(id).shape(),
                spec.channels
            )));
        }
    }

    let voxels: usize = shape[1..].iter().product();
    let cpg = spec.channels / spec.groups;
    let group_len = cpg * voxels;
    let xd = g.value(x).data();
    let gd = g.value(gamma).data();
    let bd = g.value(beta).data();

    let stats: Vec<(f64, f64)> = (0..spec.groups)
        .into_par_iter()
        .map(|gi| {
            let seg = &xd[gi * group_len..(gi + 1) * group_len];
            let m = group_len as f64;
            let mean = seg.iter().map(|&v| v as f64).sum::<f64>() / m;
            let var = seg.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / m;
            (mean, 1.0 / (var + spec.eps as f64).sqrt())
        })
        .collect();

    let mut out = vec![0.0f32; xd.len()];
    out.par_chunks_mut(voxels).enumerate().for_each(|(c, slab)| {
        let (mean, invstd) = stats[c / cpg];
        let (ga, be) = (gd[c] as f64, bd[c] as f64);
        let base = c * voxels;
        for v in 0..voxels {
            slab[v] = (ga * (xd[base + v] as f64 - mean) * invstd + be) as f32;
        }
    });

    let value = Tensor::new(shape, out)?;
    g.push(Box::new(GroupNorm { spec, stats }), vec![x, gamma, beta], value)
}
