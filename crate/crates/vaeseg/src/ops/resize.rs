//! Trilinear upsampling by a factor of two with half-pixel alignment.
//!
//! Source positions are `(2t - 1) / 4`, so the interpolation weights are
//! always 0, 0.25, or 0.75: exact binary fractions. Each axis level blends
//! two terms as `a * w0 + b * w1`, and mirrored outputs evaluate the exact
//! same two products in swapped order, so flipping commutes with upsampling
//! bit for bit.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Op, OpCtx, Tensor};

/// Per-output-index interpolation entry: lower and upper source index plus
/// their weights. Clamped entries use weight (1, 0) so edges copy exactly.
#[derive(Clone, Copy)]
struct Lerp {
    i0: usize,
    i1: usize,
    w0: f32,
    w1: f32,
}

fn axis_table(n: usize) -> Vec<Lerp> {
    (0..2 * n)
        .map(|t| {
            let num = 2 * t as isize - 1;
            if num < 0 {
                return Lerp { i0: 0, i1: 0, w0: 1.0, w1: 0.0 };
            }
            let q = (num / 4) as usize;
            if q + 1 >= n {
                return Lerp { i0: n - 1, i1: n - 1, w0: 1.0, w1: 0.0 };
            }
            let frac = if num % 4 == 1 { 0.25 } else { 0.75 };
            Lerp { i0: q, i1: q + 1, w0: 1.0 - frac, w1: frac }
        })
        .collect()
}

struct TrilinearUp;

impl Op for TrilinearUp {
    fn name(&self) -> &'static str {
        "trilinear_up"
    }

    fn backward(&self, grad_out: &[f32], ctx: &OpCtx<'_>) -> Vec<Option<Vec<f32>>> {
        vec![ctx.needs[0].then(|| {
            let shape = ctx.inputs[0].shape();
            let (d, h, w) = (shape[1], shape[2], shape[3]);
            let in_vol = d * h * w;
            let out_vol = 8 * in_vol;
            let (td, th, tw) = (axis_table(d), axis_table(h), axis_table(w));

            let mut dx = vec![0.0f32; shape[0] * in_vol];
            dx.par_chunks_mut(in_vol).enumerate().for_each(|(c, slab)| {
                let gy = &grad_out[c * out_vol..(c + 1) * out_vol];
                for (od, ld) in td.iter().enumerate() {
                    for (oh, lh) in th.iter().enumerate() {
                        let out_row = (od * 2 * h + oh) * 2 * w;
                        for (ow, lw) in tw.iter().enumerate() {
                            let go = gy[out_row + ow];
                            for (di, dw_) in [(ld.i0, ld.w0), (ld.i1, ld.w1)] {
                                for (hi, hw_) in [(lh.i0, lh.w0), (lh.i1, lh.w1)] {
                                    for (wi, ww_) in [(lw.i0, lw.w0), (lw.i1, lw.w1)] {
                                        let wgt = dw_ * hw_ * ww_;
                                        if wgt != 0.0 {
                                            slab[(di * h + hi) * w + wi] += go * wgt;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            });
            dx
        })]
    }
}

/// Upsample `x: [C, D, H, W]` to `[C, 2D, 2H, 2W]`.
pub fn trilinear_upsample(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::Shape(format!(
            "trilinear_upsample expects [C,D,H,W], got {shape:?}"
        )));
    }
    let (c, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (td, th, tw) = (axis_table(d), axis_table(h), axis_table(w));
    let in_vol = d * h * w;
    let out_vol = 8 * in_vol;
    let xd = g.value(x).data();

    let mut out = vec![0.0f32; c * out_vol];
    out.par_chunks_mut(out_vol).enumerate().for_each(|(ci, slab)| {
        let xch = &xd[ci * in_vol..(ci + 1) * in_vol];
        let read = |di: usize, hi: usize, wi: usize| xch[(di * h + hi) * w + wi];
        for (od, ld) in td.iter().enumerate() {
            for (oh, lh) in th.iter().enumerate() {
                let out_row = (od * 2 * h + oh) * 2 * w;
                for (ow, lw) in tw.iter().enumerate() {
                    let blend_w = |di: usize, hi: usize| {
                        read(di, hi, lw.i0) * lw.w0 + read(di, hi, lw.i1) * lw.w1
                    };
                    let c0 = blend_w(ld.i0, lh.i0) * lh.w0 + blend_w(ld.i0, lh.i1) * lh.w1;
                    let c1 = blend_w(ld.i1, lh.i0) * lh.w0 + blend_w(ld.i1, lh.i1) * lh.w1;
                    slab[out_row + ow] = c0 * ld.w0 + c1 * ld.w1;
                }
            }
        }
    });

    let value = Tensor::new(vec![c, 2 * d, 2 * h, 2 * w], out)?;
    g.push(Box::new(TrilinearUp), vec![x], value)
}
