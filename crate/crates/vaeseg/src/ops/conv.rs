//! 3D convolution (cross-correlation) over `[C, D, H, W]` volumes.
//!
//! Kernels are cubic with extent 1 or 3, stride 1 or 2, and same-style
//! padding `k / 2`. Work is parallelized per output channel (forward, weight
//! gradient) or per input channel (input gradient) so each slab has exactly
//! one writer and results do not depend on thread scheduling.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Op, OpCtx, Tensor};

/// Static description of one convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self { in_channels, out_channels, kernel, stride }
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("conv channels must be nonzero".into()));
        }
        if !matches!(self.kernel, 1 | 3) {
            return Err(Error::Config(format!("conv kernel {} not in {{1, 3}}", self.kernel)));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(Error::Config(format!("conv stride {} not in {{1, 2}}", self.stride)));
        }
        Ok(())
    }

    /// Output extent along one spatial axis.
    pub fn out_extent(&self, n: usize) -> usize {
        (n + 2 * self.padding() - self.kernel) / self.stride + 1
    }
}

/// Half-open output range along one axis for which `out * stride + offset`
/// lands inside `[0, n_in)`.
fn out_range(n_in: usize, n_out: usize, stride: usize, offset: isize) -> (usize, usize) {
    let lo = if offset >= 0 { 0 } else { ((-offset) as usize + stride - 1) / stride };
    let top = n_in as isize - 1 - offset;
    if top < 0 {
        return (0, 0);
    }
    let hi = ((top as usize) / stride + 1).min(n_out);
    (lo.min(hi), hi)
}

struct Conv3d {
    spec: ConvSpec,
}

struct Dims {
    cin: usize,
    cout: usize,
    k: usize,
    s: usize,
    pad: isize,
    din: [usize; 3],
    dout: [usize; 3],
    in_vol: usize,
    out_vol: usize,
}

impl Dims {
    fn of(spec: &ConvSpec, in_shape: &[usize], out_spatial: [usize; 3]) -> Self {
        Dims {
            cin: spec.in_channels,
            cout: spec.out_channels,
            k: spec.kernel,
            s: spec.stride,
            pad: spec.padding() as isize,
            din: [in_shape[1], in_shape[2], in_shape[3]],
            dout: out_spatial,
            in_vol: in_shape[1] * in_shape[2] * in_shape[3],
            out_vol: out_spatial.iter().product(),
        }
    }

    fn tap_ranges(&self, kd: usize, kh: usize, kw: usize) -> [(usize, usize); 3] {
        [
            out_range(self.din[0], self.dout[0], self.s, kd as isize - self.pad),
            out_range(self.din[1], self.dout[1], self.s, kh as isize - self.pad),
            out_range(self.din[2], self.dout[2], self.s, kw as isize - self.pad),
        ]
    }

    /// Per-tap output column ranges along W plus the interior where all
    /// three taps of a 3-kernel are in bounds.
    fn k3_col_ranges(&self) -> ([(usize, usize); 3], usize, usize) {
        let ranges = [
            out_range(self.din[2], self.dout[2], self.s, -1),
            out_range(self.din[2], self.dout[2], self.s, 0),
            out_range(self.din[2], self.dout[2], self.s, 1),
        ];
        let flo = ranges.iter().map(|r| r.0).max().unwrap();
        let fhi = ranges.iter().map(|r| r.1).min().unwrap().max(flo);
        (ranges, flo, fhi)
    }
}

/// Accumulates one input channel into one output channel, kernel 3. The
/// three W taps read consecutive input columns, so they are fused into a
/// single pass per (kd, kh) pair; boundary columns fall back to single
/// taps.
fn forward_k3(slab: &mut [f32], xch: &[f32], wch: &[f32], d: &Dims) {
    let (ranges, flo, fhi) = d.k3_col_ranges();
    for kd in 0..3 {
        let (dl, dh) = out_range(d.din[0], d.dout[0], d.s, kd as isize - 1);
        for kh in 0..3 {
            let (hl, hh) = out_range(d.din[1], d.dout[1], d.s, kh as isize - 1);
            let wrow = &wch[(kd * 3 + kh) * 3..(kd * 3 + kh) * 3 + 3];
            let (w0, w1, w2) = (wrow[0], wrow[1], wrow[2]);
            for od in dl..dh {
                let id = od * d.s + kd - 1;
                for oh in hl..hh {
                    let ih = oh * d.s + kh - 1;
                    let in_row = (id * d.din[1] + ih) * d.din[2];
                    let out_row = (od * d.dout[1] + oh) * d.dout[2];
                    for ow in flo..fhi {
                        let b = in_row + ow * d.s - 1;
                        slab[out_row + ow] +=
                            w0 * xch[b] + w1 * xch[b + 1] + w2 * xch[b + 2];
                    }
                    for (kw, &(lo, hi)) in ranges.iter().enumerate() {
                        for ow in (lo..flo.min(hi)).chain(fhi.max(lo)..hi) {
                            slab[out_row + ow] += wrow[kw] * xch[in_row + ow * d.s + kw - 1];
                        }
                    }
                }
            }
        }
    }
}

/// Kernel-1 convolution: a strided scaled copy.
fn forward_k1(slab: &mut [f32], xch: &[f32], wv: f32, d: &Dims) {
    for od in 0..d.dout[0] {
        for oh in 0..d.dout[1] {
            let in_row = (od * d.s * d.din[1] + oh * d.s) * d.din[2];
            let out_row = (od * d.dout[1] + oh) * d.dout[2];
            for ow in 0..d.dout[2] {
                slab[out_row + ow] += wv * xch[in_row + ow * d.s];
            }
        }
    }
}

/// Weight gradient for kernel 3: one fused pass per (kd, kh) with three
/// row accumulators, summed per row in f32 and across rows in f64.
fn dw_k3(dst: &mut [f32], gy: &[f32], xch: &[f32], d: &Dims) {
    let (ranges, flo, fhi) = d.k3_col_ranges();
    for kd in 0..3 {
        let (dl, dh) = out_range(d.din[0], d.dout[0], d.s, kd as isize - 1);
        for kh in 0..3 {
            let (hl, hh) = out_range(d.din[1], d.dout[1], d.s, kh as isize - 1);
            let mut acc = [0.0f64; 3];
            for od in dl..dh {
                let id = od * d.s + kd - 1;
                for oh in hl..hh {
                    let ih = oh * d.s + kh - 1;
                    let in_row = (id * d.din[1] + ih) * d.din[2];
                    let out_row = (od * d.dout[1] + oh) * d.dout[2];
                    let (mut r0, mut r1, mut r2) = (0.0f32, 0.0f32, 0.0f32);
                    for ow in flo..fhi {
                        let g = gy[out_row + ow];
                        let b = in_row + ow * d.s - 1;
                        r0 += g * xch[b];
                        r1 += g * xch[b + 1];
                        r2 += g * xch[b + 2];
                    }
                    acc[0] += r0 as f64;
                    acc[1] += r1 as f64;
                    acc[2] += r2 as f64;
                    for (kw, &(lo, hi)) in ranges.iter().enumerate() {
                        let mut edge = 0.0f32;
                        for ow in (lo..flo.min(hi)).chain(fhi.max(lo)..hi) {
                            edge += gy[out_row + ow] * xch[in_row + ow * d.s + kw - 1];
                        }
                        acc[kw] += edge as f64;
                    }
                }
            }
            for kw in 0..3 {
                dst[(kd * 3 + kh) * 3 + kw] = acc[kw] as f32;
            }
        }
    }
}

/// Input gradient for kernel 3, stride 1, in gather form: each input voxel
/// reads the three output columns that used it, which vectorizes where the
/// scatter form cannot.
fn dx_k3_s1(slab: &mut [f32], gy: &[f32], wch: &[f32], d: &Dims) {
    let [dd, dh_, dw_] = d.din;
    for kd in 0..3 {
        let td = kd as isize - 1; // od = id - td
        let (idlo, idhi) = (td.max(0) as usize, (dd as isize + td.min(0)) as usize);
        for kh in 0..3 {
            let th = kh as isize - 1;
            let (ihlo, ihhi) = (th.max(0) as usize, (dh_ as isize + th.min(0)) as usize);
            let wrow = &wch[(kd * 3 + kh) * 3..(kd * 3 + kh) * 3 + 3];
            let (w0, w1, w2) = (wrow[0], wrow[1], wrow[2]);
            for id in idlo..idhi {
                let od = (id as isize - td) as usize;
                for ih in ihlo..ihhi {
                    let oh = (ih as isize - th) as usize;
                    let in_row = (id * dh_ + ih) * dw_;
                    let out_row = (od * d.dout[1] + oh) * d.dout[2];
                    for iw in 1..dw_.max(1) - 1 {
                        slab[in_row + iw] += w0 * gy[out_row + iw + 1]
                            + w1 * gy[out_row + iw]
                            + w2 * gy[out_row + iw - 1];
                    }
                    for iw in if dw_ == 1 { [0, 0] } else { [0, dw_ - 1] }[..dw_.min(2)]
                        .iter()
                        .copied()
                    {
                        let mut v = 0.0f32;
                        for (kw, &wv) in wrow.iter().enumerate() {
                            let ow = iw as isize - (kw as isize - 1);
                            if ow >= 0 && (ow as usize) < d.dout[2] {
                                v += wv * gy[out_row + ow as usize];
                            }
                        }
                        slab[in_row + iw] += v;
                    }
                }
            }
        }
    }
}

impl Op for Conv3d {
    fn name(&self) -> &'static str {
        "conv3d"
    }

    fn backward(&self, grad_out: &[f32], ctx: &OpCtx<'_>) -> Vec<Option<Vec<f32>>> {
        let x = ctx.inputs[0];
        let w = ctx.inputs[1];
        let d = Dims::of(
            &self.spec,
            x.shape(),
            [ctx.output.shape()[1], ctx.output.shape()[2], ctx.output.shape()[3]],
        );
        let xd = x.data();
        let wd = w.data();
        let ktaps = d.k * d.k * d.k;

        let dx = ctx.needs[0].then(|| {
            let mut dx = vec![0.0f32; d.cin * d.in_vol];
            dx.par_chunks_mut(d.in_vol).enumerate().for_each(|(ci, slab)| {
                for co in 0..d.cout {
                    let gy = &grad_out[co * d.out_vol..(co + 1) * d.out_vol];
                    let wch = &wd[(co * d.cin + ci) * ktaps..(co * d.cin + ci + 1) * ktaps];
                    if d.k == 3 && d.s == 1 {
                        dx_k3_s1(slab, gy, wch, &d);
                        continue;
                    }
                    // strided or pointwise taps: scatter per tap
                    for kd in 0..d.k {
                        for kh in 0..d.k {
                            for kw in 0..d.k {
                                let wv = wch[(kd * d.k + kh) * d.k + kw];
                                let [(dl, dh), (hl, hh), (wl, wh)] = d.tap_ranges(kd, kh, kw);
                                for od in dl..dh {
                                    let id = (od * d.s) as isize + kd as isize - d.pad;
                                    for oh in hl..hh {
                                        let ih = (oh * d.s) as isize + kh as isize - d.pad;
                                        let in_row = (id as usize * d.din[1] + ih as usize)
                                            * d.din[2];
                                        let out_row = (od * d.dout[1] + oh) * d.dout[2];
                                        for ow in wl..wh {
                                            let iw = (ow * d.s) as isize + kw as isize - d.pad;
                                            slab[in_row + iw as usize] += wv * gy[out_row + ow];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            });
            dx
        });

        let dw = ctx.needs[1].then(|| {
            let mut dw = vec![0.0f32; d.cout * d.cin * ktaps];
            dw.par_chunks_mut(d.cin * ktaps).enumerate().for_each(|(co, slab)| {
                let gy = &grad_out[co * d.out_vol..(co + 1) * d.out_vol];
                for ci in 0..d.cin {
                    let xch = &xd[ci * d.in_vol..(ci + 1) * d.in_vol];
                    let dst = &mut slab[ci * ktaps..(ci + 1) * ktaps];
                    if d.k == 3 {
                        dw_k3(dst, gy, xch, &d);
                        continue;
                    }
                    let [(dl, dh), (hl, hh), (wl, wh)] = d.tap_ranges(0, 0, 0);
                    let mut acc = 0.0f64;
                    for od in dl..dh {
                        for oh in hl..hh {
                            let in_row = (od * d.s * d.din[1] + oh * d.s) * d.din[2];
                            let out_row = (od * d.dout[1] + oh) * d.dout[2];
                            let mut row = 0.0f32;
                            for ow in wl..wh {
                                row += gy[out_row + ow] * xch[in_row + ow * d.s];
                            }
                            acc += row as f64;
                        }
                    }
                    dst[0] = acc as f32;
                }
            });
            dw
        });

        let db = ctx.needs[2].then(|| {
            (0..d.cout)
                .into_par_iter()
                .map(|co| {
                    grad_out[co * d.out_vol..(co + 1) * d.out_vol]
                        .iter()
                        .map(|&v| v as f64)
                        .sum::<f64>() as f32
                })
                .collect()
        });

        vec![dx, dw, db]
    }
}

/// Convolve `x: [Ci, D, H, W]` with `w: [Co, Ci, k, k, k]` plus bias
/// `b: [Co]`, producing `[Co, D', H', W']`.
pub fn conv3d(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId, spec: ConvSpec) -> Result<NodeId> {
    spec.validate()?;
    let xs = g.value(x).shape().to_vec();
    let ws = g.value(w).shape();
    let bs = g.value(b).shape();
    if xs.len() != 4 || xs[0] != spec.in_channels {
        return Err(Error::Shape(format!(
            "conv3d: input {xs:?} does not match {} channels",
            spec.in_channels
        )));
    }
    let expect_w =
        [spec.out_channels, spec.in_channels, spec.kernel, spec.kernel, spec.kernel];
    if ws != expect_w {
        return Err(Error::Shape(format!("conv3d: weight {ws:?}, expected {expect_w:?}")));
    }
    if bs != [spec.out_channels] {
        return Err(Error::Shape(format!("conv3d: bias {bs:?}, expected [{}]", spec.out_channels)));
    }
    let out_spatial = [
        spec.out_extent(xs[1]),
        spec.out_extent(xs[2]),
        spec.out_extent(xs[3]),
    ];
    let d = Dims::of(&spec, &xs, out_spatial);
    let ktaps = d.k * d.k * d.k;
    let xd = g.value(x).data();
    let wd = g.value(w).data();
    let bd = g.value(b).data();

    let mut out = vec![0.0f32; d.cout * d.out_vol];
    out.par_chunks_mut(d.out_vol).enumerate().for_each(|(co, slab)| {
        slab.fill(bd[co]);
        for ci in 0..d.cin {
            let xch = &xd[ci * d.in_vol..(ci + 1) * d.in_vol];
            let wch = &wd[(co * d.cin + ci) * ktaps..(co * d.cin + ci + 1) * ktaps];
            if d.k == 3 {
                forward_k3(slab, xch, wch, &d);
            } else {
                forward_k1(slab, xch, wch[0], &d);
            }
        }
    });

    let value = Tensor::new(
        vec![d.cout, out_spatial[0], out_spatial[1], out_spatial[2]],
        out,
    )?;
    g.push(Box::new(Conv3d { spec }), vec![x, w, b], value)
}
