//! Finite-difference gradient check scaffolding used by the test suite.
//!
//! Checking `sum(f(x))` directly runs into f32 storage noise: the loss is
//! rounded at its own magnitude, and that rounding does not cancel between
//! the two sides of a central difference. The probe here subtracts the
//! unperturbed output `y0` (a constant captured before the check) inside the
//! graph, where the difference is tiny and exact, then projects onto a fixed
//! vector `r`. The remaining noise is only the forward rounding on the
//! perturbed path, a few f32 ulps at element scale.
//!
//! The relative error metric divides by the analytic gradient, so probes
//! should be arranged to keep gradient components bounded away from zero;
//! the per-op tests pick weight and projection ranges accordingly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::ops::{mul, sub, sum};
use crate::tensor::{grad_check, grad_check_filtered, Graph, NodeId, Tensor};

/// Tensor with entries drawn uniformly from `[lo, hi)`.
pub fn uniform(seed: u64, shape: Vec<usize>, lo: f32, hi: f32) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Tensor with magnitudes in `[lo, hi)` and random signs, keeping every
/// entry away from zero.
pub fn signed(seed: u64, shape: Vec<usize>, lo: f32, hi: f32) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(lo..hi);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Loss `sum((y - y0) * r)` used by the probes below.
pub fn probe_loss(g: &mut Graph, y: NodeId, y0: &Tensor, r: &Tensor) -> Result<NodeId> {
    let y0 = g.leaf(y0.clone());
    let r = g.leaf(r.clone());
    let centered = sub(g, y, y0)?;
    let projected = mul(g, centered, r)?;
    sum(g, projected)
}

/// Max relative gradient error for `build` at `x`, probing against the
/// projection `r`.
pub fn probe<F>(x: &Tensor, r: &Tensor, h: f64, build: F) -> f64
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let y0 = base_output(x, &build);
    grad_check(
        |g, xn| {
            let y = build(g, xn)?;
            probe_loss(g, y, &y0, r)
        },
        x,
        h,
    )
    .unwrap()
}

/// Same as [`probe`] but skipping input elements selected by `skip`.
pub fn probe_filtered<F, S>(x: &Tensor, r: &Tensor, h: f64, build: F, skip: S) -> f64
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
    S: Fn(usize, f32) -> bool,
{
    let y0 = base_output(x, &build);
    grad_check_filtered(
        |g, xn| {
            let y = build(g, xn)?;
            probe_loss(g, y, &y0, r)
        },
        x,
        h,
        skip,
    )
    .unwrap()
}

fn base_output<F>(x: &Tensor, build: &F) -> Tensor
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let xn = g.leaf(x.clone());
    let y = build(&mut g, xn).unwrap();
    g.value(y).clone()
}
