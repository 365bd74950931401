//! Elementwise ops, reductions, shape ops, the dense layer, channel dropout,
//! and the latent-sampling composition.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Op, OpCtx, Tensor};

fn check_same_shape(g: &Graph, a: NodeId, b: NodeId, what: &str) -> Result<()> {
    if g.value(a).shape() != g.value(b).shape() {
        return Err(Error::Shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            g.value(a).shape(),
            g.value(b).shape()
        )));
    }
    Ok(())
}

// ---- binary elementwise ----

struct Add;
impl Op for Add {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, grad_out: &[f32], ctx: &OpCtx<'_>) -> Vec<Option<Vec<f32>>> {
        let pass = |need: bool| need.then(|| grad_out.to_vec());
        vec![pass(ctx.needs[0]), pass(ctx.needs[1])]
    }
}

/// Elementwise `a + b` (equal shapes).
pub fn add(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    check_same_shape(g, a, b, "add")?;
    let data = g
        .value(a)
        .data()
        .iter()
        .zip(g.value(b).data())
        .map(|(x, y)| x + y)
        .collect();
    let value = Tensor::new(g.value(a).shape().to_vec(), data)?;
    g.push(Box::new(Add), vec![a, b], value)
}

struct Sub;
impl Op for Sub {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, grad_out: &[f32], ctx: &OpCtx<'_>) -> Vec<Option<Vec<f32>>> {
        let da = ctx.needs[0].then(|| grad_out.to_vec());
        let db = ctx.needs[1].then(|| grad_out.iter().map(|v| -v).collect());
        vec![da, db]
    }
}

/// Elementwise `a - b` (equal shapes).
pub fn sub(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    check_same_shape(g, a, b, "sub")?;
    let data = g
        .value(a)
        .data()
        .iter()
        .zip(g.value(b).data())
        .map(|(x, y)| x - y)
        .collect();
    let value = Tensor::new(g.value(a).shape().to_vec(), data)?;
    g.push(Box::new(Sub), vec![a, b], value)
}

struct Mul;
impl Op for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, grad_out: &[f32], ctx: &OpCtx<'_>) -> Vec<Option<Vec<f32>>> {
        let da = ctx.needs[0].then(|| {
            grad_out.iter().zip(ctx.inputs[1].data()).map(|(go, y)| go * y).collect()
        });
        let db = ctx.needs[1].then(|| {
            grad_out.iter().zip(ctx.inputs[0].data()).map(|(go, x)| go * x).collect()
        });
        vec![da, db]
    }
}

/// Elementwise `a * b` (equal shapes).
pub fn mul(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    check_same_shape(g, a, b, "mul")?;
    let data = g
        .value(a)
        .data()
        .iter()
        .zip(g.value(b).data())
        .map(|(x, y)| x * y)
        .collect();
    let value = Tensor::new(g.value(a).shape().to_vec(), data)?;
    g.push(Box::new(Mul), vec![a, b], value)
}

struct Div;
impl Op for Div {
    fn name(&self) -> &'static str {
        "div"
    }
    fn backward(&self, grad_out: &[f32], ctx: &OpCtx<'_>) -> Vec<Option<Vec<f32>>> {
        let a = ctx.inputs[0].data();
        let b = ctx.inputs[1].data();
        let da = ctx.needs[0].then(|| grad_out.iter().zip(b).map(|(go, y)| go / y).collect());
        let db = ctx.needs[1].then(|| {
            grad_out
                .iter()
                .zip(a.iter().zip(b))
                .map(|(go, (x, y))| -go * x / (y * y))
                .collect()
        });
        vec![da, db]
    }
}

/// Elementwise `a / b` (equal shapes).
pub fn div(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    check_same_shape(g, a, b, "div")?;
    let data = g
        .value(a)
        .data()
        .iter()
        .zip(g.value(b).data())
        .map(|(x, y)| x / y)
        .collect();
    let value = Tensor::new(g.value(a).shape().to_vec(), data)?;
    g.push(Box::new(Div), vec![a, b], value)
}

// ---- scalar-broadcast ----

struct AddScalar;
impl Op for AddScalar {
    fn name(&self) -> &'static str {
        "add_scalar"
    }
    fn backward(&self, grad_out: &[f32], ctx: &OpCtx<'_>) -> Vec<Option<Vec<f32>>> {
        vec![ctx.needs[0].then(|| grad_out.to_vec())]
    }
}

/// `x + c` for a plain constant `c`.
pub fn add_scalar(g: &mut Graph, x: NodeId, c: f32) -> Result<NodeId> {
    let data = g.value(x).data().iter().map(|v| v + c).collect();
    let value = Tensor::new(g.value(x).shape().to_vec(), data)?;
    g.push(Box::new(AddScalar), vec![x], value)
}

struct MulScalar {
    c: f32,
}
impl Op for MulScalar {
    fn name(&self) -> &'static str {
        "mul_scalar"
    }
    fn backward(&self, grad_out: &[f32], ctx: &OpCtx<'_>) -> Vec<Option<Vec<f32>>> {
        vec![ctx.needs[0].then(|| grad_out.iter().map(|v| v * self.c).collect())]
    }
}

/// `x * c` for a plain constant `c`.
pub fn mul_scalar(g: &mut Graph, x: NodeId, c: f32) -> Result<NodeId> {
    let data = g.value(x).data().iter().map(|v| v * c).collect();
    let value = Tensor::new(g.value(x).shape().to_vec(), data)?;
    g.push(Box::new(MulScalar { c }), vec![x], value)
}

// ---- unary elementwise ----

struct Relu;
impl Op for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }
    // Gradient at exactly 0 is defined as 0.
    fn backward(&self, grad_out: &[f32], ctx: &OpCtx<'_>) -> Vec<Option<Vec<f32>>> {
        vec![ctx.needs[0].then(|| {
            grad_out
                .iter()
                .zip(ctx.inputs[0].data())
                .map(|(go, x)| if *x > 0.0 { *go } else { 0.0 })
                .collect()
        })]
    }
}

pub fn relu(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let data = g.value(x).data().iter().map(|v| v.max(0.0)).collect();
    let value = Tensor::new(g.value(x).shape().to_vec(), data)?;
    g.push(Box::new(Relu), vec![x], value)
}

struct Sigmoid;
impl Op for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn backward(&self, grad_out: &[f32], ctx: &OpCtx<'_>) -> Vec<Option<Vec<f32>>> {
        vec![ctx.needs[0].then(|| {
            grad_out
                .iter()
                .zip(ctx.output.data())
                .map(|(go, y)| go * y * (1.0 - y))
                .collect()
        })]
    }
}

fn sigmoid_stable(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let data = g.value(x).data().iter().map(|v| sigmoid_stable(*v)).collect();
    let value = Tensor::new(g.value(x).shape().to_vec(), data)?;
    g.push(Box::new(Sigmoid), vec![x], value)
}

struct Exp;
impl Op for Exp {
    fn name(&self) -> &'static str {
        "exp"
    }
    fn backward(&self, grad_out: &[f32], ctx: &OpCtx<'_>) -> Vec<Option<Vec<f32>>> {
        vec![ctx.needs[0].then(|| {
            grad_out.iter().zip(ctx.output.data()).map(|(go, y)| go * y).collect()
        })]
    }
}

pub fn exp(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let data = g.value(x).data().iter().map(|v| v.exp()).collect();
    let value = Tensor::new(g.value(x).shape().to_vec(), data)?;
    g.push(Box::new(Exp), vec![x], value)
}

struct Square;
impl Op for Square {
    fn name(&self) -> &'static str {
        "square"
    }
    fn backward(&self, grad_out: &[f32], ctx: &OpCtx<'_>) -> Vec<Option<Vec<f32>>> {
        vec![ctx.needs[0].then(|| {
            grad_out
                .iter()
                .zip(ctx.inputs[0].data())
                .map(|(go, x)| 2.0 * x * go)
                .collect()
        })]
    }
}

pub fn square(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let data = g.value(x).data().iter().map(|v| v * v).collect();
    let value = Tensor::new(g.value(x).shape().to_vec(), data)?;
    g.push(Box::new(Square), vec![x], value)
}

// ---- reductions ----

struct Sum;
impl Op for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, grad_out: &[f32], ctx: &OpCtx<'_>) -> Vec<Option<Vec<f32>>> {
        vec![ctx.needs[0].then(|| vec![grad_out[0]; ctx.inputs[0].len()])]
    }
}

/// Sum of all elements to a scalar, accumulated in f64.
pub fn sum(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let total: f64 = g.value(x).data().iter().map(|&v| v as f64).sum();
    g.push(Box::new(Sum), vec![x], Tensor::scalar(total as f32))
}

/// Mean of all elements to a scalar.
pub fn mean(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let n = g.value(x).len();
    let s = sum(g, x)?;
    mul_scalar(g, s, 1.0 / n as f32)
}

// ---- shape ops ----

struct Reshape;
impl Op for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, grad_out: &[f32], ctx: &OpCtx<'_>) -> Vec<Option<Vec<f32>>> {
        vec![ctx.needs[0].then(|| grad_out.to_vec())]
    }
}

pub fn reshape(g: &mut Graph, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
    let value = g.value(x).reshaped(shape)?;
    g.push(Box::new(Reshape), vec![x], value)
}

struct Slice {
    start: usize,
}
impl Op for Slice {
    fn name(&self) -> &'static str {
        "slice"
    }
    fn backward(&self, grad_out: &[f32], ctx: &OpCtx<'_>) -> Vec<Option<Vec<f32>>> {
        vec![ctx.needs[0].then(|| {
            let mut dx = vec![0.0f32; ctx.inputs[0].len()];
            dx[self.start..self.start + grad_out.len()].copy_from_slice(grad_out);
            dx
        })]
    }
}

/// Contiguous element range `[start, start + prod(shape))` of `x`, viewed as
/// `shape`. Works on the row-major buffer, so a whole channel of a
/// `[C, D, H, W]` tensor is one slice.
pub fn slice(g: &mut Graph, x: NodeId, start: usize, shape: Vec<usize>) -> Result<NodeId> {
    let len: usize = shape.iter().product();
    if start + len > g.value(x).len() {
        return Err(Error::Shape(format!(
            "slice [{start}, {}) out of bounds for {} elements",
            start + len,
            g.value(x).len()
        )));
    }
    let data = g.value(x).data()[start..start + len].to_vec();
    let value = Tensor::new(shape, data)?;
    g.push(Box::new(Slice { start }), vec![x], value)
}

// ---- dense layer ----

struct Dense;
impl Op for Dense {
    fn name(&self) -> &'static str {
        "dense"
    }
    fn backward(&self, grad_out: &[f32], ctx: &OpCtx<'_>) -> Vec<Option<Vec<f32>>> {
        let x = ctx.inputs[0].data();
        let w = ctx.inputs[1].data();
        let n = x.len();
        let m = grad_out.len();

        let dx = ctx.needs[0].then(|| {
            let mut dx = vec![0.0f32; n];
            for (j, dxj) in dx.iter_mut().enumerate() {
                let mut acc = 0.0f64;
                for i in 0..m {
                    acc += (grad_out[i] * w[i * n + j]) as f64;
                }
                *dxj = acc as f32;
            }
            dx
        });
        let dw = ctx.needs[1].then(|| {
            let mut dw = vec![0.0f32; m * n];
            for i in 0..m {
                let go = grad_out[i];
                for j in 0..n {
                    dw[i * n + j] = go * x[j];
                }
            }
            dw
        });
        let db = ctx.needs[2].then(|| grad_out.to_vec());
        vec![dx, dw, db]
    }
}

/// Fully connected layer `W x + b` with `x: [n]`, `W: [m, n]`, `b: [m]`.
pub fn dense(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let (xs, ws, bs) = (g.value(x).shape(), g.value(w).shape(), g.value(b).shape());
    if xs.len() != 1 || ws.len() != 2 || bs.len() != 1 || ws[1] != xs[0] || ws[0] != bs[0] {
        return Err(Error::Shape(format!(
            "dense: incompatible shapes x{xs:?} w{ws:?} b{bs:?}"
        )));
    }
    let (m, n) = (ws[0], ws[1]);
    let xd = g.value(x).data();
    let wd = g.value(w).data();
    let bd = g.value(b).data();
    let mut out = vec![0.0f32; m];
    for i in 0..m {
        let mut acc = bd[i] as f64;
        let row = &wd[i * n..(i + 1) * n];
        for j in 0..n {
            acc += (row[j] * xd[j]) as f64;
        }
        out[i] = acc as f32;
    }
    let value = Tensor::new(vec![m], out)?;
    g.push(Box::new(Dense), vec![x, w, b], value)
}

// ---- spatial dropout ----

struct SpatialDropout {
    /// Per-channel multiplier: 0 for dropped channels, 1/(1-rate) otherwise.
    mask: Vec<f32>,
    voxels: usize,
}
impl Op for SpatialDropout {
    fn name(&self) -> &'static str {
        "spatial_dropout"
    }
    fn backward(&self, grad_out: &[f32], ctx: &OpCtx<'_>) -> Vec<Option<Vec<f32>>> {
        vec![ctx.needs[0].then(|| {
            let mut dx = vec![0.0f32; grad_out.len()];
            for (c, &scale) in self.mask.iter().enumerate() {
                if scale != 0.0 {
                    let base = c * self.voxels;
                    for v in 0..self.voxels {
                        dx[base + v] = grad_out[base + v] * scale;
                    }
                }
            }
            dx
        })]
    }
}

/// Channel dropout on a `[C, D, H, W]` tensor: in training mode each channel
/// is zeroed with probability `rate` and survivors are scaled by
/// `1/(1-rate)`; in eval mode (or at rate 0) this is the identity and pushes
/// no node.
pub fn spatial_dropout<R: Rng>(
    g: &mut Graph,
    x: NodeId,
    rate: f32,
    rng: &mut R,
    training: bool,
) -> Result<NodeId> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::Shape(format!("spatial_dropout expects [C,D,H,W], got {shape:?}")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let channels = shape[0];
    let voxels: usize = shape[1..].iter().product();
    let keep_scale = 1.0 / (1.0 - rate);
    let mask: Vec<f32> = (0..channels)
        .map(|_| if rng.gen::<f32>() < rate { 0.0 } else { keep_scale })
        .collect();

    let xd = g.value(x).data();
    let mut out = vec![0.0f32; xd.len()];
    for (c, &scale) in mask.iter().enumerate() {
        if scale != 0.0 {
            let base = c * voxels;
            for v in 0..voxels {
                out[base + v] = xd[base + v] * scale;
            }
        }
    }
    let value = Tensor::new(shape, out)?;
    g.push(Box::new(SpatialDropout { mask, voxels }), vec![x], value)
}

// ---- latent sampling ----

/// Reparameterized Gaussian sample `z = mu + exp(0.5 * logvar) * eps` with
/// `eps ~ N(0, I)` drawn from `rng`. Gradients flow to `mu` and `logvar`;
/// `eps` is recorded as a constant leaf.
pub fn reparameterize<R: Rng>(
    g: &mut Graph,
    mu: NodeId,
    logvar: NodeId,
    rng: &mut R,
) -> Result<NodeId> {
    check_same_shape(g, mu, logvar, "reparameterize")?;
    let shape = g.value(mu).shape().to_vec();
    let n = g.value(mu).len();
    let eps_data: Vec<f32> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let eps = g.leaf(Tensor::new(shape, eps_data)?);
    let half_logvar = mul_scalar(g, logvar, 0.5)?;
    let std = exp(g, half_logvar)?;
    let noise = mul(g, std, eps)?;
    add(g, mu, noise)
}
