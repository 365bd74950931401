//! Dense N-d float tensors and reverse-mode automatic differentiation.
//!
//! A [`Graph`] records operations as they execute (define-by-run) into a
//! linear list of nodes; topological order holds by construction because an
//! op can only consume node ids that already exist. [`Graph::backward`]
//! replays the list in reverse, applying each op's vector-Jacobian product
//! and accumulating gradients into the leaves.
//!
//! Storage is 32-bit float throughout; reductions (sums, means, norm
//! statistics) accumulate in 64-bit. The graph is rebuilt on every forward
//! pass, so stochastic ops (dropout, latent sampling) bake their draws into
//! the recorded node and stay consistent between forward and backward.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Maximum tensor rank: channels plus three spatial axes plus one spare.
pub const MAX_RANK: usize = 5;

/// Index of a node in a [`Graph`].
pub type NodeId = usize;

/// Dense row-major f32 tensor (last axis fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor, validating that `shape` and `data` agree.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > MAX_RANK {
            return Err(Error::Shape(format!(
                "rank must be 1..={MAX_RANK}, got {}",
                shape.len()
            )));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {n} elements, data has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n]).expect("zeros: valid shape")
    }

    pub fn filled(shape: Vec<usize>, v: f32) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![v; n]).expect("filled: valid shape")
    }

    pub fn scalar(v: f32) -> Self {
        Tensor::new(vec![1], vec![v]).expect("scalar")
    }

    /// Marks (or unmarks) this tensor as a differentiation target when used
    /// as a graph leaf.
    pub fn requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn wants_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape == [1]
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> Result<f32> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::Shape(format!("item() on non-scalar shape {:?}", self.shape)))
        }
    }

    /// Same data viewed under a different shape with equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }
}

/// Borrowed context handed to an op's backward rule.
pub struct OpCtx<'a> {
    /// Forward-time input tensors, in op argument order.
    pub inputs: Vec<&'a Tensor>,
    /// Forward-time output tensor of this node.
    pub output: &'a Tensor,
    /// Which inputs need a gradient (others may return `None`).
    pub needs: Vec<bool>,
}

/// A differentiable operation: its saved forward context plus the
/// vector-Jacobian product that maps the output gradient to input gradients.
pub trait Op {
    fn name(&self) -> &'static str;

    /// Returns one gradient buffer per input (shape-matching that input),
    /// or `None` for inputs that do not need a gradient.
    fn backward(&self, grad_out: &[f32], ctx: &OpCtx<'_>) -> Vec<Option<Vec<f32>>>;
}

/// Leaf marker op; has no inputs and no backward rule of its own.
struct Leaf;

impl Op for Leaf {
    fn name(&self) -> &'static str {
        "leaf"
    }
    fn backward(&self, _grad_out: &[f32], _ctx: &OpCtx<'_>) -> Vec<Option<Vec<f32>>> {
        Vec::new()
    }
}

struct Node {
    op: Box<dyn Op>,
    inputs: Vec<NodeId>,
    value: Tensor,
    needs_grad: bool,
}

/// Dynamically built computation graph in topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf node holding `value`; the leaf participates in
    /// backward iff `value` was marked with [`Tensor::requires_grad`].
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let needs = value.wants_grad();
        self.nodes.push(Node { op: Box::new(Leaf), inputs: Vec::new(), value, needs_grad: needs });
        self.nodes.len() - 1
    }

    /// Registers a leaf from raw parts, validating shape against data length.
    pub fn build_leaf(&mut self, shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> Result<NodeId> {
        let t = Tensor::new(shape, data)?.requires_grad(requires_grad);
        Ok(self.leaf(t))
    }

    /// Registers an op node. Inputs must already exist in this graph.
    pub fn push(&mut self, op: Box<dyn Op>, inputs: Vec<NodeId>, value: Tensor) -> Result<NodeId> {
        for &i in &inputs {
            if i >= self.nodes.len() {
                return Err(Error::Graph(format!("input node {i} does not exist")));
            }
        }
        let needs = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node { op, inputs, value, needs_grad: needs });
        Ok(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id].op.name()
    }

    fn is_leaf(&self, id: NodeId) -> bool {
        self.nodes[id].inputs.is_empty()
    }

    /// Reverse-mode sweep from a scalar `loss` node.
    ///
    /// Returns gradients keyed by leaf node id, covering exactly the
    /// `requires_grad` leaves that lie on a path to the loss; leaves with a
    /// zero (disconnected) gradient are absent from the map. Each graph can
    /// run backward once — a second call is an error, since node values may
    /// alias buffers the caller has since repurposed.
    pub fn backward(&mut self, loss: NodeId) -> Result<HashMap<NodeId, Tensor>> {
        if loss >= self.nodes.len() {
            return Err(Error::Graph(format!("loss node {loss} does not exist")));
        }
        if !self.nodes[loss].value.is_scalar() {
            return Err(Error::Graph(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        if self.consumed {
            return Err(Error::Graph("backward already ran on this graph".into()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        if self.nodes[loss].needs_grad {
            grads[loss] = Some(vec![1.0]);
        }

        for id in (0..=loss).rev() {
            if self.is_leaf(id) {
                continue;
            }
            let grad_out = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            let ctx = OpCtx {
                inputs: node.inputs.iter().map(|&i| &self.nodes[i].value).collect(),
                output: &node.value,
                needs: node.inputs.iter().map(|&i| self.nodes[i].needs_grad).collect(),
            };
            let contribs = node.op.backward(&grad_out, &ctx);
            debug_assert_eq!(contribs.len(), node.inputs.len(), "{} backward arity", node.op.name());
            for (slot, contrib) in node.inputs.iter().zip(contribs) {
                let Some(c) = contrib else { continue };
                debug_assert_eq!(
                    c.len(),
                    self.nodes[*slot].value.len(),
                    "{} gradient length for input {slot}",
                    node.op.name()
                );
                match &mut grads[*slot] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&c) {
                            *a += b;
                        }
                    }
                    empty => *empty = Some(c),
                }
            }
        }

        let mut out = HashMap::new();
        for (id, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if self.is_leaf(id) && self.nodes[id].value.wants_grad() {
                    let t = Tensor::new(self.nodes[id].value.shape().to_vec(), g)?;
                    out.insert(id, t);
                }
            }
        }
        Ok(out)
    }
}

/// Central-difference gradient check of `f` at `x`.
///
/// `f` builds a scalar loss from the given input node; it must be
/// deterministic across calls. Returns the maximum over input elements of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`, with the
/// difference quotient accumulated in f64 against the actually realized f32
/// step. Use [`grad_check_filtered`] to exclude elements sitting on a
/// nondifferentiable kink (e.g. ReLU inputs within `h` of zero).
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    grad_check_filtered(f, x, h, |_, _| false)
}

/// [`grad_check`] with a per-element skip predicate `(index, value) -> bool`.
pub fn grad_check_filtered<F, S>(f: F, x: &Tensor, h: f64, skip: S) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
    S: Fn(usize, f32) -> bool,
{
    if !(1e-4..=1e-2).contains(&h) {
        return Err(Error::Config(format!("grad_check step h={h} outside [1e-4, 1e-2]")));
    }

    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.leaf(t.clone().requires_grad(false));
        let loss = f(&mut g, leaf)?;
        if !g.value(loss).is_scalar() {
            return Err(Error::Graph(format!(
                "grad_check closure output must be scalar, got {:?}",
                g.value(loss).shape()
            )));
        }
        Ok(g.value(loss).item()? as f64)
    };

    // Analytic gradient.
    let mut g = Graph::new();
    let leaf = g.leaf(x.clone().requires_grad(true));
    let loss = f(&mut g, leaf)?;
    if !g.value(loss).is_scalar() {
        return Err(Error::Graph(format!(
            "grad_check closure output must be scalar, got {:?}",
            g.value(loss).shape()
        )));
    }
    let grads = g.backward(loss)?;
    let zero;
    let analytic = match grads.get(&leaf) {
        Some(t) => t,
        None => {
            zero = Tensor::zeros(x.shape().to_vec());
            &zero
        }
    };

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let xi = x.data()[i];
        if skip(i, xi) {
            continue;
        }
        let xp = (xi as f64 + h) as f32;
        let xm = (xi as f64 - h) as f32;
        let mut plus = x.clone();
        plus.data_mut()[i] = xp;
        let mut minus = x.clone();
        minus.data_mut()[i] = xm;
        let numeric = (eval(&plus)? - eval(&minus)?) / (xp as f64 - xm as f64);
        let a = analytic.data()[i] as f64;
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
