//! Adam with polynomial learning-rate decay, L2 kernel regularization, and
//! the single-sample epoch training loop.

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::seq::SliceRandom;

use crate::data::{augment, random_crop, TargetChannels, Volume};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossWeights};
use crate::model::{ForwardPass, Model};
use crate::rng::{purpose, stream};
use crate::tensor::{NodeId, Tensor};

/// Optimizer moments plus hyperparameters. Moment buffers appear lazily the
/// first time a parameter receives a gradient, keyed and ordered by name.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub step: u64,
    pub m: IndexMap<String, Vec<f32>>,
    pub v: IndexMap<String, Vec<f32>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }
}

/// Polynomial decay alpha0 * (1 - e / N)^power, indexed by epoch.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Schedule {
    pub alpha0: f64,
    pub total_epochs: usize,
    pub power: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { alpha0: 1e-4, total_epochs: 300, power: 0.9 }
    }
}

impl Schedule {
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch > self.total_epochs {
            return Err(Error::Config(format!(
                "epoch {epoch} beyond schedule end {}",
                self.total_epochs
            )));
        }
        let frac = 1.0 - epoch as f64 / self.total_epochs as f64;
        Ok(self.alpha0 * frac.powf(self.power))
    }
}

/// Weight decay applies to convolution kernels only; they are the only
/// rank-5 parameters.
pub fn default_kernel_predicate(_name: &str, shape: &[usize]) -> bool {
    shape.len() == 5
}

/// One bias-corrected Adam update over `grads`. Parameters matching
/// `is_kernel` get the classic coupled L2 term `g += 2 * weight_decay * w`
/// before the moment update.
pub fn adam_step<P>(
    model: &mut Model,
    state: &mut AdamState,
    grads: &IndexMap<String, Vec<f32>>,
    lr: f32,
    weight_decay: f32,
    is_kernel: P,
) -> Result<()>
where
    P: Fn(&str, &[usize]) -> bool,
{
    state.step += 1;
    let bc1 = 1.0 - (state.beta1 as f64).powi(state.step as i32);
    let bc2 = 1.0 - (state.beta2 as f64).powi(state.step as i32);
    let (b1, b2) = (state.beta1, state.beta2);
    let (lr64, eps64) = (lr as f64, state.eps as f64);

    for (name, grad) in grads {
        let param = model
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Graph(format!("gradient for unknown parameter {name}")))?;
        if grad.len() != param.len() {
            return Err(Error::Shape(format!(
                "gradient length {} does not match parameter {name} ({})",
                grad.len(),
                param.len()
            )));
        }
        let decay = weight_decay != 0.0 && is_kernel(name, param.shape());
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
        let w = param.data_mut();
        for i in 0..w.len() {
            let mut g = grad[i];
            if decay {
                g += 2.0 * weight_decay * w[i];
            }
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mhat = m[i] as f64 / bc1;
            let vhat = v[i] as f64 / bc2;
            w[i] -= (lr64 * mhat / (vhat.sqrt() + eps64)) as f32;
        }
    }
    Ok(())
}

/// Pull the gradients a backward pass produced for model parameters into a
/// name-keyed map, in parameter encounter order.
pub fn collect_param_grads(
    pass: &ForwardPass,
    grads: &HashMap<NodeId, Tensor>,
) -> IndexMap<String, Vec<f32>> {
    let mut out = IndexMap::new();
    for (name, node) in &pass.param_nodes {
        if let Some(t) = grads.get(node) {
            out.insert(name.clone(), t.data().to_vec());
        }
    }
    out
}

/// One training sample: a normalized image and its region masks at full
/// volume size (cropping happens per epoch).
#[derive(Debug, Clone)]
pub struct TrainCase {
    pub image: Volume,
    pub target: TargetChannels,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub dice_loss: f64,
    pub l2: f64,
    pub kl: f64,
    pub total: f64,
    pub steps: usize,
}

/// One pass over the dataset in a seeded random order: augment, crop,
/// forward, loss, backward, Adam, one step per sample. All randomness
/// derives from (`run_seed`, epoch, sample index), so results do not depend
/// on scheduling.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    model: &mut Model,
    dataset: &[TrainCase],
    state: &mut AdamState,
    schedule: &Schedule,
    weights: &LossWeights,
    weight_decay: f32,
    epoch: usize,
    run_seed: u64,
) -> Result<EpochStats> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let lr = schedule.lr_at(epoch)?;

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut stream(run_seed, &[purpose::SHUFFLE, epoch as u64]));

    let mut sums = [0.0f64; 4];
    for &idx in &order {
        let case = &dataset[idx];
        let mut sample_rng =
            stream(run_seed, &[purpose::AUGMENT, epoch as u64, idx as u64]);
        let (img, tgt) = augment(&case.image, &case.target, &mut sample_rng)?;
        let (img, tgt) =
            random_crop(&img, &tgt, model.config.crop_shape, &mut sample_rng)?;

        let mut model_rng =
            stream(run_seed, &[purpose::DROPOUT, epoch as u64, idx as u64]);
        let x = img.to_tensor();
        let mut pass = model.forward(&x, &mut model_rng, true)?;
        let target = pass.graph.leaf(tgt.to_tensor());
        let loss = total_loss(&mut pass, target, weights)?;

        let scalar = |id: NodeId| pass.graph.value(id).item().map(|v| v as f64);
        sums[0] += scalar(loss.dice)?;
        sums[1] += scalar(loss.l2)?;
        sums[2] += scalar(loss.kl)?;
        sums[3] += scalar(loss.total)?;

        let grads = pass.graph.backward(loss.total)?;
        let named = collect_param_grads(&pass, &grads);
        adam_step(model, state, &named, lr as f32, weight_decay, default_kernel_predicate)?;
    }

    let n = dataset.len() as f64;
    Ok(EpochStats {
        epoch,
        lr,
        dice_loss: sums[0] / n,
        l2: sums[1] / n,
        kl: sums[2] / n,
        total: sums[3] / n,
        steps: dataset.len(),
    })
}
