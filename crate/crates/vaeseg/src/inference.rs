//! Forward-only prediction: padding bookkeeping, flip-averaged test-time
//! augmentation, multi-model ensembling, and probability decoding.

use crate::data::{LabelVolume, Volume, MODALITIES};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::vol;

/// Region probabilities `[3, D, H, W]` ordered (WT, TC, ET), in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SegProbs {
    pub dims: [usize; 3],
    pub data: Vec<f32>,
}

impl SegProbs {
    pub fn spatial_len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.spatial_len();
        &self.data[c * n..(c + 1) * n]
    }
}

/// Segmentation forward pass on an arbitrary volume: zero-pad each axis up
/// to the next multiple of eight (centered, extra voxel on the right), run
/// the trunk, crop the probabilities back to the input extent.
pub fn predict(model: &Model, volume: &Volume) -> Result<SegProbs> {
    let dims = volume.dims;
    let goal = dims.map(|d| d.div_ceil(8) * 8);
    let (padded, pdims, offset) = vol::pad_to(&volume.data, MODALITIES, dims, goal)?;
    let x = Tensor::new(vec![MODALITIES, pdims[0], pdims[1], pdims[2]], padded)?;
    let pass = model.forward_seg_only(&x)?;
    let data = vol::crop(pass.graph.value(pass.seg).data(), 3, pdims, offset, dims)?;
    Ok(SegProbs { dims, data })
}

/// Average of the eight flip-augmented predictions: for every axis subset,
/// flip the input, predict, flip the probabilities back. The subset order
/// is fixed, and the average runs in f64.
pub fn tta_predict(model: &Model, volume: &Volume) -> Result<SegProbs> {
    let dims = volume.dims;
    let mut acc: Vec<f64> = Vec::new();
    for mask in 0..8u8 {
        let axes = [mask & 1 != 0, mask & 2 != 0, mask & 4 != 0];
        let flipped = vol::flip(&volume.data, MODALITIES, dims, axes)?;
        let probs = predict(model, &Volume { dims, data: flipped })?;
        let restored = vol::flip(&probs.data, 3, dims, axes)?;
        if acc.is_empty() {
            acc = vec![0.0; restored.len()];
        }
        for (a, b) in acc.iter_mut().zip(&restored) {
            *a += *b as f64;
        }
    }
    Ok(SegProbs { dims, data: acc.iter().map(|v| (v / 8.0) as f32).collect() })
}

/// Voxelwise mean over models. Per voxel the values are sorted before the
/// f64 summation, which makes the result independent of model order.
pub fn ensemble_predict(models: &[Model], volume: &Volume, use_tta: bool) -> Result<SegProbs> {
    let first = models
        .first()
        .ok_or_else(|| Error::Config("ensemble needs at least one model".into()))?;
    for m in &models[1..] {
        if m.config != first.config {
            return Err(Error::Config(
                "ensemble members disagree on the model configuration".into(),
            ));
        }
    }
    let outs: Vec<SegProbs> = models
        .iter()
        .map(|m| if use_tta { tta_predict(m, volume) } else { predict(m, volume) })
        .collect::<Result<_>>()?;
    let n = outs[0].data.len();
    let mut vals = vec![0.0f32; models.len()];
    let mut data = vec![0.0f32; n];
    for (i, out) in data.iter_mut().enumerate() {
        for (slot, probs) in vals.iter_mut().zip(&outs) {
            *slot = probs.data[i];
        }
        vals.sort_by(|a, b| a.total_cmp(b));
        let sum: f64 = vals.iter().map(|&v| v as f64).sum();
        *out = (sum / models.len() as f64) as f32;
    }
    Ok(SegProbs { dims: volume.dims, data })
}

/// Hierarchical decode: background unless WT clears the threshold; inside
/// WT, edema (2) unless TC clears it; inside TC, necrotic core (1) unless
/// ET clears it, then enhancing tumor (4). Nesting holds by construction.
pub fn channels_to_labels(probs: &SegProbs, threshold: f32) -> Result<LabelVolume> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold {threshold} outside (0, 1)")));
    }
    let n = probs.spatial_len();
    let (wt, tc, et) = (probs.channel(0), probs.channel(1), probs.channel(2));
    let mut data = vec![0u8; n];
    for i in 0..n {
        data[i] = if wt[i] <= threshold {
            0
        } else if tc[i] <= threshold {
            2
        } else if et[i] <= threshold {
            1
        } else {
            4
        };
    }
    LabelVolume::new(probs.dims, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_phantom, labels_to_channels, normalize, Difficulty};
    use crate::model::ModelConfig;

    fn tiny_model(seed: u64) -> Model {
        let cfg = ModelConfig {
            base_filters: 2,
            blocks_per_level: vec![1, 1, 1, 1],
            crop_shape: [16, 16, 16],
            ..ModelConfig::default()
        };
        Model::build(cfg, seed).unwrap()
    }

    fn sample(seed: u64, size: [usize; 3]) -> Volume {
        let (mut image, _) = gen_phantom(seed, size, Difficulty::Medium).unwrap();
        normalize(&mut image);
        image
    }

    fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn predict_shape_range_and_determinism() {
        let model = tiny_model(1);
        let v = sample(0, [16, 24, 16]);
        let p = predict(&model, &v).unwrap();
        assert_eq!(p.dims, [16, 24, 16]);
        assert_eq!(p.data.len(), 3 * 16 * 24 * 16);
        assert!(p.data.iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert_eq!(predict(&model, &v).unwrap().data, p.data);
    }

    #[test]
    fn predict_unpads_odd_extents() {
        let model = tiny_model(1);
        // 20 is not a multiple of 8; the input is padded to 24 internally
        let v20 = {
            let full = sample(2, [24, 24, 24]);
            let data = vol::crop(&full.data, MODALITIES, [24, 24, 24], [2, 2, 2], [20, 20, 20])
                .unwrap();
            Volume { dims: [20, 20, 20], data }
        };
        let p = predict(&model, &v20).unwrap();
        assert_eq!(p.dims, [20, 20, 20]);
        assert!(p.data.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn tta_of_a_constant_model_is_constant() {
        let mut model = tiny_model(1);
        for t in model.params.values_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        // all-zero parameters give zero logits, so sigmoid is exactly 0.5
        let v = sample(3, [16, 16, 16]);
        let p = tta_predict(&model, &v).unwrap();
        assert!(p.data.iter().all(|&x| x == 0.5));
    }

    #[test]
    fn tta_equals_the_manual_eight_way_average() {
        let model = tiny_model(5);
        let v = sample(1, [16, 16, 16]);
        let tta = tta_predict(&model, &v).unwrap();

        let mut acc = vec![0.0f64; tta.data.len()];
        for mask in 0..8u8 {
            let axes = [mask & 1 != 0, mask & 2 != 0, mask & 4 != 0];
            let flipped = vol::flip(&v.data, MODALITIES, v.dims, axes).unwrap();
            let p = predict(&model, &Volume { dims: v.dims, data: flipped }).unwrap();
            let back = vol::flip(&p.data, 3, v.dims, axes).unwrap();
            for (a, b) in acc.iter_mut().zip(&back) {
                *a += *b as f64;
            }
        }
        let manual: Vec<f32> = acc.iter().map(|x| (x / 8.0) as f32).collect();
        assert_eq!(tta.data, manual);
    }

    #[test]
    fn tta_commutes_with_input_flips() {
        let model = tiny_model(5);
        let v = sample(4, [16, 16, 16]);
        let base = tta_predict(&model, &v).unwrap();
        for axis in 0..3 {
            let mut axes = [false; 3];
            axes[axis] = true;
            let flipped_in = vol::flip(&v.data, MODALITIES, v.dims, axes).unwrap();
            let from_flipped =
                tta_predict(&model, &Volume { dims: v.dims, data: flipped_in }).unwrap();
            let flipped_out = vol::flip(&base.data, 3, v.dims, axes).unwrap();
            let diff = max_abs_diff(&from_flipped.data, &flipped_out);
            assert!(diff <= 1e-5, "axis {axis}: TTA equivariance off by {diff}");
        }
    }

    #[test]
    fn ensemble_of_one_is_the_single_model() {
        let model = tiny_model(2);
        let v = sample(5, [16, 16, 16]);
        let single = predict(&model, &v).unwrap();
        let ens = ensemble_predict(std::slice::from_ref(&model), &v, false).unwrap();
        assert_eq!(single.data, ens.data);
    }

    #[test]
    fn ensemble_of_identical_models_matches_single() {
        let models = vec![tiny_model(2), tiny_model(2), tiny_model(2)];
        let v = sample(6, [16, 16, 16]);
        let single = predict(&models[0], &v).unwrap();
        let ens = ensemble_predict(&models, &v, false).unwrap();
        assert!(max_abs_diff(&single.data, &ens.data) <= 1e-6);
    }

    #[test]
    fn ensemble_is_order_invariant_bitwise() {
        let a = tiny_model(1);
        let b = tiny_model(2);
        let c = tiny_model(3);
        let v = sample(7, [16, 16, 16]);
        let abc = ensemble_predict(&[a, b, c], &v, false).unwrap();
        let a = tiny_model(1);
        let b = tiny_model(2);
        let c = tiny_model(3);
        let cab = ensemble_predict(&[c, a, b], &v, false).unwrap();
        assert_eq!(abc.data, cab.data);
    }

    #[test]
    fn ensemble_of_two_averages_voxelwise() {
        let a = tiny_model(4);
        let b = tiny_model(9);
        let v = sample(8, [16, 16, 16]);
        let pa = predict(&a, &v).unwrap();
        let pb = predict(&b, &v).unwrap();
        let ens = ensemble_predict(&[a, b], &v, false).unwrap();
        for i in 0..pa.data.len() {
            let mean = (pa.data[i] as f64 + pb.data[i] as f64) / 2.0;
            assert!((ens.data[i] as f64 - mean).abs() <= 1e-7);
        }
    }

    #[test]
    fn ensemble_rejects_mismatched_configs() {
        let a = tiny_model(1);
        let b = Model::build(
            ModelConfig { base_filters: 4, crop_shape: [16, 16, 16], ..ModelConfig::default() },
            1,
        )
        .unwrap();
        let v = sample(9, [16, 16, 16]);
        assert!(ensemble_predict(&[a, b], &v, false).is_err());
        assert!(ensemble_predict(&[], &v, false).is_err());
    }

    #[test]
    fn decode_rule_traces() {
        let mk = |wt: f32, tc: f32, et: f32| SegProbs {
            dims: [1, 1, 1],
            data: vec![wt, tc, et],
        };
        let decode = |p: &SegProbs| channels_to_labels(p, 0.5).unwrap().data[0];
        assert_eq!(decode(&mk(0.9, 0.8, 0.6)), 4);
        assert_eq!(decode(&mk(0.9, 0.2, 0.7)), 2); // ET ignored once TC gate fails
        assert_eq!(decode(&mk(0.1, 0.9, 0.9)), 0);
        assert_eq!(decode(&mk(0.6, 0.7, 0.3)), 1);
        assert!(channels_to_labels(&mk(0.5, 0.5, 0.5), 0.0).is_err());
        assert!(channels_to_labels(&mk(0.5, 0.5, 0.5), 1.0).is_err());
    }

    #[test]
    fn decoded_labels_always_re_encode_nested() {
        for seed in 0..20u64 {
            let probs = SegProbs {
                dims: [6, 6, 6],
                data: crate::gradprobe::uniform(seed, vec![3 * 216], 0.0, 1.0)
                    .data()
                    .to_vec(),
            };
            let labels = channels_to_labels(&probs, 0.5).unwrap();
            let t = labels_to_channels(&labels).unwrap();
            assert!(t.nesting_holds(), "seed {seed}");
        }
    }
}
