//! Volumes, labels, normalization, augmentation, cropping, and the synthetic
//! phantom generator used for desk-scale training runs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{purpose, stream};
use crate::tensor::Tensor;
use crate::vol;

pub const MODALITIES: usize = 4;
/// Segmentation target channels, in fixed order.
pub const REGIONS: [&str; 3] = ["WT", "TC", "ET"];

/// A four-modality image grid, row-major `[4, D, H, W]`. Channel order is
/// T1, T1c, T2, FLAIR by convention.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let want = MODALITIES * dims.iter().product::<usize>();
        if data.len() != want {
            return Err(Error::Shape(format!(
                "volume data length {} does not match 4 channels of {dims:?}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("volume contains non-finite values".into()));
        }
        Ok(Self { dims, data })
    }

    pub fn spatial_len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.spatial_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn to_tensor(&self) -> Tensor {
        let [d, h, w] = self.dims;
        Tensor::new(vec![MODALITIES, d, h, w], self.data.clone()).expect("volume is consistent")
    }
}

/// Integer label grid `[D, H, W]` with codes 0 (background), 1 (necrotic or
/// non-enhancing core), 2 (edema), 4 (enhancing tumor).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    pub dims: [usize; 3],
    pub data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], data: Vec<u8>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "label data length {} does not match {dims:?}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| ![0, 1, 2, 4].contains(*v)) {
            return Err(Error::Data(format!("unknown label code {bad}")));
        }
        Ok(Self { dims, data })
    }
}

/// Binary region masks `[3, D, H, W]` ordered (WT, TC, ET), nested so that
/// ET ⊆ TC ⊆ WT voxelwise.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetChannels {
    pub dims: [usize; 3],
    pub data: Vec<f32>,
}

impl TargetChannels {
    pub fn spatial_len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.spatial_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn to_tensor(&self) -> Tensor {
        let [d, h, w] = self.dims;
        Tensor::new(vec![3, d, h, w], self.data.clone()).expect("target is consistent")
    }

    /// ET ⊆ TC ⊆ WT at every voxel.
    pub fn nesting_holds(&self) -> bool {
        let n = self.spatial_len();
        (0..n).all(|i| {
            let (wt, tc, et) = (self.data[i], self.data[n + i], self.data[2 * n + i]);
            et <= tc && tc <= wt
        })
    }
}

/// Mean and population std over the nonzero entries, or `None` when fewer
/// than two nonzero voxels exist or their variance vanishes.
fn nonzero_stats(values: &[f32]) -> Option<(f64, f64)> {
    let mut n = 0usize;
    let mut sum = 0.0f64;
    for &v in values {
        if v != 0.0 {
            n += 1;
            sum += v as f64;
        }
    }
    if n < 2 {
        return None;
    }
    let mean = sum / n as f64;
    let mut sq = 0.0f64;
    for &v in values {
        if v != 0.0 {
            let d = v as f64 - mean;
            sq += d * d;
        }
    }
    let var = sq / n as f64;
    if var == 0.0 {
        return None;
    }
    Some((mean, var.sqrt()))
}

/// Per channel: statistics over nonzero voxels only, transform applied to
/// every voxel (background zeros move to -mean/std). Degenerate channels
/// pass through with a warning.
pub fn normalize(volume: &mut Volume) {
    let n = volume.spatial_len();
    for c in 0..MODALITIES {
        let ch = &mut volume.data[c * n..(c + 1) * n];
        match nonzero_stats(ch) {
            Some((mean, std)) => {
                for v in ch.iter_mut() {
                    *v = ((*v as f64 - mean) / std) as f32;
                }
            }
            None => {
                log::warn!("channel {c} has no usable nonzero statistics, left unchanged");
            }
        }
    }
}

/// Random per-channel intensity scale and shift, then up to three axis
/// flips applied identically to image and target.
///
/// Draw order is fixed for reproducibility: per channel (scale, shift),
/// then one flip decision per spatial axis.
pub fn augment(
    volume: &Volume,
    target: &TargetChannels,
    rng: &mut ChaCha8Rng,
) -> Result<(Volume, TargetChannels)> {
    if volume.dims != target.dims {
        return Err(Error::Shape(format!(
            "image dims {:?} differ from target dims {:?}",
            volume.dims, target.dims
        )));
    }
    let n = volume.spatial_len();
    let mut image = volume.data.clone();
    for c in 0..MODALITIES {
        let u: f32 = rng.gen_range(0.9..1.1);
        let s: f32 = rng.gen_range(-0.1..0.1);
        let ch = &mut image[c * n..(c + 1) * n];
        // shift is expressed in units of the channel's current nonzero std
        let sigma = nonzero_stats(ch).map_or(1.0, |(_, std)| std as f32);
        for v in ch.iter_mut() {
            *v = *v * u + s * sigma;
        }
    }
    let axes = [rng.gen_bool(0.5), rng.gen_bool(0.5), rng.gen_bool(0.5)];
    let image = vol::flip(&image, MODALITIES, volume.dims, axes)?;
    let tdata = vol::flip(&target.data, 3, target.dims, axes)?;
    Ok((
        Volume { dims: volume.dims, data: image },
        TargetChannels { dims: target.dims, data: tdata },
    ))
}

/// Uniform random corner crop applied identically to image and target,
/// zero-padding symmetrically first on any axis smaller than the crop.
pub fn random_crop(
    volume: &Volume,
    target: &TargetChannels,
    crop: [usize; 3],
    rng: &mut ChaCha8Rng,
) -> Result<(Volume, TargetChannels)> {
    if volume.dims != target.dims {
        return Err(Error::Shape(format!(
            "image dims {:?} differ from target dims {:?}",
            volume.dims, target.dims
        )));
    }
    let goal = [
        volume.dims[0].max(crop[0]),
        volume.dims[1].max(crop[1]),
        volume.dims[2].max(crop[2]),
    ];
    let (image, dims, _) = vol::pad_to(&volume.data, MODALITIES, volume.dims, goal)?;
    let (tdata, _, _) = vol::pad_to(&target.data, 3, target.dims, goal)?;
    let mut corner = [0usize; 3];
    for a in 0..3 {
        corner[a] = rng.gen_range(0..=dims[a] - crop[a]);
    }
    let image = vol::crop(&image, MODALITIES, dims, corner, crop)?;
    let tdata = vol::crop(&tdata, 3, dims, corner, crop)?;
    Ok((Volume { dims: crop, data: image }, TargetChannels { dims: crop, data: tdata }))
}

/// Expand label codes into the nested region masks: WT = {1, 2, 4},
/// TC = {1, 4}, ET = {4}.
pub fn labels_to_channels(labels: &LabelVolume) -> Result<TargetChannels> {
    let n: usize = labels.dims.iter().product();
    let mut data = vec![0.0f32; 3 * n];
    for (i, &code) in labels.data.iter().enumerate() {
        let (wt, tc, et) = match code {
            0 => (0.0, 0.0, 0.0),
            1 => (1.0, 1.0, 0.0),
            2 => (1.0, 0.0, 0.0),
            4 => (1.0, 1.0, 1.0),
            other => return Err(Error::Data(format!("unknown label code {other}"))),
        };
        data[i] = wt;
        data[n + i] = tc;
        data[2 * n + i] = et;
    }
    Ok(TargetChannels { dims: labels.dims, data })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Low,
    Medium,
    High,
}

impl Difficulty {
    pub fn noise_sigma(self) -> f64 {
        match self {
            Difficulty::Low => 0.03,
            Difficulty::Medium => 0.08,
            Difficulty::High => 0.15,
        }
    }
}

impl std::str::FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "low" => Ok(Difficulty::Low),
            "medium" => Ok(Difficulty::Medium),
            "high" => Ok(Difficulty::High),
            other => Err(Error::Config(format!(
                "unknown difficulty {other:?} (expected low, medium, or high)"
            ))),
        }
    }
}

impl std::fmt::Display for Difficulty {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Difficulty::Low => "low",
            Difficulty::Medium => "medium",
            Difficulty::High => "high",
        })
    }
}

/// Mean intensity per (modality, tissue) with tissue columns ordered
/// (healthy brain, edema, necrotic core, enhancing). Rough relative
/// contrasts of the four MRI sequences.
const TISSUE_MEANS: [[f64; 4]; MODALITIES] = [
    [1.00, 0.70, 0.45, 0.60], // T1
    [1.00, 0.70, 0.40, 1.60], // T1c
    [0.55, 1.45, 0.90, 0.80], // T2
    [0.65, 1.50, 1.05, 0.90], // FLAIR
];

struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        let mut acc = 0.0;
        for a in 0..3 {
            let t = (p[a] - self.center[a]) / self.semi[a];
            acc += t * t;
        }
        acc <= 1.0
    }
}

/// Child ellipsoid strictly inside `outer`: semi-axes shrunk by `ratio`
/// (per-axis ratios when `ratios` differ), center offset by at most a
/// quarter of the per-axis gap. Containment stays exact for ratios >= 0.35
/// and the surrounding shell keeps at least three quarters of the gap on
/// every side, so no tissue ring thins out to nothing.
fn nested_ellipsoid(rng: &mut ChaCha8Rng, outer: &Ellipsoid, ratios: [f64; 3]) -> Ellipsoid {
    let semi = [
        outer.semi[0] * ratios[0],
        outer.semi[1] * ratios[1],
        outer.semi[2] * ratios[2],
    ];
    let mut center = [0.0; 3];
    for a in 0..3 {
        let slack = (outer.semi[a] - semi[a]) * 0.25;
        center[a] = outer.center[a] + rng.gen_range(-1.0..1.0) * slack;
    }
    Ellipsoid { center, semi }
}

/// Deterministic synthetic case: a brain ellipsoid on zero background with
/// three nested tumor ellipsoids (whole tumor, core, enhancing), modality
/// contrasts from [`TISSUE_MEANS`] with a per-case channel scale, and
/// Gaussian noise inside the brain controlled by `difficulty`.
pub fn gen_phantom(
    seed: u64,
    size: [usize; 3],
    difficulty: Difficulty,
) -> Result<(Volume, LabelVolume)> {
    for (axis, &d) in size.iter().enumerate() {
        if d < 16 || d % 8 != 0 {
            return Err(Error::Data(format!(
                "phantom axis {axis} extent {d} must be >= 16 and divisible by 8"
            )));
        }
    }
    let mut rng = stream(seed, &[purpose::PHANTOM]);
    let scale = *size.iter().min().unwrap() as f64;

    let mut brain = Ellipsoid { center: [0.0; 3], semi: [0.0; 3] };
    for a in 0..3 {
        brain.center[a] = size[a] as f64 / 2.0 + rng.gen_range(-0.03..0.03) * scale;
    }
    for a in 0..3 {
        brain.semi[a] = rng.gen_range(0.33..0.43) * scale;
    }
    // nesting ratios keep every tissue shell at least about a voxel thick
    // at 32 voxels per axis, so each region boundary stays resolvable at
    // the sizes the generator targets
    let wt_ratios = {
        let mut r = [0.0; 3];
        for (a, slot) in r.iter_mut().enumerate() {
            *slot = rng.gen_range(0.22..0.27) * scale / brain.semi[a];
        }
        r
    };
    let wt = nested_ellipsoid(&mut rng, &brain, wt_ratios);
    let tc_ratio = rng.gen_range(0.64..0.72);
    let tc = nested_ellipsoid(&mut rng, &wt, [tc_ratio; 3]);
    let et_ratio = rng.gen_range(0.64..0.72);
    let et = nested_ellipsoid(&mut rng, &tc, [et_ratio; 3]);

    let mut channel_scale = [0.0f64; MODALITIES];
    for s in channel_scale.iter_mut() {
        *s = rng.gen_range(0.9..1.1);
    }

    let n: usize = size.iter().product();
    let mut labels = vec![0u8; n];
    let mut tissue = vec![usize::MAX; n];
    let mut idx = 0;
    for d in 0..size[0] {
        for h in 0..size[1] {
            for w in 0..size[2] {
                let p = [d as f64, h as f64, w as f64];
                if et.contains(p) {
                    labels[idx] = 4;
                    tissue[idx] = 3;
                } else if tc.contains(p) {
                    labels[idx] = 1;
                    tissue[idx] = 2;
                } else if wt.contains(p) {
                    labels[idx] = 2;
                    tissue[idx] = 1;
                } else if brain.contains(p) {
                    tissue[idx] = 0;
                }
                idx += 1;
            }
        }
    }

    let noise = Normal::new(0.0, difficulty.noise_sigma()).expect("positive sigma");
    let mut image = vec![0.0f32; MODALITIES * n];
    for c in 0..MODALITIES {
        for (i, &t) in tissue.iter().enumerate() {
            if t == usize::MAX {
                continue; // background stays exactly zero
            }
            let v = TISSUE_MEANS[c][t] * channel_scale[c] + noise.sample(&mut rng);
            image[c * n + i] = v.max(1e-3) as f32;
        }
    }
    Ok((Volume::new(size, image)?, LabelVolume::new(size, labels)?))
}
