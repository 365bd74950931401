//! Evaluation metrics: per-class overlap (dice), sensitivity, specificity,
//! and surface Hausdorff distances (max and 95th percentile).
//!
//! Hausdorff uses an exact separable squared Euclidean distance transform.
//! All squared distances are integers represented exactly in f64, so the
//! result equals a brute-force all-pairs scan bit for bit.

use serde::Serialize;

use crate::data::LabelVolume;
use crate::error::{Error, Result};

/// 2|P∩G| / (|P| + |G|), or `None` when both masks are empty.
pub fn binary_dice(pred: &[bool], gt: &[bool]) -> Result<Option<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "mask lengths differ: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut overlap = 0u64;
    let mut p = 0u64;
    let mut g = 0u64;
    for (&a, &b) in pred.iter().zip(gt) {
        p += a as u64;
        g += b as u64;
        overlap += (a && b) as u64;
    }
    if p + g == 0 {
        return Ok(None);
    }
    Ok(Some(2.0 * overlap as f64 / (p + g) as f64))
}

/// TP/(TP+FN) and TN/(TN+FP); each side is `None` when its denominator
/// is zero (empty or all-covering ground truth).
pub fn sensitivity_specificity(
    pred: &[bool],
    gt: &[bool],
) -> Result<(Option<f64>, Option<f64>)> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "mask lengths differ: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let (mut tp, mut fn_, mut tn, mut fp) = (0u64, 0u64, 0u64, 0u64);
    for (&a, &b) in pred.iter().zip(gt) {
        match (a, b) {
            (true, true) => tp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
        }
    }
    let sens = (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64);
    let spec = (tn + fp > 0).then(|| tn as f64 / (tn + fp) as f64);
    Ok((sens, spec))
}

/// Boundary voxels under 6-connectivity: a set voxel with an unset
/// neighbor, or touching the grid border.
fn surface(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let [d, h, w] = dims;
    let idx = |x: usize, y: usize, z: usize| (x * h + y) * w + z;
    let mut out = vec![false; mask.len()];
    for x in 0..d {
        for y in 0..h {
            for z in 0..w {
                if !mask[idx(x, y, z)] {
                    continue;
                }
                let boundary = x == 0
                    || y == 0
                    || z == 0
                    || x == d - 1
                    || y == h - 1
                    || z == w - 1
                    || !mask[idx(x - 1, y, z)]
                    || !mask[idx(x + 1, y, z)]
                    || !mask[idx(x, y - 1, z)]
                    || !mask[idx(x, y + 1, z)]
                    || !mask[idx(x, y, z - 1)]
                    || !mask[idx(x, y, z + 1)];
                out[idx(x, y, z)] = boundary;
            }
        }
    }
    out
}

/// One-dimensional squared distance transform (lower envelope of
/// parabolas). Infinite entries are transparent; an all-infinite row stays
/// infinite.
fn dt1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k: isize = -1;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + (q * q) as f64;
        while k >= 0 {
            let p = v[k as usize];
            let s = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k as usize] {
                k -= 1;
            } else {
                break;
            }
        }
        if k < 0 {
            k = 0;
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
        } else {
            let p = v[k as usize];
            let s = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            k += 1;
            v[k as usize] = q;
            z[k as usize] = s;
            z[k as usize + 1] = f64::INFINITY;
        }
    }
    if k < 0 {
        out.fill(f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (q, slot) in out.iter_mut().enumerate() {
        while z[j + 1] < q as f64 {
            j += 1;
        }
        let p = v[j];
        let d = q as f64 - p as f64;
        *slot = d * d + f[p];
    }
}

/// Squared Euclidean distance from every voxel to the nearest site.
fn edt_squared(sites: &[bool], dims: [usize; 3]) -> Vec<f64> {
    let [d, h, w] = dims;
    let mut grid: Vec<f64> = sites
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    let longest = d.max(h).max(w);
    let mut f = vec![0.0f64; longest];
    let mut out = vec![0.0f64; longest];
    let mut v = vec![0usize; longest];
    let mut z = vec![0.0f64; longest + 1];

    // pass along W
    for x in 0..d {
        for y in 0..h {
            let base = (x * h + y) * w;
            f[..w].copy_from_slice(&grid[base..base + w]);
            dt1d(&f[..w], &mut out[..w], &mut v, &mut z);
            grid[base..base + w].copy_from_slice(&out[..w]);
        }
    }
    // pass along H
    for x in 0..d {
        for zco in 0..w {
            for y in 0..h {
                f[y] = grid[(x * h + y) * w + zco];
            }
            dt1d(&f[..h], &mut out[..h], &mut v, &mut z);
            for y in 0..h {
                grid[(x * h + y) * w + zco] = out[y];
            }
        }
    }
    // pass along D
    for y in 0..h {
        for zco in 0..w {
            for x in 0..d {
                f[x] = grid[(x * h + y) * w + zco];
            }
            dt1d(&f[..d], &mut out[..d], &mut v, &mut z);
            for x in 0..d {
                grid[(x * h + y) * w + zco] = out[x];
            }
        }
    }
    grid
}

/// Nearest-rank percentile of the directed surface distances, squared.
fn directed_sq(from_surface: &[bool], to_edt_sq: &[f64], percentile: f64) -> f64 {
    let mut dists: Vec<f64> = from_surface
        .iter()
        .zip(to_edt_sq)
        .filter(|(&s, _)| s)
        .map(|(_, &d)| d)
        .collect();
    dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let rank = ((percentile / 100.0) * dists.len() as f64).ceil() as usize;
    dists[rank.max(1) - 1]
}

/// Symmetric surface Hausdorff distance at the given percentile (95 or
/// 100), in voxel units. `None` when either mask is empty.
pub fn hausdorff(
    pred: &[bool],
    gt: &[bool],
    dims: [usize; 3],
    percentile: f64,
) -> Result<Option<f64>> {
    if percentile != 95.0 && percentile != 100.0 {
        return Err(Error::Config(format!(
            "unsupported hausdorff percentile {percentile} (expected 95 or 100)"
        )));
    }
    let n: usize = dims.iter().product();
    if pred.len() != n || gt.len() != n {
        return Err(Error::Shape(format!(
            "mask lengths {}/{} do not match dims {dims:?}",
            pred.len(),
            gt.len()
        )));
    }
    if !pred.iter().any(|&b| b) || !gt.iter().any(|&b| b) {
        return Ok(None);
    }
    let ps = surface(pred, dims);
    let gs = surface(gt, dims);
    let p_edt = edt_squared(&ps, dims);
    let g_edt = edt_squared(&gs, dims);
    let forward = directed_sq(&ps, &g_edt, percentile);
    let backward = directed_sq(&gs, &p_edt, percentile);
    Ok(Some(forward.max(backward).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub dice: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub hausdorff_max: Option<f64>,
    pub hausdorff_95: Option<f64>,
}

/// Metrics per tumor class in report column order (ET, WT, TC).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsReport {
    pub et: ClassMetrics,
    pub wt: ClassMetrics,
    pub tc: ClassMetrics,
}

impl MetricsReport {
    pub fn classes(&self) -> [(&'static str, &ClassMetrics); 3] {
        [("ET", &self.et), ("WT", &self.wt), ("TC", &self.tc)]
    }
}

fn region_mask(labels: &LabelVolume, codes: &[u8]) -> Vec<bool> {
    labels.data.iter().map(|c| codes.contains(c)).collect()
}

fn class_metrics(pred: &[bool], gt: &[bool], dims: [usize; 3]) -> Result<ClassMetrics> {
    let (sensitivity, specificity) = sensitivity_specificity(pred, gt)?;
    Ok(ClassMetrics {
        dice: binary_dice(pred, gt)?,
        sensitivity,
        specificity,
        hausdorff_max: hausdorff(pred, gt, dims, 100.0)?,
        hausdorff_95: hausdorff(pred, gt, dims, 95.0)?,
    })
}

/// Full per-class comparison of predicted and reference label grids.
pub fn evaluate_case(pred: &LabelVolume, gt: &LabelVolume) -> Result<MetricsReport> {
    if pred.dims != gt.dims {
        return Err(Error::Shape(format!(
            "label dims differ: {:?} vs {:?}",
            pred.dims, gt.dims
        )));
    }
    let dims = pred.dims;
    let classes = [
        &[4u8][..],       // ET
        &[1u8, 2, 4][..], // WT
        &[1u8, 4][..],    // TC
    ];
    let mut out = Vec::with_capacity(3);
    for codes in classes {
        let p = region_mask(pred, codes);
        let g = region_mask(gt, codes);
        out.push(class_metrics(&p, &g, dims)?);
    }
    Ok(MetricsReport { et: out[0], wt: out[1], tc: out[2] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask_from(dims: [usize; 3], set: &[[usize; 3]]) -> Vec<bool> {
        let [_, h, w] = dims;
        let mut m = vec![false; dims.iter().product()];
        for &[x, y, z] in set {
            m[(x * h + y) * w + z] = true;
        }
        m
    }

    /// All-pairs surface distance oracle.
    fn brute_hausdorff(pred: &[bool], gt: &[bool], dims: [usize; 3], percentile: f64) -> f64 {
        let ps = surface(pred, dims);
        let gs = surface(gt, dims);
        let coords = |m: &[bool]| -> Vec<[i64; 3]> {
            let [_, h, w] = dims;
            m.iter()
                .enumerate()
                .filter(|(_, &s)| s)
                .map(|(i, _)| {
                    let x = i / (h * w);
                    let r = i % (h * w);
                    [x as i64, (r / w) as i64, (r % w) as i64]
                })
                .collect()
        };
        let (pa, ga) = (coords(&ps), coords(&gs));
        let directed = |from: &[[i64; 3]], to: &[[i64; 3]]| -> f64 {
            let mut d: Vec<f64> = from
                .iter()
                .map(|a| {
                    to.iter()
                        .map(|b| {
                            ((a[0] - b[0]).pow(2) + (a[1] - b[1]).pow(2) + (a[2] - b[2]).pow(2))
                                as f64
                        })
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let rank = ((percentile / 100.0) * d.len() as f64).ceil() as usize;
            d[rank.max(1) - 1]
        };
        directed(&pa, &ga).max(directed(&ga, &pa)).sqrt()
    }

    fn random_mask(seed: u64, dims: [usize; 3], fill: f64) -> Vec<bool> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let m: Vec<bool> =
                (0..dims.iter().product()).map(|_| rng.gen_bool(fill)).collect();
            if m.iter().any(|&b| b) {
                return m;
            }
        }
    }

    #[test]
    fn dice_counts() {
        let dims = [2, 2, 2];
        let a = mask_from(dims, &[[0, 0, 0], [0, 0, 1], [0, 1, 0], [0, 1, 1]]);
        let b = mask_from(dims, &[[0, 1, 0], [0, 1, 1], [1, 0, 0], [1, 0, 1]]);
        assert_eq!(binary_dice(&a, &a).unwrap(), Some(1.0));
        assert_eq!(binary_dice(&a, &b).unwrap(), Some(0.5));
        let empty = vec![false; 8];
        assert_eq!(binary_dice(&a, &empty).unwrap(), Some(0.0));
        assert_eq!(binary_dice(&empty, &empty).unwrap(), None);
        assert!(binary_dice(&a, &[true]).is_err());
    }

    #[test]
    fn dice_matches_the_soft_coefficient_on_binary_masks() {
        use crate::losses::dice_coefficient;
        use crate::tensor::{Graph, Tensor};
        for seed in 0..10u64 {
            let a = random_mask(seed, [4, 4, 4], 0.4);
            let b = random_mask(seed ^ 0xff, [4, 4, 4], 0.4);
            let hard = binary_dice(&a, &b).unwrap().unwrap();
            let as_f32 = |m: &[bool]| -> Vec<f32> { m.iter().map(|&x| x as u32 as f32).collect() };
            let mut g = Graph::new();
            let pa = g.leaf(Tensor::new(vec![64], as_f32(&a)).unwrap());
            let pb = g.leaf(Tensor::new(vec![64], as_f32(&b)).unwrap());
            let soft = dice_coefficient(&mut g, pa, pb, 0.0).unwrap();
            let soft = g.value(soft).item().unwrap() as f64;
            assert!((hard - soft).abs() < 1e-6, "seed {seed}: {hard} vs {soft}");
        }
    }

    #[test]
    fn sensitivity_and_specificity_cases() {
        let dims = [2, 2, 2];
        let gt = mask_from(dims, &[[0, 0, 0], [0, 0, 1], [0, 1, 0], [0, 1, 1]]);
        assert_eq!(sensitivity_specificity(&gt, &gt).unwrap(), (Some(1.0), Some(1.0)));
        let all = vec![true; 8];
        assert_eq!(sensitivity_specificity(&all, &gt).unwrap(), (Some(1.0), Some(0.0)));
        let empty = vec![false; 8];
        assert_eq!(sensitivity_specificity(&gt, &empty).unwrap().0, None);
        assert!(sensitivity_specificity(&gt, &empty).unwrap().1.is_some());
        assert_eq!(sensitivity_specificity(&gt, &all).unwrap().1, None);
    }

    #[test]
    fn hausdorff_point_cases() {
        let dims = [8, 8, 8];
        let a = mask_from(dims, &[[2, 2, 2]]);
        let b = mask_from(dims, &[[2, 2, 5]]);
        assert_eq!(hausdorff(&a, &b, dims, 100.0).unwrap(), Some(3.0));
        assert_eq!(hausdorff(&a, &a, dims, 100.0).unwrap(), Some(0.0));
        assert_eq!(hausdorff(&a, &a, dims, 95.0).unwrap(), Some(0.0));
        let empty = vec![false; 512];
        assert_eq!(hausdorff(&a, &empty, dims, 100.0).unwrap(), None);
        assert_eq!(hausdorff(&empty, &empty, dims, 100.0).unwrap(), None);
        assert!(hausdorff(&a, &b, dims, 50.0).is_err());
    }

    #[test]
    fn hausdorff_shifted_cube() {
        let dims = [6, 6, 6];
        let cube = |o: usize| -> Vec<[usize; 3]> {
            let mut v = Vec::new();
            for x in 0..2 {
                for y in 0..2 {
                    for z in 0..2 {
                        v.push([x + o, y + 1, z + 1]);
                    }
                }
            }
            v
        };
        let a = mask_from(dims, &cube(1));
        let b = mask_from(dims, &cube(2));
        assert_eq!(hausdorff(&a, &b, dims, 100.0).unwrap(), Some(1.0));
    }

    #[test]
    fn hausdorff_equals_brute_force_on_small_grids() {
        for seed in 0..20u64 {
            let dims = [
                4 + (seed % 3) as usize * 6, // 4, 10, or 16
                8,
                5 + (seed % 2) as usize * 11, // 5 or 16
            ];
            let a = random_mask(seed * 2 + 1, dims, 0.3);
            let b = random_mask(seed * 2 + 2, dims, 0.3);
            for p in [95.0, 100.0] {
                let fast = hausdorff(&a, &b, dims, p).unwrap().unwrap();
                let brute = brute_hausdorff(&a, &b, dims, p);
                assert_eq!(fast, brute, "seed {seed} percentile {p}");
            }
            let hd95 = hausdorff(&a, &b, dims, 95.0).unwrap().unwrap();
            let hd100 = hausdorff(&a, &b, dims, 100.0).unwrap().unwrap();
            assert!(hd95 <= hd100, "seed {seed}");
            // symmetric by construction, but pin it
            assert_eq!(
                hausdorff(&a, &b, dims, 100.0).unwrap(),
                hausdorff(&b, &a, dims, 100.0).unwrap()
            );
        }
    }

    #[test]
    fn case_report_on_identical_labels() {
        let (_, labels) =
            crate::data::gen_phantom(5, [16, 16, 16], crate::data::Difficulty::Low).unwrap();
        let report = evaluate_case(&labels, &labels).unwrap();
        for (name, class) in report.classes() {
            assert_eq!(class.dice, Some(1.0), "{name}");
            assert_eq!(class.sensitivity, Some(1.0), "{name}");
            assert_eq!(class.specificity, Some(1.0), "{name}");
            assert_eq!(class.hausdorff_max, Some(0.0), "{name}");
            assert_eq!(class.hausdorff_95, Some(0.0), "{name}");
        }
    }

    #[test]
    fn case_report_flags_empty_classes_undefined() {
        let empty = LabelVolume::new([4, 4, 4], vec![0; 64]).unwrap();
        let report = evaluate_case(&empty, &empty).unwrap();
        for (name, class) in report.classes() {
            assert_eq!(class.dice, None, "{name}");
            assert_eq!(class.sensitivity, None, "{name}");
            assert_eq!(class.specificity, Some(1.0), "{name}");
            assert_eq!(class.hausdorff_max, None, "{name}");
        }
    }
}
