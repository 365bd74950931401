//! Command implementations behind the CLI: phantom dataset generation,
//! training, inference, and evaluation. Each is an ordinary function so the
//! whole pipeline can run inside a test.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{gen_phantom, labels_to_channels, normalize, Difficulty};
use crate::error::{Error, Result};
use crate::inference::{channels_to_labels, ensemble_predict};
use crate::metrics::{evaluate_case, ClassMetrics, MetricsReport};
use crate::model::{parameter_specs, Model};
use crate::optim::{train_epoch, AdamState, EpochStats, TrainCase};
use crate::rvol;

#[derive(Debug, Serialize, Deserialize)]
pub struct GenManifest {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    pub difficulty: Difficulty,
    pub cases: Vec<String>,
}

/// Writes `count` phantom image/label pairs plus a manifest into `out`.
/// The same seed always produces byte-identical files.
pub fn cmd_gen_data(
    out: &Path,
    count: usize,
    size: usize,
    seed: u64,
    difficulty: Difficulty,
) -> Result<GenManifest> {
    if count == 0 {
        return Err(Error::Config("case count must be at least 1".into()));
    }
    if size % 8 != 0 {
        return Err(Error::Config(format!("size {size} is not divisible by 8")));
    }
    fs::create_dir_all(out)?;
    let mut cases = Vec::with_capacity(count);
    for i in 0..count {
        let name = format!("case_{i:03}");
        let (image, labels) =
            gen_phantom(seed.wrapping_add(i as u64), [size, size, size], difficulty)?;
        rvol::write_image(&out.join(format!("{name}.img.rvol")), &image)?;
        rvol::write_labels(&out.join(format!("{name}.lbl.rvol")), &labels)?;
        cases.push(name);
    }
    let manifest = GenManifest { count, size, seed, difficulty, cases };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(e.to_string()))?;
    fs::write(out.join("manifest.json"), text + "\n")?;
    log::info!("wrote {count} cases of size {size} to {}", out.display());
    Ok(manifest)
}

fn case_names(dir: &Path, suffix: &str) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let file = entry.file_name();
        let file = file.to_string_lossy();
        if let Some(stem) = file.strip_suffix(suffix) {
            names.push(stem.to_string());
        }
    }
    names.sort();
    Ok(names)
}

/// Loads every image/label pair in a dataset directory, normalized and
/// converted to training targets, in sorted case order.
pub fn load_dataset(dir: &Path) -> Result<Vec<TrainCase>> {
    let names = case_names(dir, ".img.rvol")?;
    if names.is_empty() {
        return Err(Error::Data(format!("no .img.rvol volumes in {}", dir.display())));
    }
    let mut cases = Vec::with_capacity(names.len());
    for name in &names {
        let mut image = rvol::read_image(&dir.join(format!("{name}.img.rvol")))?;
        let labels = rvol::read_labels(&dir.join(format!("{name}.lbl.rvol")))?;
        if labels.dims != image.dims {
            return Err(Error::Data(format!(
                "{name}: image dims {:?} do not match label dims {:?}",
                image.dims, labels.dims
            )));
        }
        normalize(&mut image);
        cases.push(TrainCase { image, target: labels_to_channels(&labels)? });
    }
    Ok(cases)
}

fn append_log_lines(path: &Path, stats: &[EpochStats]) -> Result<()> {
    let mut file = File::options().create(true).append(true).open(path)?;
    for s in stats {
        let line = serde_json::to_string(s).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(file, "{line}")?;
    }
    Ok(())
}

/// Runs the configured number of epochs, checkpointing periodically and at
/// the end, and appending one JSON line per epoch to `train_log.jsonl`.
/// Resuming from a checkpoint written after epoch e continues at epoch e
/// with the matching learning rate.
pub fn cmd_train(
    config_path: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<Vec<EpochStats>> {
    let run = RunConfig::load(config_path)?;
    log::info!("resolved config:\n{}", run.to_toml());

    let data_dir = run.data.train_dir.clone().ok_or_else(|| {
        Error::Config("data.train_dir is required for training".into())
    })?;
    if !data_dir.is_dir() {
        return Err(Error::Config(format!(
            "data.train_dir {} is not a directory",
            data_dir.display()
        )));
    }
    let dataset = load_dataset(&data_dir)?;
    log::info!("loaded {} training cases from {}", dataset.len(), data_dir.display());

    let (mut model, mut adam, start_epoch) = match resume {
        Some(path) => {
            let ck = checkpoint::load(path)?;
            if ck.run.model != run.model {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with a different model config",
                    path.display()
                )));
            }
            if ck.model.params.len() != parameter_specs(&run.model).len() {
                return Err(Error::Config(format!(
                    "checkpoint {} lacks parameters needed to continue training",
                    path.display()
                )));
            }
            log::info!("resuming from {} at epoch {}", path.display(), ck.epoch);
            (ck.model, ck.adam.unwrap_or_default(), ck.epoch)
        }
        None => (Model::build(run.model.clone(), run.train.seed)?, AdamState::default(), 0),
    };
    if start_epoch >= run.train.epochs {
        return Err(Error::Config(format!(
            "checkpoint already covers all {} epochs",
            run.train.epochs
        )));
    }

    fs::create_dir_all(out_dir)?;
    let schedule = run.schedule();
    let weights = run.loss_weights();
    let log_path = out_dir.join("train_log.jsonl");

    let mut history = Vec::with_capacity(run.train.epochs - start_epoch);
    for epoch in start_epoch..run.train.epochs {
        let stats = train_epoch(
            &mut model,
            &dataset,
            &mut adam,
            &schedule,
            &weights,
            run.train.weight_decay,
            epoch,
            run.train.seed,
        )?;
        let line = serde_json::to_string(&stats).map_err(|e| Error::Format(e.to_string()))?;
        log::info!("{line}");
        append_log_lines(&log_path, std::slice::from_ref(&stats))?;
        history.push(stats);

        let done = epoch + 1;
        if done % run.train.checkpoint_every == 0 && done < run.train.epochs {
            let path = out_dir.join(format!("epoch_{done:04}.ckpt"));
            checkpoint::save(&path, &model, &run, done, Some(&adam))?;
            log::info!("checkpoint written to {}", path.display());
        }
    }

    let final_path = out_dir.join("final.ckpt");
    checkpoint::save(&final_path, &model, &run, run.train.epochs, Some(&adam))?;
    log::info!("final checkpoint written to {}", final_path.display());
    Ok(history)
}

/// Segments one volume with an ensemble of checkpoints and writes the
/// decoded label grid. The `--tta` flag or any checkpoint's stored
/// inference settings enable flip averaging; an explicit threshold
/// overrides the stored one.
pub fn cmd_infer(
    ckpt_paths: &[PathBuf],
    input: &Path,
    output: &Path,
    tta_flag: bool,
    threshold: Option<f32>,
) -> Result<()> {
    if ckpt_paths.is_empty() {
        return Err(Error::Config("at least one checkpoint is required".into()));
    }
    let mut models = Vec::with_capacity(ckpt_paths.len());
    let mut tta = tta_flag;
    let mut stored_threshold = None;
    for path in ckpt_paths {
        let ck = checkpoint::load(path)?;
        tta |= ck.run.inference.tta;
        stored_threshold.get_or_insert(ck.run.inference.threshold);
        models.push(ck.model);
    }
    let threshold = threshold.or(stored_threshold).unwrap_or(0.5);

    let mut volume = rvol::read_image(input)?;
    normalize(&mut volume);
    log::info!(
        "segmenting {} with {} model(s), tta={tta}, threshold={threshold}",
        input.display(),
        models.len()
    );
    let probs = ensemble_predict(&models, &volume, tta)?;
    let labels = channels_to_labels(&probs, threshold)?;
    rvol::write_labels(output, &labels)?;
    log::info!("labels written to {}", output.display());
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct CaseRecord {
    pub name: String,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

#[derive(Debug, Default, Clone, Copy, Serialize)]
pub struct ClassCounts {
    pub dice: usize,
    pub sensitivity: usize,
    pub specificity: usize,
    pub hausdorff_max: usize,
    pub hausdorff_95: usize,
}

/// Per-metric count of cases where the metric was defined; undefined
/// values are serialized as null and excluded from the means.
#[derive(Debug, Serialize)]
pub struct DefinedCounts {
    pub et: ClassCounts,
    pub wt: ClassCounts,
    pub tc: ClassCounts,
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub cases: Vec<CaseRecord>,
    pub mean: MetricsReport,
    pub defined: DefinedCounts,
}

fn mean_class(values: &[&ClassMetrics]) -> (ClassMetrics, ClassCounts) {
    fn mean_of(it: impl Iterator<Item = Option<f64>>) -> (Option<f64>, usize) {
        let defined: Vec<f64> = it.flatten().collect();
        if defined.is_empty() {
            (None, 0)
        } else {
            (Some(defined.iter().sum::<f64>() / defined.len() as f64), defined.len())
        }
    }
    let (dice, n_dice) = mean_of(values.iter().map(|c| c.dice));
    let (sensitivity, n_sens) = mean_of(values.iter().map(|c| c.sensitivity));
    let (specificity, n_spec) = mean_of(values.iter().map(|c| c.specificity));
    let (hausdorff_max, n_hmax) = mean_of(values.iter().map(|c| c.hausdorff_max));
    let (hausdorff_95, n_h95) = mean_of(values.iter().map(|c| c.hausdorff_95));
    (
        ClassMetrics { dice, sensitivity, specificity, hausdorff_max, hausdorff_95 },
        ClassCounts {
            dice: n_dice,
            sensitivity: n_sens,
            specificity: n_spec,
            hausdorff_max: n_hmax,
            hausdorff_95: n_h95,
        },
    )
}

/// Compares predicted and reference label volumes case by case and writes
/// a JSON report with per-case rows and a mean row, classes ordered
/// (ET, WT, TC).
pub fn cmd_eval(pred_dir: &Path, gt_dir: &Path, report_path: &Path) -> Result<EvalReport> {
    let names = case_names(pred_dir, ".lbl.rvol")?;
    if names.is_empty() {
        return Err(Error::Data(format!(
            "no .lbl.rvol volumes in {}",
            pred_dir.display()
        )));
    }
    let mut cases = Vec::with_capacity(names.len());
    for name in &names {
        let gt_path = gt_dir.join(format!("{name}.lbl.rvol"));
        if !gt_path.is_file() {
            return Err(Error::Data(format!(
                "{name}: no ground-truth counterpart in {}",
                gt_dir.display()
            )));
        }
        let pred = rvol::read_labels(&pred_dir.join(format!("{name}.lbl.rvol")))?;
        let gt = rvol::read_labels(&gt_path)?;
        cases.push(CaseRecord { name: name.clone(), metrics: evaluate_case(&pred, &gt)? });
    }

    let collect = |f: fn(&MetricsReport) -> &ClassMetrics| -> Vec<&ClassMetrics> {
        cases.iter().map(|c| f(&c.metrics)).collect()
    };
    let (et, et_n) = mean_class(&collect(|m| &m.et));
    let (wt, wt_n) = mean_class(&collect(|m| &m.wt));
    let (tc, tc_n) = mean_class(&collect(|m| &m.tc));
    let report = EvalReport {
        cases,
        mean: MetricsReport { et, wt, tc },
        defined: DefinedCounts { et: et_n, wt: wt_n, tc: tc_n },
    };

    let text =
        serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(report_path, text + "\n")?;
    let fmt = |v: Option<f64>| v.map_or("null".into(), |x| format!("{x:.4}"));
    log::info!(
        "mean dice over {} case(s): ET {} / WT {} / TC {}",
        report.cases.len(),
        fmt(report.mean.et.dice),
        fmt(report.mean.wt.dice),
        fmt(report.mean.tc.dice),
    );
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabelVolume;

    #[test]
    fn gen_data_is_deterministic_and_validates_size() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        let m = cmd_gen_data(&a, 2, 16, 9, Difficulty::Low).unwrap();
        assert_eq!(m.cases, ["case_000", "case_001"]);
        cmd_gen_data(&b, 2, 16, 9, Difficulty::Low).unwrap();
        for name in ["case_000.img.rvol", "case_001.lbl.rvol", "manifest.json"] {
            assert_eq!(
                fs::read(a.join(name)).unwrap(),
                fs::read(b.join(name)).unwrap(),
                "{name}"
            );
        }
        // files: 2 per case + manifest
        assert_eq!(fs::read_dir(&a).unwrap().count(), 5);
        assert!(cmd_gen_data(&a, 2, 20, 9, Difficulty::Low).is_err());
        assert!(cmd_gen_data(&a, 0, 16, 9, Difficulty::Low).is_err());
    }

    #[test]
    fn distinct_cases_differ() {
        let dir = tempfile::tempdir().unwrap();
        cmd_gen_data(dir.path(), 2, 16, 3, Difficulty::Low).unwrap();
        let a = fs::read(dir.path().join("case_000.img.rvol")).unwrap();
        let b = fs::read(dir.path().join("case_001.img.rvol")).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn dataset_loader_normalizes_and_pairs() {
        let dir = tempfile::tempdir().unwrap();
        cmd_gen_data(dir.path(), 2, 16, 1, Difficulty::Low).unwrap();
        let cases = load_dataset(dir.path()).unwrap();
        assert_eq!(cases.len(), 2);
        let raw = rvol::read_image(&dir.path().join("case_000.img.rvol")).unwrap();
        for case in &cases {
            assert_eq!(case.image.dims, [16, 16, 16]);
            assert!(case.target.nesting_holds());
        }
        // loader output is normalized: zero mean over the raw brain voxels
        let mask: Vec<bool> = raw.channel(0).iter().map(|&v| v != 0.0).collect();
        let norm = cases[0].image.channel(0);
        let inside: Vec<f64> = mask
            .iter()
            .zip(norm)
            .filter(|(&m, _)| m)
            .map(|(_, &v)| v as f64)
            .collect();
        let mean = inside.iter().sum::<f64>() / inside.len() as f64;
        assert!(mean.abs() < 1e-3, "mean {mean}");
        let empty = tempfile::tempdir().unwrap();
        assert!(load_dataset(empty.path()).is_err());
    }

    #[test]
    fn eval_of_identical_dirs_reports_unit_dice() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        cmd_gen_data(&data, 2, 16, 4, Difficulty::Low).unwrap();
        let report_path = dir.path().join("report.json");
        let report = cmd_eval(&data, &data, &report_path).unwrap();
        assert_eq!(report.cases.len(), 2);
        for class in [&report.mean.et, &report.mean.wt, &report.mean.tc] {
            assert_eq!(class.dice, Some(1.0));
            assert_eq!(class.hausdorff_95, Some(0.0));
        }
        assert_eq!(report.defined.et.dice, 2);
        let text = fs::read_to_string(&report_path).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed["cases"][0]["et"]["dice"], 1.0);
        assert_eq!(parsed["mean"]["wt"]["dice"], 1.0);
    }

    #[test]
    fn eval_serializes_undefined_as_null_and_skips_them_in_means() {
        let dir = tempfile::tempdir().unwrap();
        let (pred, gt) = (dir.path().join("p"), dir.path().join("g"));
        fs::create_dir_all(&pred).unwrap();
        fs::create_dir_all(&gt).unwrap();
        // case_000: tumor everywhere vs itself; case_001: empty vs empty
        let full = LabelVolume::new([4, 4, 4], vec![4; 64]).unwrap();
        let empty = LabelVolume::new([4, 4, 4], vec![0; 64]).unwrap();
        for (name, lbl) in [("case_000", &full), ("case_001", &empty)] {
            rvol::write_labels(&pred.join(format!("{name}.lbl.rvol")), lbl).unwrap();
            rvol::write_labels(&gt.join(format!("{name}.lbl.rvol")), lbl).unwrap();
        }
        let report_path = dir.path().join("report.json");
        let report = cmd_eval(&pred, &gt, &report_path).unwrap();
        // ET dice defined only for the full case
        assert_eq!(report.defined.et.dice, 1);
        assert_eq!(report.mean.et.dice, Some(1.0));
        let text = fs::read_to_string(&report_path).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(parsed["cases"][1]["et"]["dice"].is_null());
    }

    #[test]
    fn eval_requires_counterparts() {
        let dir = tempfile::tempdir().unwrap();
        let (pred, gt) = (dir.path().join("p"), dir.path().join("g"));
        cmd_gen_data(&pred, 1, 16, 0, Difficulty::Low).unwrap();
        fs::create_dir_all(&gt).unwrap();
        assert!(cmd_eval(&pred, &gt, &dir.path().join("r.json")).is_err());
    }

    #[test]
    fn infer_requires_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out.rvol");
        assert!(cmd_infer(&[], Path::new("x"), &out, false, None).is_err());
    }
}
