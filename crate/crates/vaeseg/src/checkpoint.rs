//! Checkpoint files: magic line, single-line JSON manifest describing the
//! config and tensor layout, then one f32 little-endian blob. Saving and
//! reloading reproduces parameters, optimizer state, and file bytes exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{parameter_specs, Model};
use crate::optim::AdamState;
use crate::tensor::Tensor;

const MAGIC: &[u8] = b"VSEGCKPT1\n";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the f32 blob.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct AdamEntry {
    name: String,
    len: usize,
    m_offset: usize,
    v_offset: usize,
}

#[derive(Serialize, Deserialize)]
struct AdamManifest {
    beta1: f32,
    beta2: f32,
    eps: f32,
    step: u64,
    entries: Vec<AdamEntry>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    /// Full run configuration, so a resumed run recovers its schedule and
    /// loss weights and an inference run recovers the architecture.
    config: RunConfig,
    /// Completed epochs; training resumes here.
    epoch: usize,
    params: Vec<TensorEntry>,
    adam: Option<AdamManifest>,
}

pub struct Checkpoint {
    pub model: Model,
    pub run: RunConfig,
    pub epoch: usize,
    pub adam: Option<AdamState>,
}

pub fn save(
    path: &Path,
    model: &Model,
    run: &RunConfig,
    epoch: usize,
    adam: Option<&AdamState>,
) -> Result<()> {
    if run.model != model.config {
        return Err(Error::Config(
            "run config does not describe the model being saved".into(),
        ));
    }
    let mut blob: Vec<f32> = Vec::new();
    let mut params = Vec::with_capacity(model.params.len());
    for (name, t) in &model.params {
        params.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
        });
        blob.extend_from_slice(t.data());
    }

    let adam = adam
        .map(|state| -> Result<AdamManifest> {
            let mut entries = Vec::with_capacity(state.m.len());
            for (name, m) in &state.m {
                let v = state.v.get(name).ok_or_else(|| {
                    Error::Format(format!("optimizer state for {name} lacks a second moment"))
                })?;
                if v.len() != m.len() {
                    return Err(Error::Format(format!(
                        "optimizer moments for {name} disagree in length"
                    )));
                }
                let m_offset = blob.len();
                blob.extend_from_slice(m);
                let v_offset = blob.len();
                blob.extend_from_slice(v);
                entries.push(AdamEntry { name: name.clone(), len: m.len(), m_offset, v_offset });
            }
            Ok(AdamManifest {
                beta1: state.beta1,
                beta2: state.beta2,
                eps: state.eps,
                step: state.step,
                entries,
            })
        })
        .transpose()?;

    let manifest = Manifest { version: 1, config: run.clone(), epoch, params, adam };
    let line = serde_json::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;

    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(line.as_bytes())?;
    out.write_all(b"\n")?;
    let mut bytes = Vec::with_capacity(blob.len() * 4);
    for v in &blob {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

fn take(blob: &[f32], offset: usize, len: usize, what: &str) -> Result<Vec<f32>> {
    blob.get(offset..offset + len)
        .map(<[f32]>::to_vec)
        .ok_or_else(|| Error::Format(format!("{what}: blob range {offset}+{len} out of bounds")))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 10];
    input.read_exact(&mut magic).map_err(|_| {
        Error::Format(format!("{} is not a checkpoint file", path.display()))
    })?;
    if magic != MAGIC {
        return Err(Error::Format(format!("{} is not a checkpoint file", path.display())));
    }
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        input.read_exact(&mut byte)?;
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
        if line.len() > 1 << 20 {
            return Err(Error::Format(format!("{}: runaway manifest", path.display())));
        }
    }
    let manifest: Manifest = serde_json::from_slice(&line)
        .map_err(|e| Error::Format(format!("{}: bad manifest: {e}", path.display())))?;
    if manifest.version != 1 {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint version {}",
            path.display(),
            manifest.version
        )));
    }
    manifest.config.validate()?;
    let model_config = manifest.config.model.clone();

    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!("{}: blob is not f32-aligned", path.display())));
    }
    let blob: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();

    // every stored parameter must match the shape the config dictates
    let expected: IndexMap<String, Vec<usize>> = parameter_specs(&model_config)
        .into_iter()
        .map(|s| (s.name, s.shape))
        .collect();
    let mut params = IndexMap::new();
    for entry in &manifest.params {
        let want = expected.get(&entry.name).ok_or_else(|| {
            Error::Format(format!("unknown parameter {} in checkpoint", entry.name))
        })?;
        if *want != entry.shape {
            return Err(Error::Format(format!(
                "parameter {} has shape {:?}, config requires {:?}",
                entry.name, entry.shape, want
            )));
        }
        let len: usize = entry.shape.iter().product();
        let data = take(&blob, entry.offset, len, &entry.name)?;
        params.insert(
            entry.name.clone(),
            Tensor::new(entry.shape.clone(), data)?.requires_grad(true),
        );
    }

    let adam = manifest
        .adam
        .as_ref()
        .map(|am| -> Result<AdamState> {
            let mut m = IndexMap::new();
            let mut v = IndexMap::new();
            for e in &am.entries {
                m.insert(e.name.clone(), take(&blob, e.m_offset, e.len, &e.name)?);
                v.insert(e.name.clone(), take(&blob, e.v_offset, e.len, &e.name)?);
            }
            Ok(AdamState {
                beta1: am.beta1,
                beta2: am.beta2,
                eps: am.eps,
                step: am.step,
                m,
                v,
            })
        })
        .transpose()?;

    Ok(Checkpoint {
        model: Model { config: model_config, params },
        run: manifest.config,
        epoch: manifest.epoch,
        adam,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_phantom, labels_to_channels, normalize, Difficulty};
    use crate::losses::LossWeights;
    use crate::optim::{train_epoch, Schedule, TrainCase};

    fn run_config() -> RunConfig {
        let mut run = RunConfig::default();
        run.model = crate::model::ModelConfig {
            base_filters: 2,
            blocks_per_level: vec![1, 1, 1, 1],
            crop_shape: [16, 16, 16],
            ..Default::default()
        };
        run.train.seed = 21;
        run
    }

    fn trained_model() -> (Model, AdamState) {
        let run = run_config();
        let mut model = Model::build(run.model.clone(), 21).unwrap();
        let mut state = AdamState::default();
        let (mut image, labels) = gen_phantom(0, [16, 16, 16], Difficulty::Low).unwrap();
        normalize(&mut image);
        let dataset =
            vec![TrainCase { image, target: labels_to_channels(&labels).unwrap() }];
        train_epoch(
            &mut model,
            &dataset,
            &mut state,
            &Schedule::default(),
            &LossWeights::default(),
            1e-5,
            0,
            13,
        )
        .unwrap();
        (model, state)
    }

    #[test]
    fn round_trip_restores_everything_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let (model, state) = trained_model();
        let run = run_config();
        let p1 = dir.path().join("a.ckpt");
        save(&p1, &model, &run, 7, Some(&state)).unwrap();

        let ck = load(&p1).unwrap();
        assert_eq!(ck.epoch, 7);
        assert_eq!(ck.run, run);
        assert_eq!(ck.model.config, model.config);
        assert_eq!(ck.model.params.len(), model.params.len());
        for (name, t) in &model.params {
            assert_eq!(t.data(), ck.model.params[name].data(), "{name}");
            assert_eq!(t.shape(), ck.model.params[name].shape(), "{name}");
        }
        assert_eq!(ck.adam.as_ref(), Some(&state));

        // resaving the loaded checkpoint reproduces the file bytes
        let p2 = dir.path().join("b.ckpt");
        save(&p2, &ck.model, &ck.run, ck.epoch, ck.adam.as_ref()).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn segmentation_only_checkpoints_load() {
        let dir = tempfile::tempdir().unwrap();
        let (mut model, _) = trained_model();
        model.params.retain(|name, _| !name.starts_with("vae."));
        let p = dir.path().join("seg.ckpt");
        save(&p, &model, &run_config(), 3, None).unwrap();
        let ck = load(&p).unwrap();
        assert!(ck.adam.is_none());
        assert!(ck.model.params.keys().all(|k| !k.starts_with("vae.")));
        let x = crate::gradprobe::uniform(1, vec![4, 16, 16, 16], -1.0, 1.0);
        assert!(ck.model.forward_seg_only(&x).is_ok());
    }

    #[test]
    fn rejects_corrupt_and_mismatched_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        std::fs::write(&p, b"not a checkpoint").unwrap();
        assert!(load(&p).is_err());

        let (model, _) = trained_model();
        save(&p, &model, &run_config(), 0, None).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 5);
        std::fs::write(&p, &bytes).unwrap();
        assert!(load(&p).is_err());
    }
}
