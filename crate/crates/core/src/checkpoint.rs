//! Checkpoints: a JSON manifest naming every tensor with its shape and byte
//! offset, next to one flat little-endian `f32` blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::FrequencyEstimator;
use crate::model::{Model, ModelConfig};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub estimator: FrequencyEstimator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub data_hash: String,
    /// Completed training steps.
    pub step: u64,
    pub model: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub optimizer: Option<OptimizerState>,
}

/// Optimizer-side state carried across a resume.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    pub adam: Adam<f32>,
    pub estimator: FrequencyEstimator,
}

pub struct Stamps<'a> {
    pub config_hash: &'a str,
    pub data_hash: &'a str,
}

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

/// Writes `dir/manifest.json` and `dir/tensors.bin`.
pub fn save(dir: &Path, model: &Model<f32>, state: Option<&TrainState>, stamps: &Stamps<'_>) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob: Vec<u8> = Vec::new();
    let mut entries = Vec::new();
    let mut push = |name: String, t: &Tensor<f32>| {
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (_, name, t) in model.params.iter() {
        push(name.to_string(), t);
    }
    if let Some(s) = state {
        for (id, name, _) in model.params.iter() {
            push(format!("{ADAM_M}{name}"), &s.adam.m[id.index()]);
            push(format!("{ADAM_V}{name}"), &s.adam.v[id.index()]);
        }
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        config_hash: stamps.config_hash.to_string(),
        data_hash: stamps.data_hash.to_string(),
        step: state.map_or(0, |s| s.step),
        model: model.config().clone(),
        tensors: entries,
        optimizer: state.map(|s| OptimizerState {
            config: s.adam.cfg,
            step: s.adam.step,
            estimator: s.estimator.clone(),
        }),
    };
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::data(format!(
            "checkpoint format {} is not the supported {FORMAT_VERSION}",
            m.format_version
        )));
    }
    Ok(m)
}

fn read_tensor(blob: &[u8], e: &TensorEntry) -> Result<Tensor<f32>> {
    let n: usize = e.shape.iter().product();
    let start = e.offset as usize;
    let end = start + 4 * n;
    let bytes = blob
        .get(start..end)
        .ok_or_else(|| Error::data(format!("tensor `{}` runs past the end of the blob", e.name)))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(e.shape.clone(), data)
}

/// Rebuilds the model (and optimizer state when present) from `dir`.
pub fn load(dir: &Path) -> Result<(CheckpointManifest, Model<f32>, Option<TrainState>)> {
    let manifest = read_manifest(dir)?;
    let blob_path = dir.join(BLOB_FILE);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let mut model = Model::<f32>::new(manifest.model.clone(), 0)?;
    let find = |name: &str| manifest.tensors.iter().find(|e| e.name == name);

    let mut seen = 0;
    let ids: Vec<_> = model.params.ids().collect();
    for &id in &ids {
        let name = model.params.name(id).to_string();
        let entry = find(&name).ok_or_else(|| Error::data(format!("checkpoint lacks tensor `{name}`")))?;
        let t = read_tensor(&blob, entry)?;
        let dst = model.params.get_mut(id);
        if t.shape() != dst.shape() {
            return Err(Error::data(format!(
                "tensor `{name}` has shape {:?}, model expects {:?}",
                t.shape(),
                dst.shape()
            )));
        }
        dst.data_mut().copy_from_slice(t.data());
        seen += 1;
    }
    let state = match &manifest.optimizer {
        None => None,
        Some(opt) => {
            let mut adam = Adam::new(opt.config, &model.params);
            adam.step = opt.step;
            for &id in &ids {
                let name = model.params.name(id);
                for (prefix, dst) in [(ADAM_M, &mut adam.m[id.index()]), (ADAM_V, &mut adam.v[id.index()])] {
                    let key = format!("{prefix}{name}");
                    let entry = find(&key).ok_or_else(|| Error::data(format!("checkpoint lacks `{key}`")))?;
                    *dst = read_tensor(&blob, entry)?;
                    seen += 1;
                }
            }
            Some(TrainState {
                step: manifest.step,
                adam,
                estimator: opt.estimator.clone(),
            })
        }
    };
    if seen != manifest.tensors.len() {
        return Err(Error::data(format!(
            "checkpoint holds {} tensors but the model uses {seen}",
            manifest.tensors.len()
        )));
    }
    Ok((manifest, model, state))
}

/// Verifies the stamps of a checkpoint against the expected hashes.
pub fn check_stamps(manifest: &CheckpointManifest, stamps: &Stamps<'_>) -> Result<()> {
    if manifest.config_hash != stamps.config_hash {
        return Err(Error::config(format!(
            "checkpoint was trained under config {} but the current config hashes to {}",
            manifest.config_hash, stamps.config_hash
        )));
    }
    if manifest.data_hash != stamps.data_hash {
        return Err(Error::data(format!(
            "checkpoint was trained on data {} but the dataset is stamped {}",
            manifest.data_hash, stamps.data_hash
        )));
    }
    Ok(())
}

/// Parameter tensors keyed by name, for comparisons.
pub fn param_bytes(params: &ParamStore<f32>) -> Vec<(String, Vec<u32>)> {
    params
        .iter()
        .map(|(_, name, t)| (name.to_string(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compression::{CompressionLayout, Window};

    fn tiny() -> ModelConfig {
        ModelConfig {
            dim: 8,
            layers: 1,
            heads: 2,
            interests: 2,
            max_seq_len: 12,
            compression: CompressionLayout {
                windows: vec![Window { size: 4, count: 1 }],
                raw_tail: 8,
            },
            item_vocab: 30,
            tag_vocab: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::<f32>::new(tiny(), 5).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &model.params);
        adam.step = 3;
        adam.m[0].data_mut()[0] = 0.25;
        let mut estimator = FrequencyEstimator::new(0.9999, 1e-6).unwrap();
        estimator.update(&[1, 2, 2]);
        let state = TrainState { step: 3, adam, estimator };
        let stamps = Stamps { config_hash: "c", data_hash: "d" };
        save(dir.path(), &model, Some(&state), &stamps).unwrap();
        let (m, back, st) = load(dir.path()).unwrap();
        assert_eq!(param_bytes(&back.params), param_bytes(&model.params));
        let st = st.unwrap();
        assert_eq!(st.adam.m[0].data()[0], 0.25);
        assert_eq!(st.estimator, state.estimator);
        assert_eq!(m.step, 3);
        check_stamps(&m, &stamps).unwrap();
        assert!(check_stamps(&m, &Stamps { config_hash: "x", data_hash: "d" }).is_err());
    }

    #[test]
    fn truncated_blob_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::<f32>::new(tiny(), 5).unwrap();
        save(dir.path(), &model, None, &Stamps { config_hash: "c", data_hash: "d" }).unwrap();
        let blob = dir.path().join(BLOB_FILE);
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Data(_))));
    }
}
