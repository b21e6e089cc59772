//! Run configuration: one JSON document, dotted-path overrides, and content
//! hashes that stamp every artifact.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::WorldSpec;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::optim::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    /// Write a checkpoint every this many steps (0 disables intermediate ones).
    pub checkpoint_every: u64,
    /// Shortest history a training example may have.
    pub min_history: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            steps: 3000,
            checkpoint_every: 1000,
            min_history: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    /// Seeds parameter initialization and batch order.
    pub seed: u64,
    pub data: WorldSpec,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: AdamConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

/// The sections that determine a trained artifact.
#[derive(Serialize)]
struct ArtifactView<'a> {
    seed: u64,
    data: &'a WorldSpec,
    model: &'a ModelConfig,
    loss: &'a LossConfig,
    optim: &'a AdamConfig,
    train: &'a TrainConfig,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}


impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        self.eval.validate()?;
        if self.model.item_vocab != self.data.item_count {
            return Err(Error::config(format!(
                "model.item_vocab {} differs from data.item_count {}",
                self.model.item_vocab, self.data.item_count
            )));
        }
        if self.model.tag_vocab != self.data.cluster_count {
            return Err(Error::config(format!(
                "model.tag_vocab {} differs from data.cluster_count {}",
                self.model.tag_vocab, self.data.cluster_count
            )));
        }
        if self.train.batch_size < 2 {
            return Err(Error::config("train.batch_size must be at least 2"));
        }
        Ok(())
    }

    /// Parses a complete config, rejecting unknown and missing keys.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        Self::from_value(value)
    }

    fn from_value(value: Value) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` and applies `key.path=value` overrides in order.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut value: Value = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    /// Applies overrides to an in-memory config.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Hash of everything that shapes a trained model: seed, data, model,
    /// loss, optimizer and training schedule.
    pub fn hash(&self) -> String {
        let view = ArtifactView {
            seed: self.seed,
            data: &self.data,
            model: &self.model,
            loss: &self.loss,
            optim: &self.optim,
            train: &self.train,
        };
        sha256_hex(&serde_json::to_vec(&view).expect("config serializes"))
    }

    /// Hash of the data section alone, stamped on generated datasets.
    pub fn data_hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(&self.data).expect("spec serializes"))
    }
}

/// `a.b.c=value`: `value` is parsed as JSON, falling back to a plain string.
/// The path must name an existing key.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{assignment}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("`{}` is not a section", keys[..i].join("."))))?;
        let slot = obj
            .get_mut(*key)
            .ok_or_else(|| Error::config(format!("unknown config key `{path}`")))?;
        if i + 1 == keys.len() {
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    unreachable!("split yields at least one key")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_validates() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_json_str(&cfg.to_json_pretty().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn overrides_change_values_and_hash() {
        let cfg = RunConfig::default();
        let o = cfg.with_overrides(&["model.layers=3".into()]).unwrap();
        assert_eq!(o.model.layers, 3);
        assert_ne!(o.hash(), cfg.hash());
        let e = cfg.with_overrides(&["eval.filter_history=true".into()]).unwrap();
        assert_eq!(e.hash(), cfg.hash());
    }

    #[test]
    fn unknown_and_missing_keys_are_named() {
        let cfg = RunConfig::default();
        let err = cfg.with_overrides(&["model.depth=3".into()]).unwrap_err();
        assert!(err.to_string().contains("model.depth"), "{err}");
        let mut v = serde_json::to_value(&cfg).unwrap();
        v["model"].as_object_mut().unwrap().remove("heads");
        let err = RunConfig::from_json_str(&v.to_string()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("heads"), "{err}");
        v["model"]["heads"] = 4.into();
        v["model"]["colour"] = "red".into();
        let err = RunConfig::from_json_str(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("colour"), "{err}");
    }

    #[test]
    fn cross_section_checks() {
        let cfg = RunConfig::default();
        assert!(cfg.with_overrides(&["data.item_count=500".into()]).is_err());
        assert!(cfg.with_overrides(&["model.interests=17".into()]).is_err());
    }
}
