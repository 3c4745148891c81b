//! Run configuration: defaults, then a JSON config file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use busnet::dataset::SplitRatios;
use busnet::models::{BackboneWeights, ModelKind, ModelSpec};
use busnet::nn::optim::OptimizerKind;
use busnet::training::{LossKind, TrainConfig, DEFAULT_BATCH_SIZE, DEFAULT_EPOCHS, DEFAULT_LEARNING_RATE};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable naming the pretrained-weights directory.
pub const WEIGHTS_ENV: &str = "BUSNET_WEIGHTS_DIR";
pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub kind: ModelKind,
    /// Transfer models only.
    pub freeze_backbone: bool,
    /// Width of the hidden dense layer; `None` uses the model's default.
    pub head_units: Option<usize>,
    /// Start the backbone from seeded random weights instead of pretrained ones.
    pub random_init_backbone: bool,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            kind: ModelKind::Transfer(busnet::models::Backbone::Resnet50),
            freeze_backbone: true,
            head_units: None,
            random_init_backbone: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub loss: LossKind,
    pub class_weights: Option<Vec<f64>>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            learning_rate: DEFAULT_LEARNING_RATE,
            optimizer: OptimizerKind::Adam,
            loss: LossKind::CategoricalCrossEntropy,
            class_weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data_root: Option<PathBuf>,
    pub work_dir: PathBuf,
    pub weights_cache: PathBuf,
    /// Drives the split, weight initialization and batch order.
    pub seed: u64,
    pub split: SplitRatios,
    pub model: ModelSettings,
    pub training: TrainSettings,
}

fn default_weights_cache() -> PathBuf {
    if let Some(dir) = std::env::var_os(WEIGHTS_ENV) {
        return PathBuf::from(dir);
    }
    match std::env::var_os("HOME") {
        Some(home) => Path::new(&home).join(".cache/busnet/weights"),
        None => PathBuf::from(".busnet-weights"),
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_root: None,
            work_dir: PathBuf::from("work"),
            weights_cache: default_weights_cache(),
            seed: 0,
            split: SplitRatios::default(),
            model: ModelSettings::default(),
            training: TrainSettings::default(),
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with the fields present in `path`.
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.work_dir.join(MANIFEST_FILE)
    }

    pub fn model_dir(&self, kind: ModelKind) -> PathBuf {
        self.work_dir.join(kind.name())
    }

    pub fn model_spec(&self, num_classes: usize) -> ModelSpec {
        let kind = self.model.kind;
        let mut spec = ModelSpec::for_kind(kind, num_classes);
        if kind.backbone().is_some() {
            spec.freeze_backbone = self.model.freeze_backbone;
        }
        if let Some(units) = self.model.head_units {
            spec.head_units = units;
        }
        spec
    }

    pub fn backbone_weights(&self) -> BackboneWeights {
        if self.model.random_init_backbone {
            BackboneWeights::RandomInit
        } else {
            BackboneWeights::Pretrained {
                cache_dir: self.weights_cache.clone(),
            }
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            optimizer: t.optimizer,
            loss: t.loss,
            seed: self.seed,
            checkpoint_dir: self.model_dir(self.model.kind),
            class_weights: t.class_weights.clone(),
        }
    }

    /// Writes the effective configuration as pretty JSON.
    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::failure(format!("cannot create {}: {e}", parent.display())))?;
        }
        let json = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(path, json + "\n").map_err(|e| CliError::failure(format!("cannot write {}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_published_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!(c.training.epochs, 10);
        assert_eq!(c.training.batch_size, 32);
        assert_eq!(c.training.learning_rate, 0.0001);
        assert!(c.model.freeze_backbone);
        assert_eq!(c.split, SplitRatios::default());
    }

    #[test]
    fn partial_file_keeps_other_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"seed": 7, "training": {"epochs": 3}, "model": {"kind": "vgg16"}}"#).unwrap();
        let c = RunConfig::from_file(&path).unwrap();
        assert_eq!((c.seed, c.training.epochs, c.training.batch_size), (7, 3, 32));
        assert_eq!(c.model.kind.name(), "vgg16");
        fs::write(&path, r#"{"epochs": 3}"#).unwrap();
        assert!(RunConfig::from_file(&path).is_err());
    }

    #[test]
    fn saved_config_reloads_identically() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = RunConfig::default();
        c.training.class_weights = Some(vec![1.0, 2.0, 10.0]);
        c.data_root = Some("data".into());
        let path = dir.path().join(RUN_CONFIG_FILE);
        c.save(&path).unwrap();
        assert_eq!(RunConfig::from_file(&path).unwrap(), c);
    }
}
