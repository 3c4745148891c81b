//! Checkpoint directories: `model.json` plus `params.safetensors`.
//!
//! When the backbone is frozen only the head is stored; the backbone is
//! rebuilt from its recorded origin (seeded random init, or the pretrained
//! file whose SHA-256 must match).

use std::fs;
use std::path::{Path, PathBuf};

use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::weights::{serialize_params, tensor_from_view};
use super::{build_model, Backbone, BackboneOrigin, BackboneWeights, Model, ModelError, ModelKind, ModelSpec};
use crate::nn::{Layer, Scalar};
use crate::preprocess::NormalizationPolicy;

pub const FRAMEWORK_VERSION: &str = concat!("busnet ", env!("CARGO_PKG_VERSION"));
const META_FILE: &str = "model.json";
const PARAMS_FILE: &str = "params.safetensors";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum StoredKind {
    Transfer,
    CustomCnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum StoredParams {
    All,
    HeadOnly,
}

/// Contents of `model.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    kind: StoredKind,
    pub backbone_id: Option<Backbone>,
    pub num_classes: usize,
    pub head_units: usize,
    pub freeze_backbone: bool,
    pub normalization_policy: NormalizationPolicy,
    pub seed: u64,
    pub framework_version: String,
    pub backbone_weights: Option<BackboneOrigin>,
    pub class_names: Vec<String>,
    stored_params: StoredParams,
}

impl ModelMeta {
    pub fn spec(&self) -> Result<ModelSpec, ModelError> {
        let kind = match (self.kind, self.backbone_id) {
            (StoredKind::Transfer, Some(b)) => ModelKind::Transfer(b),
            (StoredKind::CustomCnn, None) => ModelKind::CustomCnn,
            _ => return Err(ModelError::Checkpoint("kind and backbone_id disagree".into())),
        };
        Ok(ModelSpec {
            kind,
            num_classes: self.num_classes,
            freeze_backbone: self.freeze_backbone,
            head_units: self.head_units,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Directory holding `<backbone>.safetensors`; needed for head-only
    /// checkpoints over a pretrained backbone.
    pub weights_cache: Option<PathBuf>,
    /// Reject checkpoints with a different class count.
    pub expected_classes: Option<usize>,
}

fn ckpt_err(context: &str, path: &Path, e: impl std::fmt::Display) -> ModelError {
    ModelError::Checkpoint(format!("{context} {}: {e}", path.display()))
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, dir: &Path) -> Result<(), ModelError> {
    fs::create_dir_all(dir).map_err(|e| ckpt_err("cannot create", dir, e))?;
    let spec = model.spec();
    let stored_params = if model.features_trainable() {
        StoredParams::All
    } else {
        StoredParams::HeadOnly
    };
    let params = match stored_params {
        StoredParams::All => model.params(),
        StoredParams::HeadOnly => model.head_params(),
    };
    let bytes = serialize_params(&params, false).map_err(ModelError::Checkpoint)?;
    let params_path = dir.join(PARAMS_FILE);
    fs::write(&params_path, bytes).map_err(|e| ckpt_err("cannot write", &params_path, e))?;

    let meta = ModelMeta {
        kind: match spec.kind {
            ModelKind::Transfer(_) => StoredKind::Transfer,
            ModelKind::CustomCnn => StoredKind::CustomCnn,
        },
        backbone_id: spec.kind.backbone(),
        num_classes: spec.num_classes,
        head_units: spec.head_units,
        freeze_backbone: spec.freeze_backbone,
        normalization_policy: model.normalization(),
        seed: model.seed(),
        framework_version: FRAMEWORK_VERSION.to_string(),
        backbone_weights: model.backbone_origin().cloned(),
        class_names: model.class_names().to_vec(),
        stored_params,
    };
    let meta_path = dir.join(META_FILE);
    let json = serde_json::to_string_pretty(&meta).expect("model metadata serializes");
    fs::write(&meta_path, json + "\n").map_err(|e| ckpt_err("cannot write", &meta_path, e))
}

pub fn read_meta(dir: &Path) -> Result<ModelMeta, ModelError> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| ckpt_err("cannot read", &meta_path, e))?;
    serde_json::from_str(&text).map_err(|e| ckpt_err("malformed", &meta_path, e))
}

pub fn load_checkpoint<T: Scalar>(dir: &Path, options: &LoadOptions) -> Result<Model<T>, ModelError> {
    let meta = read_meta(dir)?;
    if let Some(k) = options.expected_classes {
        if k != meta.num_classes {
            return Err(ModelError::Shape(format!(
                "checkpoint has {} classes, {k} requested",
                meta.num_classes
            )));
        }
    }
    let spec = meta.spec()?;
    let weights = match (&meta.stored_params, &meta.backbone_weights) {
        (StoredParams::HeadOnly, Some(BackboneOrigin::Pretrained { .. })) => {
            let cache_dir = options.weights_cache.clone().ok_or_else(|| {
                ModelError::Checkpoint("checkpoint needs the pretrained weights cache directory".into())
            })?;
            BackboneWeights::Pretrained { cache_dir }
        }
        _ => BackboneWeights::RandomInit,
    };
    let mut model: Model<T> = build_model(spec, &weights, meta.seed)?;
    if meta.stored_params == StoredParams::HeadOnly && model.backbone_origin() != meta.backbone_weights.as_ref() {
        return Err(ModelError::Checkpoint(format!(
            "backbone weights differ from the ones used in training ({:?} vs {:?})",
            model.backbone_origin(),
            meta.backbone_weights
        )));
    }
    model.origin = meta.backbone_weights.clone();

    let params_path = dir.join(PARAMS_FILE);
    let bytes = fs::read(&params_path).map_err(|e| ckpt_err("cannot read", &params_path, e))?;
    let file = SafeTensors::deserialize(&bytes).map_err(|e| ckpt_err("corrupt", &params_path, e))?;
    let targets = match meta.stored_params {
        StoredParams::All => model.params_mut(),
        StoredParams::HeadOnly => model.head_mut().params_mut(),
    };
    for p in targets {
        let view = file
            .tensor(&p.name)
            .map_err(|_| ckpt_err(&format!("missing tensor `{}` in", p.name), &params_path, "absent"))?;
        if view.shape() != p.value.shape() {
            return Err(ModelError::Shape(format!(
                "tensor `{}` has shape {:?}, model expects {:?}",
                p.name,
                view.shape(),
                p.value.shape()
            )));
        }
        p.value = tensor_from_view(&view).map_err(|m| ckpt_err(&p.name, &params_path, m))?;
    }
    model.set_class_names(meta.class_names.clone())?;
    Ok(model)
}
