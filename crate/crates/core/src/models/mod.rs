//! Model construction: three ImageNet backbones under a shared classifier
//! head, plus a small from-scratch CNN.
//!
//! Every model is split into a feature extractor (ending in global average
//! pooling) and a classifier head `dense(units, ReLU) → dense(K)`. The
//! softmax is applied by [`Model::predict`] and fused into the loss during
//! training.

mod backbones;
mod checkpoint;
mod custom_cnn;
mod weights;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{he_bound, lecun_bound, loss::softmax, Dense, Layer, Param, Relu, Scalar, Sequential, Tensor};
use crate::preprocess::{InputConvention, NormalizationPolicy};

pub use checkpoint::{load_checkpoint, read_meta, save_checkpoint, LoadOptions, ModelMeta, FRAMEWORK_VERSION};
pub use custom_cnn::CUSTOM_CNN_FILTERS;
pub use weights::{export_backbone_weights, weights_path};

/// Smallest accepted input edge; five stride-2 stages need at least this.
pub const MIN_INPUT_SIZE: usize = 32;
/// Default width of the transfer-model dense layer.
pub const TRANSFER_HEAD_UNITS: usize = 1024;
/// Default width of the custom CNN dense layer.
pub const CUSTOM_HEAD_UNITS: usize = 256;
/// Images per inference chunk; bounds peak activation memory.
const INFERENCE_CHUNK: usize = 8;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown backbone `{0}` (expected resnet50, mobilenet or vgg16)")]
    UnknownBackbone(String),
    #[error("unknown model `{0}` (expected one of: resnet50, mobilenet, vgg16, custom_cnn)")]
    UnknownModel(String),
    #[error("pretrained weights for {backbone} unavailable at {path}: {reason}")]
    WeightsUnavailable {
        backbone: Backbone,
        path: PathBuf,
        reason: String,
    },
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Resnet50,
    Mobilenet,
    Vgg16,
}

impl Backbone {
    pub const ALL: [Backbone; 3] = [Backbone::Resnet50, Backbone::Mobilenet, Backbone::Vgg16];

    pub fn id(self) -> &'static str {
        match self {
            Backbone::Resnet50 => "resnet50",
            Backbone::Mobilenet => "mobilenet",
            Backbone::Vgg16 => "vgg16",
        }
    }

    /// Width of the globally pooled feature vector.
    pub fn feature_dim(self) -> usize {
        match self {
            Backbone::Resnet50 => 2048,
            Backbone::Mobilenet => 1024,
            Backbone::Vgg16 => 512,
        }
    }

    pub fn input_convention(self) -> InputConvention {
        match self {
            Backbone::Resnet50 | Backbone::Vgg16 => InputConvention::Caffe,
            Backbone::Mobilenet => InputConvention::SignedUnit,
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Backbone {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Backbone::ALL
            .into_iter()
            .find(|b| b.id() == s)
            .ok_or_else(|| ModelError::UnknownBackbone(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Transfer(Backbone),
    CustomCnn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::Transfer(Backbone::Resnet50),
        ModelKind::Transfer(Backbone::Mobilenet),
        ModelKind::Transfer(Backbone::Vgg16),
        ModelKind::CustomCnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Transfer(b) => b.id(),
            ModelKind::CustomCnn => "custom_cnn",
        }
    }

    pub fn backbone(self) -> Option<Backbone> {
        match self {
            ModelKind::Transfer(b) => Some(b),
            ModelKind::CustomCnn => None,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "custom_cnn" | "custom-cnn" => Ok(ModelKind::CustomCnn),
            other => other
                .parse::<Backbone>()
                .map(ModelKind::Transfer)
                .map_err(|_| ModelError::UnknownModel(other.to_string())),
        }
    }
}

impl Serialize for ModelKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for ModelKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Which architecture to build and how its head is shaped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub num_classes: usize,
    /// Exclude backbone parameters from training. Ignored by the custom CNN.
    pub freeze_backbone: bool,
    pub head_units: usize,
}

impl ModelSpec {
    pub fn transfer(backbone: Backbone, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::Transfer(backbone),
            num_classes,
            freeze_backbone: true,
            head_units: TRANSFER_HEAD_UNITS,
        }
    }

    pub fn custom_cnn(num_classes: usize) -> Self {
        Self {
            kind: ModelKind::CustomCnn,
            num_classes,
            freeze_backbone: false,
            head_units: CUSTOM_HEAD_UNITS,
        }
    }

    /// Defaults for `kind`: transfer heads of 1024 units over a frozen
    /// backbone, or the custom CNN with its 256-unit head.
    pub fn for_kind(kind: ModelKind, num_classes: usize) -> Self {
        match kind {
            ModelKind::Transfer(b) => Self::transfer(b, num_classes),
            ModelKind::CustomCnn => Self::custom_cnn(num_classes),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_classes < 2 {
            return Err(ModelError::InvalidSpec(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.head_units == 0 {
            return Err(ModelError::InvalidSpec("head_units must be at least 1".into()));
        }
        Ok(())
    }

    /// Input normalization the model expects.
    pub fn normalization(&self) -> NormalizationPolicy {
        match self.kind {
            ModelKind::Transfer(b) => NormalizationPolicy::BackboneSpecific(b),
            ModelKind::CustomCnn => NormalizationPolicy::UnitScale,
        }
    }
}

/// Where a transfer model's backbone parameters come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackboneWeights {
    /// `<cache_dir>/<backbone>.safetensors`.
    Pretrained { cache_dir: PathBuf },
    /// Seeded random initialization; for offline experiments and tests.
    RandomInit,
}

/// Provenance of the backbone parameters actually loaded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum BackboneOrigin {
    Pretrained { sha256: String },
    Random,
}

pub struct Model<T: Scalar = f32> {
    spec: ModelSpec,
    seed: u64,
    origin: Option<BackboneOrigin>,
    class_names: Vec<String>,
    features: Sequential<T>,
    head: Sequential<T>,
    feature_dim: usize,
}

impl<T: Scalar> fmt::Debug for Model<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("spec", &self.spec)
            .field("seed", &self.seed)
            .field("origin", &self.origin)
            .field("parameters", &self.parameter_count())
            .finish()
    }
}

fn classifier_head<T: Scalar>(inputs: usize, units: usize, classes: usize, seed: u64) -> Sequential<T> {
    Sequential::new()
        .with(Dense::new("head.dense1", inputs, units, he_bound(inputs), seed))
        .with(Relu::new())
        .with(Dense::new("head.dense2", units, classes, lecun_bound(units), seed))
}

fn default_class_names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("class_{i}")).collect()
}

/// Backbone → global average pool → dense(head_units, ReLU) → dense(K) → softmax.
pub fn build_transfer_model<T: Scalar>(
    spec: ModelSpec,
    weights: &BackboneWeights,
    seed: u64,
) -> Result<Model<T>, ModelError> {
    spec.validate()?;
    let ModelKind::Transfer(backbone) = spec.kind else {
        return Err(ModelError::InvalidSpec("build_transfer_model needs a transfer spec".into()));
    };
    let mut features = backbones::build::<T>(backbone, seed);
    let origin = match weights {
        BackboneWeights::Pretrained { cache_dir } => {
            let sha256 = weights::load_pretrained(&mut features, backbone, cache_dir)?;
            BackboneOrigin::Pretrained { sha256 }
        }
        BackboneWeights::RandomInit => {
            backbones::zero_init_residual_branches(&mut features);
            BackboneOrigin::Random
        }
    };
    let feature_dim = backbone.feature_dim();
    Ok(Model {
        spec,
        seed,
        origin: Some(origin),
        class_names: default_class_names(spec.num_classes),
        head: classifier_head(feature_dim, spec.head_units, spec.num_classes, seed),
        features,
        feature_dim,
    })
}

/// Four conv blocks (32/64/128/256 filters, 3×3, ReLU, 2×2 max-pool) → global
/// average pool → dense(head_units, ReLU) → dense(K) → softmax.
pub fn build_custom_cnn<T: Scalar>(spec: ModelSpec, seed: u64) -> Result<Model<T>, ModelError> {
    spec.validate()?;
    if spec.kind != ModelKind::CustomCnn {
        return Err(ModelError::InvalidSpec("build_custom_cnn needs a custom_cnn spec".into()));
    }
    let feature_dim = *CUSTOM_CNN_FILTERS.last().unwrap();
    Ok(Model {
        spec,
        seed,
        origin: None,
        class_names: default_class_names(spec.num_classes),
        features: custom_cnn::features(seed),
        head: classifier_head(feature_dim, spec.head_units, spec.num_classes, seed),
        feature_dim,
    })
}

/// Dispatches on `spec.kind`.
pub fn build_model<T: Scalar>(
    spec: ModelSpec,
    weights: &BackboneWeights,
    seed: u64,
) -> Result<Model<T>, ModelError> {
    match spec.kind {
        ModelKind::Transfer(_) => build_transfer_model(spec, weights, seed),
        ModelKind::CustomCnn => build_custom_cnn(spec, seed),
    }
}

impl<T: Scalar> Model<T> {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn normalization(&self) -> NormalizationPolicy {
        self.spec.normalization()
    }

    pub fn backbone_origin(&self) -> Option<&BackboneOrigin> {
        self.origin.as_ref()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn set_class_names(&mut self, names: Vec<String>) -> Result<(), ModelError> {
        if names.len() != self.spec.num_classes {
            return Err(ModelError::Shape(format!(
                "{} class names for a {}-class model",
                names.len(),
                self.spec.num_classes
            )));
        }
        self.class_names = names;
        Ok(())
    }

    /// Whether training updates the feature extractor.
    pub fn features_trainable(&self) -> bool {
        match self.spec.kind {
            ModelKind::CustomCnn => true,
            ModelKind::Transfer(_) => !self.spec.freeze_backbone,
        }
    }

    /// All parameter elements, including batch-norm running statistics.
    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Elements an optimizer step may change.
    pub fn trainable_parameter_count(&self) -> usize {
        let head: usize = self.head.params().iter().filter(|p| p.is_trainable()).map(|p| p.value.len()).sum();
        let features: usize = if self.features_trainable() {
            self.features.params().iter().filter(|p| p.is_trainable()).map(|p| p.value.len()).sum()
        } else {
            0
        };
        head + features
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.features.params();
        v.extend(self.head.params());
        v
    }

    pub fn feature_params(&self) -> Vec<&Param<T>> {
        self.features.params()
    }

    pub fn head_params(&self) -> Vec<&Param<T>> {
        self.head.params()
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.features.params_mut();
        v.extend(self.head.params_mut());
        v
    }

    /// Parameters an optimizer may update under the current freeze policy.
    pub fn trainable_params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v: Vec<&mut Param<T>> = if self.features_trainable() {
            self.features.params_mut()
        } else {
            Vec::new()
        };
        v.extend(self.head.params_mut());
        v.retain(|p| p.is_trainable());
        v
    }

    /// Training-mode pass to logits; caches what [`Model::backward`] needs.
    /// A frozen feature extractor runs in inference mode.
    pub(crate) fn forward_train(&mut self, images: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let x = self.to_network_layout(images)?;
        let f = if self.features_trainable() {
            self.features.forward_train(&x)
        } else {
            self.features.forward(&x)
        };
        Ok(self.head.forward_train(&f))
    }

    /// Training-mode pass over precomputed pooled features (head only).
    pub(crate) fn head_forward_train(&mut self, features: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        self.logits_from_features(features)?;
        Ok(self.head.forward_train(features))
    }

    /// Accumulates gradients of every trainable parameter. `through_features`
    /// must be false after [`Model::head_forward_train`].
    pub(crate) fn backward(&mut self, grad_logits: &Tensor<T>, through_features: bool) {
        let g = self.head.backward(grad_logits);
        if through_features && self.features_trainable() {
            self.features.backward(&g);
        }
    }

    pub(crate) fn head_mut(&mut self) -> &mut Sequential<T> {
        &mut self.head
    }

    /// Checks an NHWC image batch and returns it as NCHW.
    fn to_network_layout(&self, images: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let s = images.shape();
        if s.len() != 4 {
            return Err(ModelError::Shape(format!("expected [batch, h, w, 3] images, got {s:?}")));
        }
        if s[3] != 3 {
            return Err(ModelError::Shape(format!("expected 3 channels, got {}", s[3])));
        }
        if s[1] < MIN_INPUT_SIZE || s[2] < MIN_INPUT_SIZE {
            return Err(ModelError::Shape(format!(
                "input {}×{} is smaller than {MIN_INPUT_SIZE}×{MIN_INPUT_SIZE}",
                s[1], s[2]
            )));
        }
        Ok(images.nhwc_to_nchw())
    }

    /// Pooled feature vectors `[N, feature_dim]` for NHWC images.
    pub fn extract_features(&self, images: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let x = self.to_network_layout(images)?;
        let n = x.batch();
        let mut out = Vec::with_capacity(n * self.feature_dim);
        for start in (0..n).step_by(INFERENCE_CHUNK) {
            let rows: Vec<usize> = (start..(start + INFERENCE_CHUNK).min(n)).collect();
            let f = self.features.forward(&x.select(&rows));
            out.extend_from_slice(f.data());
        }
        Ok(Tensor::from_vec(&[n, self.feature_dim], out))
    }

    /// Head logits for pooled features.
    pub fn logits_from_features(&self, features: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        if features.rank() != 2 || features.shape()[1] != self.feature_dim {
            return Err(ModelError::Shape(format!(
                "expected [batch, {}] features, got {:?}",
                self.feature_dim,
                features.shape()
            )));
        }
        Ok(self.head.forward(features))
    }

    /// Pre-softmax scores for NHWC images.
    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let f = self.extract_features(images)?;
        self.logits_from_features(&f)
    }

    /// Class-probability matrix `[N, K]`; each row sums to one.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        Ok(softmax(&self.logits(images)?))
    }

    /// Drops any activations cached by an interrupted training step.
    pub fn clear_cache(&mut self) {
        self.features.clear_cache();
        self.head.clear_cache();
    }
}
