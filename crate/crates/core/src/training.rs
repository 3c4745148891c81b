//! Mini-batch training with per-epoch validation, checkpoints and history.
//!
//! A frozen backbone never changes, so its pooled features are computed once
//! per split and each epoch only runs the classifier head.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{argmax, Predictions};
use crate::models::{save_checkpoint, Model, ModelError};
use crate::nn::loss::{softmax, softmax_cross_entropy};
use crate::nn::optim::{Optimizer, OptimizerKind};
use crate::nn::{Scalar, Tensor};
use crate::preprocess::{assemble_batch, epoch_order, ImageSource, PreprocessError};

pub const DEFAULT_EPOCHS: usize = 10;
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;
pub const HISTORY_CSV: &str = "history.csv";
pub const HISTORY_JSON: &str = "history.json";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:03}.ckpt")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    CategoricalCrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub loss: LossKind,
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
    /// Per-class loss weights; `None` weights every sample equally.
    pub class_weights: Option<Vec<f64>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            learning_rate: DEFAULT_LEARNING_RATE,
            optimizer: OptimizerKind::Adam,
            loss: LossKind::CategoricalCrossEntropy,
            seed: 0,
            checkpoint_dir: PathBuf::from("checkpoints"),
            class_weights: None,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is accepted: it makes training the identity map,
    /// which is useful for checking the loop itself.
    pub fn validate(&self, num_classes: usize) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate must be finite and non-negative, got {}", self.learning_rate));
        }
        if let Some(w) = &self.class_weights {
            if w.len() != num_classes {
                return bad(format!("{} class weights for {num_classes} classes", w.len()));
            }
            if !w.iter().all(|v| v.is_finite() && *v > 0.0) {
                return bad("class weights must be positive and finite".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("cannot write checkpoint: {0}")]
    Checkpoint(#[source] ModelError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Data(#[from] PreprocessError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch with the highest validation accuracy; ties go to the earlier one.
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch.and_then(|e| self.epochs.iter().find(|r| r.epoch == e))
    }

    fn push(&mut self, record: EpochRecord) -> bool {
        let improved = self.best().is_none_or(|b| record.val_accuracy > b.val_accuracy);
        if improved {
            self.best_epoch = Some(record.epoch);
        }
        self.epochs.push(record);
        improved
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        for r in &self.epochs {
            w.serialize(r).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(io_err(path))
    }

    pub fn write_json(&self, path: &Path) -> Result<(), TrainError> {
        let json = serde_json::to_string_pretty(self).expect("history serializes");
        fs::write(path, json + "\n").map_err(io_err(path))
    }

    pub fn read_json(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| TrainError::Io {
            path: path.to_path_buf(),
            source: io::Error::new(io::ErrorKind::InvalidData, e),
        })
    }
}

fn csv_err(path: &Path, e: csv::Error) -> TrainError {
    TrainError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    }
}

/// Loss and hit count of one mini-batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
}

fn batch_stats<T: Scalar>(logits: &Tensor<T>, labels: &[usize], loss: f64) -> StepStats {
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(logits.item(i)) == y)
        .count();
    StepStats {
        loss,
        correct,
        count: labels.len(),
    }
}

fn zero_grads<T: Scalar>(model: &mut Model<T>) {
    model.trainable_params_mut().into_iter().for_each(|p| p.zero_grad());
}

/// Forward and backward pass over NHWC images; leaves the cross-entropy
/// gradient in every trainable parameter's `grad`.
pub fn compute_gradients<T: Scalar>(
    model: &mut Model<T>,
    images: &Tensor<T>,
    labels: &[usize],
    class_weights: Option<&[f64]>,
) -> Result<StepStats, ModelError> {
    zero_grads(model);
    let logits = model.forward_train(images)?;
    let (loss, grad) = softmax_cross_entropy(&logits, labels, class_weights);
    model.backward(&grad, true);
    Ok(batch_stats(&logits, labels, loss))
}

/// As [`compute_gradients`], from pooled features through the head only.
pub fn compute_head_gradients<T: Scalar>(
    model: &mut Model<T>,
    features: &Tensor<T>,
    labels: &[usize],
    class_weights: Option<&[f64]>,
) -> Result<StepStats, ModelError> {
    zero_grads(model);
    let logits = model.head_forward_train(features)?;
    let (loss, grad) = softmax_cross_entropy(&logits, labels, class_weights);
    model.backward(&grad, false);
    Ok(batch_stats(&logits, labels, loss))
}

/// One optimizer update on a mini-batch of NHWC images. No update is made
/// when the loss is not finite.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    optimizer: &mut Optimizer<T>,
    images: &Tensor<T>,
    labels: &[usize],
    class_weights: Option<&[f64]>,
) -> Result<StepStats, ModelError> {
    let stats = compute_gradients(model, images, labels, class_weights)?;
    if stats.loss.is_finite() {
        optimizer.step(&mut model.trainable_params_mut());
    }
    Ok(stats)
}

/// Normalized images of `indices`, converted to the model's scalar type.
fn load_images<T: Scalar, S: ImageSource>(
    model: &Model<T>,
    source: &S,
    indices: &[usize],
) -> Result<(Tensor<T>, Vec<usize>), PreprocessError> {
    let batch = assemble_batch(source, indices, Some(model.normalization()))?;
    Ok((batch.images.cast(), batch.labels))
}

fn pooled_features<T: Scalar, S: ImageSource>(
    model: &Model<T>,
    source: &S,
    batch_size: usize,
) -> Result<Tensor<T>, TrainError> {
    let all: Vec<usize> = (0..source.len()).collect();
    let mut data = Vec::with_capacity(source.len() * model.feature_dim());
    for chunk in all.chunks(batch_size) {
        let (images, _) = load_images(model, source, chunk)?;
        data.extend_from_slice(model.extract_features(&images)?.data());
    }
    Ok(Tensor::from_vec(&[source.len(), model.feature_dim()], data))
}

fn check_source<S: ImageSource>(source: &S, name: &str, num_classes: usize) -> Result<(), TrainError> {
    if source.is_empty() {
        return Err(PreprocessError::EmptySplit(name.into()).into());
    }
    if source.num_classes() != num_classes {
        return Err(ModelError::Shape(format!(
            "{name} data has {} classes, model has {num_classes}",
            source.num_classes()
        ))
        .into());
    }
    Ok(())
}

/// Epoch-at-a-time training loop that owns the model.
pub struct Trainer<T: Scalar, S: ImageSource, V: ImageSource> {
    model: Model<T>,
    train: S,
    val: V,
    config: TrainConfig,
    optimizer: Optimizer<T>,
    /// Pooled train and validation features when the backbone is frozen.
    cached: Option<(Tensor<T>, Tensor<T>)>,
    history: TrainHistory,
}

impl<T: Scalar, S: ImageSource, V: ImageSource> Trainer<T, S, V> {
    pub fn new(model: Model<T>, train: S, val: V, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate(model.num_classes())?;
        check_source(&train, "train", model.num_classes())?;
        check_source(&val, "validation", model.num_classes())?;
        fs::create_dir_all(&config.checkpoint_dir).map_err(|e| {
            TrainError::Checkpoint(ModelError::Checkpoint(format!(
                "cannot create {}: {e}",
                config.checkpoint_dir.display()
            )))
        })?;
        let cached = if model.features_trainable() {
            None
        } else {
            let t = pooled_features(&model, &train, config.batch_size)?;
            let v = pooled_features(&model, &val, config.batch_size)?;
            Some((t, v))
        };
        Ok(Self {
            optimizer: Optimizer::new(config.optimizer, config.learning_rate),
            model,
            train,
            val,
            config,
            cached,
            history: TrainHistory::default(),
        })
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn into_parts(self) -> (Model<T>, TrainHistory) {
        (self.model, self.history)
    }

    /// Runs one more epoch, then checkpoints and rewrites the history files.
    pub fn run_epoch(&mut self) -> Result<EpochRecord, TrainError> {
        let started = Instant::now();
        let epoch = self.history.len() + 1;
        let order = epoch_order(self.train.len(), true, self.config.seed, epoch - 1);
        let weights = self.config.class_weights.clone();
        let (mut loss_sum, mut correct) = (0.0, 0);
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let stats = match &self.cached {
                Some((features, _)) => {
                    let labels: Vec<usize> = chunk.iter().map(|&i| self.train.label(i)).collect();
                    compute_head_gradients(&mut self.model, &features.select(chunk), &labels, weights.as_deref())?
                }
                None => {
                    let (images, labels) = load_images(&self.model, &self.train, chunk)?;
                    compute_gradients(&mut self.model, &images, &labels, weights.as_deref())?
                }
            };
            if !stats.loss.is_finite() {
                self.model.clear_cache();
                return Err(TrainError::Diverged { epoch, batch: b + 1 });
            }
            self.optimizer.step(&mut self.model.trainable_params_mut());
            loss_sum += stats.loss * stats.count as f64;
            correct += stats.correct;
        }
        let n = self.train.len() as f64;
        let (val_loss, val_accuracy) = self.validate()?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            val_loss,
            val_accuracy,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        let improved = self.history.push(record.clone());
        let dir = &self.config.checkpoint_dir;
        save_checkpoint(&self.model, &dir.join(epoch_checkpoint_name(epoch))).map_err(TrainError::Checkpoint)?;
        if improved {
            save_checkpoint(&self.model, &dir.join(BEST_CHECKPOINT)).map_err(TrainError::Checkpoint)?;
        }
        self.history.write_csv(&dir.join(HISTORY_CSV))?;
        self.history.write_json(&dir.join(HISTORY_JSON))?;
        eprintln!(
            "epoch {epoch}/{} train_loss={:.3} val_acc={:.3}",
            self.config.epochs, record.train_loss, record.val_accuracy
        );
        Ok(record)
    }

    /// Mean validation cross-entropy (unweighted) and accuracy.
    fn validate(&self) -> Result<(f64, f64), TrainError> {
        let all: Vec<usize> = (0..self.val.len()).collect();
        let (mut loss_sum, mut correct) = (0.0, 0);
        for chunk in all.chunks(self.config.batch_size) {
            let labels: Vec<usize> = chunk.iter().map(|&i| self.val.label(i)).collect();
            let logits = match &self.cached {
                Some((_, features)) => self.model.logits_from_features(&features.select(chunk))?,
                None => self.model.logits(&load_images(&self.model, &self.val, chunk)?.0)?,
            };
            let (loss, _) = softmax_cross_entropy(&logits, &labels, None);
            let stats = batch_stats(&logits, &labels, loss);
            loss_sum += loss * stats.count as f64;
            correct += stats.correct;
        }
        let n = self.val.len() as f64;
        Ok((loss_sum / n, correct as f64 / n))
    }
}

/// Trains for `config.epochs` epochs and returns the final-epoch model.
///
/// Writes `epoch_NNN.ckpt`, `best.ckpt`, `history.csv` and `history.json`
/// under `config.checkpoint_dir`.
pub fn train<T: Scalar, S: ImageSource, V: ImageSource>(
    model: Model<T>,
    train_source: S,
    val_source: V,
    config: TrainConfig,
) -> Result<(Model<T>, TrainHistory), TrainError> {
    let epochs = config.epochs;
    let mut trainer = Trainer::new(model, train_source, val_source, config)?;
    for _ in 0..epochs {
        trainer.run_epoch()?;
    }
    Ok(trainer.into_parts())
}

/// Class probabilities for every sample of `source`, in source order.
pub fn evaluate_split<T: Scalar, S: ImageSource>(
    model: &Model<T>,
    source: &S,
    batch_size: usize,
) -> Result<Predictions, TrainError> {
    if batch_size == 0 {
        return Err(PreprocessError::InvalidBatchSize.into());
    }
    check_source(source, "evaluation", model.num_classes())?;
    let all: Vec<usize> = (0..source.len()).collect();
    let mut out = Predictions {
        sample_paths: Vec::with_capacity(all.len()),
        y_true: Vec::with_capacity(all.len()),
        y_score: Vec::with_capacity(all.len()),
    };
    for chunk in all.chunks(batch_size) {
        let (images, labels) = load_images(model, source, chunk)?;
        let probs = softmax(&model.logits(&images)?);
        for (row, &i) in chunk.iter().enumerate() {
            out.sample_paths.push(source.sample_id(i));
            out.y_score.push(probs.item(row).iter().map(|v| v.as_f64()).collect());
        }
        out.y_true.extend(labels);
    }
    Ok(out)
}
