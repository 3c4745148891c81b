//! Image decoding, bilinear resizing to the network input size, intensity
//! normalization and mini-batch assembly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetManifest, Split};
use crate::models::Backbone;
use crate::nn::{seeded_rng, Tensor};

/// Network input edge length.
pub const INPUT_SIZE: usize = 224;
pub const CHANNELS: usize = 3;

/// ImageNet channel means in BGR order, subtracted by the "caffe" convention.
pub const IMAGENET_MEAN_BGR: [f32; 3] = [103.939, 116.779, 123.68];

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("cannot decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("split `{0}` is empty")]
    EmptySplit(String),
    #[error("batch size must be at least 1")]
    InvalidBatchSize,
}

/// Height × width × channel pixel array, row-major HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageArray {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ImageArray {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width * channels, "pixel buffer size");
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self::new(height, width, 3, data)
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }
}

/// How pixel intensities in `[0, 255]` are mapped before entering a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationPolicy {
    /// `x / 255`.
    UnitScale,
    /// Whatever the named pretrained backbone was trained with.
    BackboneSpecific(Backbone),
}

/// Published input conventions of the supported pretrained backbones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputConvention {
    /// RGB→BGR, then subtract [`IMAGENET_MEAN_BGR`]; no scaling.
    Caffe,
    /// `x / 127.5 - 1`, into `[-1, 1]`.
    SignedUnit,
}

/// Decodes an image file, replicates grayscale to RGB and resizes it to
/// `INPUT_SIZE × INPUT_SIZE`. Values stay in `[0, 255]`.
pub fn load_and_resize(path: &Path) -> Result<ImageArray, PreprocessError> {
    let img = image::open(path).map_err(|e| PreprocessError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let raw = ImageArray::new(
        h as usize,
        w as usize,
        3,
        rgb.into_raw().into_iter().map(f32::from).collect(),
    );
    Ok(resize_bilinear(&raw, INPUT_SIZE, INPUT_SIZE))
}

/// Bilinear resampling with half-pixel centres and edge clamping.
///
/// Output pixel `(y, x)` samples source coordinate
/// `((y + 0.5) * in_h / out_h - 0.5, ...)`, so equal sizes are an exact copy.
pub fn resize_bilinear(src: &ImageArray, out_h: usize, out_w: usize) -> ImageArray {
    if src.height == out_h && src.width == out_w {
        return src.clone();
    }
    let c = src.channels;
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, (s - lo as f64) as f32)
            })
            .collect()
    };
    let ys = axis(out_h, src.height);
    let xs = axis(out_w, src.width);
    let mut data = Vec::with_capacity(out_h * out_w * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let p = |y: usize, x: usize| src.data[(y * src.width + x) * c + ch];
                let top = p(y0, x0) + (p(y0, x1) - p(y0, x0)) * fx;
                let bottom = p(y1, x0) + (p(y1, x1) - p(y1, x0)) * fx;
                data.push(top + (bottom - top) * fy);
            }
        }
    }
    ImageArray::new(out_h, out_w, c, data)
}

/// Applies `policy` to an image with values in `[0, 255]`.
pub fn normalize(image: &ImageArray, policy: NormalizationPolicy) -> ImageArray {
    let convention = match policy {
        NormalizationPolicy::UnitScale => None,
        NormalizationPolicy::BackboneSpecific(b) => Some(b.input_convention()),
    };
    let mut out = image.clone();
    match convention {
        None => out.data.iter_mut().for_each(|v| *v /= 255.0),
        Some(InputConvention::SignedUnit) => out.data.iter_mut().for_each(|v| *v = *v / 127.5 - 1.0),
        Some(InputConvention::Caffe) => {
            assert_eq!(image.channels, 3, "caffe convention needs RGB input");
            for px in out.data.chunks_mut(3) {
                let (r, g, b) = (px[0], px[1], px[2]);
                px[0] = b - IMAGENET_MEAN_BGR[0];
                px[1] = g - IMAGENET_MEAN_BGR[1];
                px[2] = r - IMAGENET_MEAN_BGR[2];
            }
        }
    }
    out
}

/// Random access to labelled images.
pub trait ImageSource: Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn label(&self, index: usize) -> usize;
    fn num_classes(&self) -> usize;
    /// Decoded, resized image with values in `[0, 255]`.
    fn load(&self, index: usize) -> Result<ImageArray, PreprocessError>;
    /// Human-readable identity (file path for manifest-backed sources).
    fn sample_id(&self, index: usize) -> String;
}

impl<S: ImageSource + ?Sized> ImageSource for &S {
    fn len(&self) -> usize {
        (**self).len()
    }
    fn label(&self, index: usize) -> usize {
        (**self).label(index)
    }
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }
    fn load(&self, index: usize) -> Result<ImageArray, PreprocessError> {
        (**self).load(index)
    }
    fn sample_id(&self, index: usize) -> String {
        (**self).sample_id(index)
    }
}

/// The samples of one split, in manifest order, read from disk.
pub struct SplitSource<'a> {
    manifest: &'a DatasetManifest,
    indices: Vec<usize>,
}

impl<'a> SplitSource<'a> {
    pub fn new(manifest: &'a DatasetManifest, split: Split) -> Result<Self, PreprocessError> {
        let indices = manifest.split_indices(split);
        if indices.is_empty() {
            return Err(PreprocessError::EmptySplit(split.to_string()));
        }
        Ok(Self { manifest, indices })
    }

    pub fn path(&self, index: usize) -> &Path {
        &self.manifest.samples[self.indices[index]].path
    }
}

impl ImageSource for SplitSource<'_> {
    fn len(&self) -> usize {
        self.indices.len()
    }
    fn label(&self, index: usize) -> usize {
        self.manifest.samples[self.indices[index]].label
    }
    fn num_classes(&self) -> usize {
        self.manifest.num_classes()
    }
    fn load(&self, index: usize) -> Result<ImageArray, PreprocessError> {
        load_and_resize(self.path(index))
    }
    fn sample_id(&self, index: usize) -> String {
        self.path(index).to_string_lossy().into_owned()
    }
}

/// Already-decoded images held in memory.
pub struct InMemorySource {
    images: Vec<ImageArray>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl InMemorySource {
    pub fn new(images: Vec<ImageArray>, labels: Vec<usize>, num_classes: usize) -> Self {
        assert_eq!(images.len(), labels.len(), "one label per image");
        assert!(labels.iter().all(|&l| l < num_classes), "label out of range");
        Self {
            images,
            labels,
            num_classes,
        }
    }
}

impl ImageSource for InMemorySource {
    fn len(&self) -> usize {
        self.images.len()
    }
    fn label(&self, index: usize) -> usize {
        self.labels[index]
    }
    fn num_classes(&self) -> usize {
        self.num_classes
    }
    fn load(&self, index: usize) -> Result<ImageArray, PreprocessError> {
        Ok(self.images[index].clone())
    }
    fn sample_id(&self, index: usize) -> String {
        format!("#{index}")
    }
}

/// Mini-batch of network inputs and their targets.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[batch, height, width, 3]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    /// `[batch, num_classes]`.
    pub one_hot: Tensor<f32>,
    /// Positions of these samples within the source.
    pub indices: Vec<usize>,
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> Tensor<f32> {
    let mut t = Tensor::zeros(&[labels.len(), num_classes]);
    for (row, &l) in t.data_mut().chunks_mut(num_classes).zip(labels) {
        row[l] = 1.0;
    }
    t
}

/// Visiting order of `n` samples for one epoch.
///
/// Unshuffled order is the identity; shuffled order depends only on
/// `(seed, epoch)`.
pub fn epoch_order(n: usize, shuffle: bool, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        use rand::seq::SliceRandom;
        order.shuffle(&mut seeded_rng(seed, &format!("epoch/{epoch}")));
    }
    order
}

/// Loads and stacks the given samples of `source`.
pub fn assemble_batch<S: ImageSource + ?Sized>(
    source: &S,
    indices: &[usize],
    normalization: Option<NormalizationPolicy>,
) -> Result<Batch, PreprocessError> {
    let mut pixels = Vec::new();
    let mut shape = None;
    for &i in indices {
        let img = source.load(i)?;
        let img = match normalization {
            Some(p) => normalize(&img, p),
            None => img,
        };
        let s = img.shape();
        if *shape.get_or_insert(s) != s {
            return Err(PreprocessError::Decode {
                path: PathBuf::from(source.sample_id(i)),
                message: format!("image shape {s:?} differs from batch shape {:?}", shape.unwrap()),
            });
        }
        pixels.extend_from_slice(&img.data);
    }
    let (h, w, c) = shape.unwrap_or((INPUT_SIZE, INPUT_SIZE, CHANNELS));
    let labels: Vec<usize> = indices.iter().map(|&i| source.label(i)).collect();
    Ok(Batch {
        images: Tensor::from_vec(&[indices.len(), h, w, c], pixels),
        one_hot: one_hot(&labels, source.num_classes()),
        labels,
        indices: indices.to_vec(),
    })
}

/// Yields `ceil(n / batch_size)` batches covering every sample once.
pub struct BatchIterator<S: ImageSource> {
    source: S,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
    normalization: Option<NormalizationPolicy>,
}

impl<S: ImageSource> BatchIterator<S> {
    pub fn new(
        source: S,
        batch_size: usize,
        shuffle: bool,
        seed: u64,
        epoch: usize,
    ) -> Result<Self, PreprocessError> {
        if batch_size == 0 {
            return Err(PreprocessError::InvalidBatchSize);
        }
        if source.is_empty() {
            return Err(PreprocessError::EmptySplit("source".into()));
        }
        Ok(Self {
            order: epoch_order(source.len(), shuffle, seed, epoch),
            source,
            batch_size,
            cursor: 0,
            normalization: None,
        })
    }

    pub fn with_normalization(mut self, policy: NormalizationPolicy) -> Self {
        self.normalization = Some(policy);
        self
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl<S: ImageSource> Iterator for BatchIterator<S> {
    type Item = Result<Batch, PreprocessError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let idx = &self.order[self.cursor..end];
        self.cursor = end;
        Some(assemble_batch(&self.source, idx, self.normalization))
    }
}

/// Batches over one split of a manifest (epoch 0 ordering).
pub fn batch_iterator(
    manifest: &DatasetManifest,
    split: Split,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
) -> Result<BatchIterator<SplitSource<'_>>, PreprocessError> {
    BatchIterator::new(SplitSource::new(manifest, split)?, batch_size, shuffle, seed, 0)
}
