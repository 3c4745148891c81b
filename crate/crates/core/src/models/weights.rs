//! Pretrained backbone weights stored as `<cache>/<backbone>.safetensors`.
//!
//! Keys are the backbone parameter names without the `backbone.` prefix
//! (e.g. `conv2_block1_1_conv.weight`, `conv1_bn.moving_mean`). Convolution
//! kernels are `[out, in/groups, kh, kw]`, values little-endian f32.

use std::fs;
use std::path::{Path, PathBuf};

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use sha2::{Digest, Sha256};

use super::backbones::PREFIX;
use super::{Backbone, ModelError};
use crate::nn::{Layer, Param, Scalar, Sequential, Tensor};

pub fn weights_path(cache_dir: &Path, backbone: Backbone) -> PathBuf {
    cache_dir.join(format!("{}.safetensors", backbone.id()))
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn file_key(param_name: &str) -> &str {
    param_name
        .strip_prefix(PREFIX)
        .and_then(|s| s.strip_prefix('.'))
        .unwrap_or(param_name)
}

/// Decodes a safetensors entry into `T`, accepting f32 or f64 storage.
pub(crate) fn tensor_from_view<T: Scalar>(view: &TensorView<'_>) -> Result<Tensor<T>, String> {
    let bytes = view.data();
    let data: Vec<T> = match view.dtype() {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().unwrap())))
            .collect(),
        other => return Err(format!("unsupported dtype {other:?}")),
    };
    Ok(Tensor::from_vec(view.shape(), data))
}

/// Copies every parameter of `net` from the file; returns the file's SHA-256.
pub(super) fn load_pretrained<T: Scalar>(
    net: &mut Sequential<T>,
    backbone: Backbone,
    cache_dir: &Path,
) -> Result<String, ModelError> {
    let path = weights_path(cache_dir, backbone);
    let unavailable = |reason: String| ModelError::WeightsUnavailable {
        backbone,
        path: path.clone(),
        reason,
    };
    let bytes = fs::read(&path).map_err(|e| unavailable(e.to_string()))?;
    let file = SafeTensors::deserialize(&bytes).map_err(|e| unavailable(e.to_string()))?;
    for p in net.params_mut() {
        let key = file_key(&p.name);
        let view = file
            .tensor(key)
            .map_err(|_| unavailable(format!("missing tensor `{key}`")))?;
        if view.shape() != p.value.shape() {
            return Err(unavailable(format!(
                "tensor `{key}` has shape {:?}, expected {:?}",
                view.shape(),
                p.value.shape()
            )));
        }
        p.value = tensor_from_view(&view).map_err(|m| unavailable(format!("`{key}`: {m}")))?;
    }
    Ok(sha256_hex(&bytes))
}

/// Serializes named parameters to safetensors bytes.
pub(crate) fn serialize_params<T: Scalar>(params: &[&Param<T>], strip_prefix: bool) -> Result<Vec<u8>, String> {
    let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = params
        .iter()
        .map(|p| {
            let mut bytes = Vec::with_capacity(p.value.len() * T::BYTES);
            p.value.data().iter().for_each(|v| v.write_le(&mut bytes));
            let name = if strip_prefix { file_key(&p.name).to_string() } else { p.name.clone() };
            (name, p.value.shape().to_vec(), bytes)
        })
        .collect();
    let views = buffers
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(T::DTYPE, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| e.to_string())
        })
        .collect::<Result<Vec<_>, _>>()?;
    safetensors::serialize(views, &None).map_err(|e| e.to_string())
}

/// Writes a model's backbone parameters in the pretrained-weights format.
pub fn export_backbone_weights<T: Scalar>(model: &super::Model<T>, cache_dir: &Path) -> Result<PathBuf, ModelError> {
    let backbone = model
        .spec()
        .kind
        .backbone()
        .ok_or_else(|| ModelError::InvalidSpec("custom CNN has no pretrained backbone".into()))?;
    let bytes = serialize_params(&model.feature_params(), true).map_err(ModelError::Checkpoint)?;
    fs::create_dir_all(cache_dir).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let path = weights_path(cache_dir, backbone);
    fs::write(&path, bytes).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    Ok(path)
}
