//! A small CPU neural-network engine: NCHW tensors, layers with explicit
//! backward passes, softmax cross-entropy and first-order optimizers.
//!
//! Layers have two forward paths. [`Layer::forward`] is a pure inference pass
//! over `&self`, so a trained network can serve predictions from several
//! threads. [`Layer::forward_train`] records whatever the following
//! [`Layer::backward`] call needs and accumulates parameter gradients there.

mod conv;
mod layers;
pub mod loss;
pub mod optim;
mod tensor;

pub use conv::{Conv2d, Padding};
pub use layers::{BatchNorm2d, Dense, GlobalAvgPool, MaxPool2d, Relu, Relu6, Residual, Sequential};
pub use tensor::{matmul, Scalar, Tensor};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Whether a parameter is learned by gradient descent or is a fixed statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Running statistics; never touched by an optimizer.
    Buffer,
}

/// A named parameter with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub kind: ParamKind,
}

impl<T: Scalar> Param<T> {
    pub fn trainable(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
            kind: ParamKind::Trainable,
        }
    }

    pub fn buffer(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            value,
            grad: Tensor::zeros(&[0]),
            kind: ParamKind::Buffer,
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.kind == ParamKind::Trainable
    }

    pub fn zero_grad(&mut self) {
        if self.is_trainable() {
            self.grad.fill(T::zero());
        }
    }
}

/// One differentiable stage of a network.
pub trait Layer<T: Scalar>: Send + Sync {
    /// Inference pass; never mutates state.
    fn forward(&self, x: &Tensor<T>) -> Tensor<T>;

    /// Training pass; caches activations for [`Layer::backward`].
    fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T>;

    /// Propagates `grad_out` to the input and accumulates parameter gradients.
    ///
    /// Panics if no training forward pass preceded it.
    fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T>;

    fn params(&self) -> Vec<&Param<T>> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        Vec::new()
    }

    /// Drops cached activations.
    fn clear_cache(&mut self) {}
}

/// Derives an independent RNG stream from a run seed and a stable tag.
///
/// Used so that e.g. a parameter's initial value depends only on
/// `(seed, parameter name)`, not on construction order.
pub fn seeded_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Uniform(-bound, bound) initialization drawn from `seeded_rng(seed, name)`.
pub fn uniform_init<T: Scalar>(shape: &[usize], bound: f64, seed: u64, name: &str) -> Tensor<T> {
    use rand::Rng;
    let mut rng = seeded_rng(seed, name);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy(rng.gen_range(-bound..=bound)))
        .collect();
    Tensor::from_vec(shape, data)
}

/// He-uniform bound for layers followed by a ReLU.
pub fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// LeCun-uniform bound for the linear output layer.
pub fn lecun_bound(fan_in: usize) -> f64 {
    (3.0 / fan_in as f64).sqrt()
}
