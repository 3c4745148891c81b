//! First-order optimizers over named parameters.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Param, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// Adam moments are keyed by parameter name.
pub struct Optimizer<T: Scalar> {
    kind: OptimizerKind,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
    moments: HashMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter in `params`.
    pub fn step(&mut self, params: &mut [&mut Param<T>]) {
        self.step += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                let lr = T::from_f64_lossy(lr);
                for p in params.iter_mut().filter(|p| p.is_trainable()) {
                    let Param { value, grad, .. } = &mut **p;
                    value
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .for_each(|(w, &g)| *w -= lr * g);
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let b1 = T::from_f64_lossy(self.beta1);
                let b2 = T::from_f64_lossy(self.beta2);
                let one = T::one();
                let step_size = T::from_f64_lossy(
                    lr * (1.0 - self.beta2.powi(t)).sqrt() / (1.0 - self.beta1.powi(t)),
                );
                let eps_hat = T::from_f64_lossy(self.epsilon * (1.0 - self.beta2.powi(t)).sqrt());
                for p in params.iter_mut().filter(|p| p.is_trainable()) {
                    let (m, v) = self
                        .moments
                        .entry(p.name.clone())
                        .or_insert_with(|| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())));
                    let Param { value, grad, .. } = &mut **p;
                    for (((w, &g), m), v) in value
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *m = b1 * *m + (one - b1) * g;
                        *v = b2 * *v + (one - b2) * g * g;
                        *w -= step_size * *m / (v.sqrt() + eps_hat);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_moves_against_the_gradient() {
        let mut p = Param::trainable("w", Tensor::<f64>::from_vec(&[2], vec![1.0, -1.0]));
        p.grad = Tensor::from_vec(&[2], vec![0.5, -2.0]);
        Optimizer::new(OptimizerKind::Sgd, 0.1).step(&mut [&mut p]);
        assert_eq!(p.value.data(), &[0.95, -0.8]);
    }

    #[test]
    fn first_adam_step_has_magnitude_lr() {
        let mut p = Param::trainable("w", Tensor::<f64>::from_vec(&[3], vec![0.0; 3]));
        p.grad = Tensor::from_vec(&[3], vec![3.0, -0.01, 0.0]);
        Optimizer::new(OptimizerKind::Adam, 1e-4).step(&mut [&mut p]);
        let d = p.value.data();
        assert!((d[0] + 1e-4).abs() < 1e-9);
        assert!((d[1] - 1e-4).abs() < 1e-8);
        assert_eq!(d[2], 0.0);
    }

    #[test]
    fn buffers_are_never_updated() {
        let mut b = Param::buffer("running", Tensor::<f64>::from_vec(&[1], vec![4.0]));
        let mut opt = Optimizer::new(OptimizerKind::Adam, 1.0);
        opt.step(&mut [&mut b]);
        assert_eq!(b.value.data(), &[4.0]);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut p = Param::trainable("w", Tensor::<f32>::from_vec(&[2], vec![0.3, 0.7]));
        p.grad = Tensor::from_vec(&[2], vec![1.0, -1.0]);
        for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
            let mut opt = Optimizer::new(kind, 0.0);
            opt.step(&mut [&mut p]);
            opt.step(&mut [&mut p]);
        }
        assert_eq!(p.value.data(), &[0.3, 0.7]);
    }
}
