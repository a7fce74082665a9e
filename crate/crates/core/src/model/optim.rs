use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::DgmnConfig;

/// Bias-corrected Adam with one moment pair per parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: &DgmnConfig, shapes: &[Vec<usize>]) -> Self {
        Self {
            learning_rate: config.learning_rate,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            epsilon: config.adam_epsilon,
            step: 0,
            first: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            second: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// One update. `params` and `grads` must line up with the moment buffers.
    pub fn update(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::ShapeMismatch {
                op: "adam",
                lhs: vec![self.first.len()],
                rhs: vec![params.len(), grads.len()],
            });
        }
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::one() - T::lit(self.beta1.powi(self.step.min(i32::MAX as u64) as i32));
        let c2 = T::one() - T::lit(self.beta2.powi(self.step.min(i32::MAX as u64) as i32));
        let (lr, eps) = (T::lit(self.learning_rate), T::lit(self.epsilon));
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            if p.shape() != g.shape() || m.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let iter = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
            for (((x, &g), m), v) in iter {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping. `max_norm <= 0` disables clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
    }
    norm
}
