//! Parameter initialization.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::scalar::Scalar;

/// Standard deviation of the zero-mean Gaussian used for memories and embeddings.
pub const EMBEDDING_SIGMA: f64 = 0.1;

pub fn gaussian<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], sigma: f64) -> Tensor<T> {
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(normal.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Glorot/Xavier uniform for a `[fan_out, fan_in]` weight matrix.
pub fn glorot<T: Scalar, R: Rng + ?Sized>(rng: &mut R, fan_out: usize, fan_in: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::lit(rng.random_range(-limit..=limit)))
        .collect();
    Tensor::new(vec![fan_out, fan_in], data).expect("shape matches")
}

pub fn zeros<T: Scalar>(n: usize) -> Tensor<T> {
    Tensor::zeros(&[n])
}
