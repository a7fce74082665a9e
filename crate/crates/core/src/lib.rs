//! Knowledge tracing with a key-value concept memory, a learned forgetting
//! gate and a graph convolution over a latent concept graph.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the usual choices.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod forgetting;
pub mod init;
pub mod lcg;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod scalar;

pub use error::{Error, Result};
pub use model::{DgmnConfig, DgmnModel, Variant};
pub use scalar::Scalar;

pub type Tensor64 = autodiff::Tensor<f64>;
pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type Dgmn64 = model::DgmnModel<f64>;
pub type Dgmn32 = model::DgmnModel<f32>;
