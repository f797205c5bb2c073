//! Continual-learning framework built around logits replay and layer-wise,
//! attention-gated feature distillation from a frozen pretrained sibling
//! network, plus rehearsal/regularization baselines and representation-drift
//! analysis.
//!
//! The numeric core is generic over the scalar type ([`Scalar`]); concrete
//! aliases for the common instantiations are exported below.

pub mod analysis;
pub mod attention;
pub mod backbone;
pub mod benchmark;
pub mod buffer;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod losses;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision tensor, the training dtype.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision tensor, used by verification harnesses.
pub type Tensor64 = tensor::Tensor<f64>;
