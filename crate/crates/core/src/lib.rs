//! From-scratch building blocks for a lightweight TB-screening CNN over chest
//! X-rays: tensors with reverse-mode autodiff, the LightTBNet residual
//! architecture, a CLAHE-based imaging pipeline, stratified splits with
//! 5-fold batching, focal-loss training with Adam, ensemble evaluation,
//! MAC/parameter/latency accounting and gradient-based explainability.
//!
//! Core math is generic over the scalar type ([`Scalar`]): f32 is the
//! production dtype, f64 backs gradient verification.

pub mod autodiff;
pub mod loss;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod scalar;
pub mod tensor;

pub use autodiff::{Graph, Var};
pub use model::{LightTBNet, ModelConfig};
pub use scalar::Scalar;
pub use tensor::{Tensor, TensorError};

/// Production-precision aliases.
pub type Tensor32 = Tensor<f32>;
pub type Graph32 = Graph<f32>;
pub type Model32 = LightTBNet<f32>;

/// Verification-precision aliases (gradient checks).
pub type Tensor64 = Tensor<f64>;
pub type Graph64 = Graph<f64>;
pub type Model64 = LightTBNet<f64>;
