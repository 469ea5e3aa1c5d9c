//! Segmentation network combining a residual CNN, a lightweight multi-scale
//! transformer stream and a Sobel-gated boundary branch, together with the
//! training objective, evaluation metrics, data loading and a small
//! reverse-mode autograd engine it all runs on.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root pick the concrete precision.

pub mod backbone;
pub mod bem;
pub mod bim_decoder;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod lightvit;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{CtoError, Result};
pub use graph::{Grads, Graph, Var};
pub use model::{build_model, CtoModel, ModelConfig, SegOutput, Variant};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Model32 = CtoModel<f32>;
pub type Model64 = CtoModel<f64>;
pub type Trainer32 = train::Trainer<f32>;
pub type Trainer64 = train::Trainer<f64>;
