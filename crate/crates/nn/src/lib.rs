//! Minimal dense-tensor autodiff for CPU training.
//!
//! * [`Tensor`]: row-major storage, `f32` or `f64`.
//! * [`Graph`] / [`Var`]: tape-recorded operations with reverse-mode gradients.
//! * [`layers`]: linear, layer norm, MLP, multi-head attention and attention pooling.
//! * [`AdamWState`]: decoupled-weight-decay Adam.
//! * [`gradcheck`]: central finite-difference verification.
//! * [`checkpoint`]: binary parameter container.

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
pub mod layers;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use error::{NnError, Result};
pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};
pub use graph::{Gradients, Graph, Var, GRAM_SCHMIDT_EPS, MASK_VALUE};
pub use layers::{attention_pool, Ctx};
pub use optim::{AdamWConfig, AdamWState};
pub use params::{ParamGrads, ParamId, ParamStore, Parameter};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
