//! GMENet: gated cross-attention imputation of a missing MRI sequence's latent
//! feature, mixture-of-experts fusion, and balanced multi-task glioma
//! classification, trained end to end on synthetic multi-center cohorts.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`). Training and
//! the acceptance checks run in `f64`; the aliases below fix that choice.

pub mod cggm;
pub mod checkpoint;
pub mod data;
pub mod dwefm;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod scalar;
pub mod stem;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor2<f64>;
pub type Params = nn::ParamStore<f64>;
pub type Model = model::GmeNet<f64>;
pub type Optimizer = optim::AdamW<f64>;
pub type Predictions = model::Predictions<f64>;
