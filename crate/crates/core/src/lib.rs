//! Neural activation sensitivity regularization (NsLoss) with a small
//! reverse-mode autodiff engine, robustness baselines, gradient attribution
//! and explanation-quality metrics.

pub mod attribution;
pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod nsloss;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{Model, ModelFn, ModelSpec, TracedModel};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
