//! Core library for a desk-scale face-authentication trainer: a small
//! reverse-mode tensor engine, a multi-task recognition/liveness model,
//! confusion and style-transfer losses, biometric error metrics, and a
//! deterministic synthetic data generator.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fda;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod opt;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{gradient_check, softmax, Graph, Tensor, Var};
