//! Multi-sample data augmentation experiments: batch construction for
//! growing and fixed batch schemes, a small reverse-mode autodiff engine,
//! a normalizer-free residual network, SGD training, gradient-variance
//! measurement and a resumable sweep harness.

pub mod analysis;
pub mod augment;
pub mod batching;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod exec;
pub mod harness;
pub mod models;
pub mod record;
pub mod seed;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use exec::Exec;
pub use record::{RunRecord, RunStatus};
pub use tensor::Tensor;
