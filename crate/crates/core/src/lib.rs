//! Adversarial attacks and defenses for small 1-D convolutional time-series
//! classifiers under an L∞ threat model.

pub mod attacks;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod tensor;
pub mod trainers;

pub use error::{Error, Result};
pub use tensor::Tensor;
