//! Layer-ensemble segmentation: a single network with a segmentation head
//! after every block, giving single-pass ensemble predictions, pixel-wise
//! and image-level uncertainty, and prediction-depth difficulty estimates.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod fusion;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod runner;
pub mod tensor;
pub mod uncertainty;

pub use error::{LeError, Result};
pub use tensor::Tensor;
