//! Scribble-supervised segmentation with a dynamic feature regularized loss.

pub mod error;
pub mod feat_loss;
pub mod grid;
pub mod kernels;
pub mod model;
pub mod seg_loss;
pub mod data;
pub mod oracle;
pub mod trainer;

pub use error::{Error, Result};
