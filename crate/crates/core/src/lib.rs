//! Multi-path residual network (MP-ResNet) for semantic segmentation of
//! 4-channel PolSAR tiles, together with the small tensor engine it runs
//! on, an FCN-ResNet34 baseline, static cost accounting, segmentation
//! metrics, synthetic speckled data and a training harness.

pub mod analysis;
pub mod blocks;
pub mod error;
pub mod data;
pub mod exec;
pub mod metrics;
pub mod models;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
