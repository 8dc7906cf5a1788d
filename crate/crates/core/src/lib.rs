//! Hybrid-fusion transformer (HFTrans) for multisequence 3D volume
//! segmentation, built on a small reverse-mode autodiff engine.

pub mod cli;
pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
