//! Staged rectified flow at desk scale.
//!
//! The generation path is split into resolution stages: each stage owns a
//! window of the noise schedule and runs a growing prefix of a shared
//! transformer stack. Adjacent stages are joined by upsampling plus a
//! pretrained per-channel affine bridge. This crate holds the whole
//! pipeline: tensor math with autodiff, the flow/window schedule, resampling
//! operators, bridge fitting, the progressive velocity model, multi-window
//! training, staged Euler sampling, evaluation metrics, the analytic FLOPs
//! model, and the on-disk formats.

pub mod bridge;
pub mod datagen;
pub mod error;
pub mod evalbench;
pub mod flowcore;
pub mod numerics;
pub mod progmodel;
pub mod pyramid;
pub mod training;
pub mod rng;
pub mod sampling;

pub use error::{Error, ErrorCategory, Result};
