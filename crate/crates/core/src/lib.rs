//! Lossy image codec with a learned hyperprior entropy model and a
//! conditional diffusion decoder.
//!
//! An encoder maps an image to a quantized content latent `ẑ`, which is
//! range-coded under a Gaussian whose parameters come from a second,
//! factorized hyper-latent `ŷ`. Decoding runs a few DDIM steps of a U-Net
//! conditioned on `ẑ`.

pub mod checkpoint;
pub mod codec;
pub mod container;
pub mod dataset;
pub mod entropy;
mod error;
pub mod fast_coder;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod range_coder;
pub mod schedule;
pub mod trainer;
pub mod transforms;

pub use error::{Error, Result};
pub use schedule::{DiffusionSchedule, ScheduleKind, ScheduleParams, TimestepPlan};
pub use transforms::{ArchConfig, Model, Parameterization};

pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
