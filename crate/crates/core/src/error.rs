use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("division guard: alpha_bar {0} too close to 1")]
    DivisionGuard(f64),

    #[error("alpha_bar {0} is on the boundary of (0, 1)")]
    Boundary(f64),

    #[error("degenerate scale {sigma} below minimum {min}")]
    DegenerateScale { sigma: f64, min: f64 },

    #[error("unknown perceptual metric `{0}`")]
    UnknownMetric(String),

    #[error("perceptual metric `{0}` needs pretrained weights that are not installed")]
    MetricUnavailable(String),

    #[error("range coder: {0}")]
    Coder(#[from] crate::range_coder::CoderError),

    #[error("bitstream: {0}")]
    Format(String),

    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("model mismatch: bitstream was produced by {expected}, loaded model is {found}")]
    ModelMismatch { expected: String, found: String },

    #[error("image too large: {0}x{1} (limit 65535)")]
    DimensionOverflow(usize, usize),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
