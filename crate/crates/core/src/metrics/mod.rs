//! Disentanglement measurements.
//!
//! Two ingredients: distance correlation between signal batches, and the
//! information-over-bias ratio from a pair of small reconstruction decoders.
//! [`measure_all`] combines them into the five per-model measurements
//! reported by the harness:
//!
//! * m1 = 1 - DC(content, style)
//! * m2 = DC(input, content)
//! * m3 = DC(input, style)
//! * m4 = 1 - BoI(input, content)
//! * m5 = 1 - BoI(input, style)
//!
//! all clamped to [0,1].

mod distance;
mod iob;
mod measure;

pub use distance::{
    distance_correlation, distance_covariance, double_center, pairwise_distances, DistanceMatrix,
    SignalBatch, SignalKind,
};
pub use iob::{iob, train_iob_decoders, DecoderNet, IobConfig, IobOutcome, IobPair, TrainLogEntry};
pub use measure::{measure_all, MeasureConfig, MeasurementRecord, TapSource};

use crate::autograd::AutogradError;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("signal batch needs at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("sample {index} has {got} values, expected {expected}")]
    DimMismatch { index: usize, expected: usize, got: usize },
    #[error("batches have different sample counts: {a} vs {b}")]
    SizeMismatch { a: usize, b: usize },
    #[error("distance covariance requires double-centered matrices")]
    NotCentered,
    #[error("distance matrix is already centered")]
    AlreadyCentered,
    #[error("sample {index} reconstructs with zero error; ratio undefined")]
    ZeroReconstruction { index: usize },
    #[error("information over bias degenerated to zero")]
    DegenerateRatio,
    #[error("images and labels differ in length: {xs} vs {ys}")]
    LabelMismatch { xs: usize, ys: usize },
    #[error("signal extraction failed: {0}")]
    Extraction(String),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

pub type MetricsResult<T> = Result<T, MetricsError>;
