//! Experiment pipeline: dataset generation and ingestion, training
//! orchestration with best-validation selection, robustness evaluation,
//! correlation statistics, the embedded reference-results check, and
//! report persistence.

mod data;
mod experiment;
mod fixture;
mod idx;
mod reports;
mod robustness;
mod stats;
mod train;

pub use data::{
    generate_synthetic, DataSource, Dataset, DatasetSpec, FactorAnnotation, SyntheticFactors,
};
pub use experiment::{
    build_dataset, load_config, run_experiment, AttacksSection, CellFailure, CellResult,
    DatasetSection, ExperimentConfig, ExperimentOutcome, MetricsSection, ModelsSection,
    OutputSection,
};
pub use fixture::{
    check_reference_tables, RefCorrelation, TableCheck, TableCheckRow, MEASUREMENT_NAMES,
    REF_CLEAN, REF_CORRELATIONS, REF_DATASETS, REF_DELTA_REL, REF_MEAN_ADV, REF_MEASUREMENTS,
    REF_MODELS, TARGET_NAMES,
};
pub use idx::{
    load_mnist_idx, mnist_dataset, read_idx_images, read_idx_labels, write_idx_images,
    write_idx_labels, IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC,
};
pub use reports::{
    correlations_csv, format_p, measurements_csv, robustness_csv, summary_tables,
    tracking_csv, write_atomic, write_reports, TrackingRow,
};
pub use robustness::{evaluate_robustness, AttackAccuracy, RobustnessRecord};
pub use stats::{betainc, ln_gamma, pearson, t_two_sided_p, Correlation};
pub use train::{train_model, EpochRecord, TrackingConfig, TrainOutcome};

use crate::attacks::AttackError;
use crate::autograd::AutogradError;
use crate::metrics::MetricsError;
use crate::modelzoo::ModelError;

pub type HarnessResult<T> = Result<T, HarnessError>;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{what} must be {bound}, got {value}")]
    BadParam { what: &'static str, bound: &'static str, value: f64 },
    #[error("train:val ratio must be 4:1, got {train}:{val}")]
    RatioViolation { train: usize, val: usize },
    #[error("bad IDX magic: found {found:#010x}, expected {expected:#010x}")]
    IdxMagic { found: u32, expected: u32 },
    #[error("IDX file truncated at byte {offset}")]
    IdxTruncated { offset: usize },
    #[error("IDX image/label count mismatch: {images} images, {labels} labels")]
    IdxCount { images: usize, labels: usize },
    #[error("correlation needs at least 3 points, got {n}")]
    TooFewPoints { n: usize },
    #[error("input lengths differ: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("{which} input has zero variance")]
    ZeroVariance { which: &'static str },
    #[error("non-finite value in correlation input")]
    NonFinite,
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("robustness evaluation needs at least one attack configuration")]
    NoAttacks,
    #[error("clean accuracy is zero; relative drop is undefined")]
    DegenerateAccuracy,
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}
