//! Crate error type.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CanopyError {
    #[error("empty point cloud")]
    EmptyCloud,

    #[error("invalid point cloud file {path}: {reason}")]
    InvalidCloud { path: PathBuf, reason: String },

    #[error("unreadable cloud file {path}: {source}")]
    CloudIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("no first returns")]
    NoFirstReturns,

    #[error("feature extraction failed for plot {plot_id}: {source}")]
    FeatureExtraction {
        plot_id: String,
        #[source]
        source: Box<CanopyError>,
    },

    #[error("no eligible plots for validation/test assignment")]
    NoEligiblePlots,

    #[error("rank deficient")]
    RankDeficient,

    #[error("diverged")]
    Diverged,

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("no OOB rows")]
    NoOobRows,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty batch element {0}")]
    EmptyBatchElement(usize),

    #[error("empty sparse tensor")]
    EmptyTensor,

    #[error("backward already ran on this tape")]
    BackwardTwice,

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    TrainingDiverged { epoch: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid container: {0}")]
    InvalidContainer(String),

    #[error("manifest error in {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CanopyError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CanopyError::Io {
            path: path.into(),
            source,
        }
    }
}
