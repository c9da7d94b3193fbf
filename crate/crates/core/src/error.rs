use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MifError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MifError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error in {path} at record {record}: {message}")]
    Format {
        path: PathBuf,
        record: usize,
        message: String,
    },
    #[error("pose record {record} is not rigid (rotation deviation {deviation:.3e})")]
    NonRigid { record: usize, deviation: f64 },
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("invalid range filter bounds: min {min} must be >= 0 and < max {max}")]
    InvalidRange { min: f64, max: f64 },
    #[error("invalid voxel size {0}: must be > 0")]
    InvalidVoxel(f64),
    #[error("scan/pose count mismatch: {scans} scans, {poses} poses")]
    CountMismatch { scans: usize, poses: usize },
    #[error("scan {scan} is empty after filtering")]
    EmptyAfterFilter { scan: usize },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("empty scan set")]
    EmptyScanSet,
    #[error("grid index ({i}, {j}, {k}) exceeds the 21-bit Morton range")]
    IndexOverflow { i: u64, j: u64, k: u64 },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("every ray has fewer than two samples")]
    RayTooShort,
    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: u64, detail: String },
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("grid of {cells} cells exceeds the budget of {budget}")]
    GridTooLarge { cells: u64, budget: u64 },
    #[error("mesh has no triangles")]
    EmptyMesh,
    #[error("mesh has zero total area")]
    ZeroArea,
    #[error("nearest-neighbour target set is empty")]
    EmptyTarget,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl MifError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MifError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, record: usize, message: impl Into<String>) -> Self {
        MifError::Format {
            path: path.into(),
            record,
            message: message.into(),
        }
    }

    /// Short machine-readable tag, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            MifError::Io { .. } => "io-error",
            MifError::Format { .. } => "format-error",
            MifError::NonRigid { .. } => "non-rigid-error",
            MifError::InvalidPose(_) => "invalid-pose",
            MifError::InvalidRange { .. } => "invalid-range",
            MifError::InvalidVoxel(_) => "invalid-voxel",
            MifError::CountMismatch { .. } => "count-mismatch",
            MifError::EmptyAfterFilter { .. } => "empty-after-filter",
            MifError::EmptyInput(_) => "empty-input",
            MifError::EmptyScanSet => "empty-scanset",
            MifError::IndexOverflow { .. } => "index-overflow",
            MifError::LengthMismatch { .. } => "length-mismatch",
            MifError::RayTooShort => "ray-too-short",
            MifError::NonFiniteLoss { .. } => "non-finite-loss",
            MifError::NonFiniteGradient(_) => "non-finite-gradient",
            MifError::GridTooLarge { .. } => "grid-too-large",
            MifError::EmptyMesh => "empty-mesh",
            MifError::ZeroArea => "zero-area",
            MifError::EmptyTarget => "empty-target",
            MifError::Config(_) => "config-error",
            MifError::Checkpoint(_) => "checkpoint-error",
            MifError::Json(_) => "json-error",
        }
    }
}
