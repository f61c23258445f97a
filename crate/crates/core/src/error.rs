use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: file contains no data rows")]
    EmptyFile { path: PathBuf },

    #[error("{path}: label column `{column}` not found in header")]
    UnknownLabelColumn { path: PathBuf, column: String },

    #[error("{path}: row {row}, column `{column}`: {message}")]
    Cell {
        path: PathBuf,
        row: usize,
        column: String,
        message: String,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid split: {0}")]
    Split(String),

    #[error("invalid training input: {0}")]
    Training(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("m = {m} exceeds the {available} available candidates")]
    TooFewCandidates { m: usize, available: usize },

    #[error("enumeration of {count} outcomes exceeds the cap of {cap}; use the gumbel sampler")]
    EnumerationCap { count: u128, cap: u128 },

    #[error("{0}")]
    Invalid(String),

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("unbalanced evaluation sets: {members} members vs {nonmembers} non-members")]
    Unbalanced { members: usize, nonmembers: usize },

    #[error("class label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
}
