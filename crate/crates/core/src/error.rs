use std::path::PathBuf;

use crate::model::Factor;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {field} {reason}")]
    InvalidConfig { field: &'static str, reason: String },

    #[error("invalid scaling-law parameters: {0}")]
    InvalidParams(String),

    /// A log-transformed factor whose argument is at most 1, so its log2 term is not positive.
    #[error("domain error: log2({factor}) requires an argument > 1, got {value}")]
    Domain { factor: Factor, value: f64 },

    #[error("factor masks differ: {left} vs {right}")]
    MaskMismatch { left: String, right: String },

    #[error("degenerate design: factor {factor} cannot be identified from the observations")]
    DegenerateDesign { factor: Factor },

    #[error("need at least {needed} observations, got {got}")]
    InsufficientObservations { needed: usize, got: usize },

    #[error("observation {index} has non-positive accuracy {value}; log-linear start needs accuracy > 0")]
    NonPositiveAccuracy { index: usize, value: f64 },

    #[error("invalid observation {index}: {reason}")]
    InvalidObservation { index: usize, reason: String },

    #[error("non-finite residual or Jacobian at iteration {iteration}")]
    NonFinite { iteration: usize },

    #[error("R^2 is undefined: observed accuracies have zero variance")]
    UndefinedRSquared,

    #[error("invalid fit options: {0}")]
    InvalidOptions(String),

    #[error("row {row} (line {line}), column {column}: {message}")]
    Row {
        row: usize,
        line: u64,
        column: String,
        message: String,
    },

    #[error("malformed header: expected `{expected}`, found `{found}`")]
    Header { expected: String, found: String },

    #[error("row {row}: duplicate record for {key}")]
    Duplicate { row: usize, key: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("config {config} is missing benchmark {benchmark}")]
    MissingBenchmark { config: String, benchmark: String },

    #[error("benchmark {benchmark} is recorded as {found} but mapped to {expected}")]
    CategoryMismatch {
        benchmark: String,
        found: String,
        expected: String,
    },

    #[error("slice `{filter}` selects no observations")]
    EmptySlice { filter: String },

    #[error("invalid mask list: {0}")]
    InvalidMasks(String),

    #[error("search space: {0}")]
    InvalidSpace(String),

    #[error("config {config} lies outside the law's fitted range; enable extrapolation to evaluate it")]
    Extrapolation { config: String },

    #[error("while evaluating {config}")]
    AtConfig {
        config: String,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error in {what}: {message}")]
    Parse { what: String, message: String },

    #[error("{}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Validation and usage problems, as opposed to numerical failures during a computation.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Domain { .. }
            | Error::DegenerateDesign { .. }
            | Error::NonFinite { .. }
            | Error::UndefinedRSquared => false,
            Error::AtConfig { source, .. } => source.is_validation(),
            _ => true,
        }
    }

    pub(crate) fn at_config(self, config: impl std::fmt::Display) -> Error {
        Error::AtConfig {
            config: config.to_string(),
            source: Box::new(self),
        }
    }
}
