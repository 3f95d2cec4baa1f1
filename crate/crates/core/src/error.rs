use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by the data, retrieval, context and ensemble layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("invalid json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("missing prediction matrix for model `{model}` split `{split}`")]
    MissingPredictions { model: String, split: &'static str },

    #[error("unknown model id `{0}` in preds directory")]
    UnknownModel(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("row not normalized: {what} row {row} sums to {sum}")]
    RowNotNormalized { what: String, row: usize, sum: f64 },

    #[error("non-finite value in {what} at row {row}")]
    NonFinite { what: String, row: usize },

    #[error("invalid value in {what} at row {row}: `{value}`")]
    Parse { what: String, row: usize, value: String },

    #[error("invalid task: {0}")]
    InvalidTask(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("class {0} absent from the train split after stratification")]
    EmptyTrainClass(usize),

    #[error("need at least {need} rows, got {got}")]
    TooFewRows { need: usize, got: usize },

    #[error("k = {k} is invalid for {available} train rows")]
    InvalidK { k: usize, available: usize },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("train metric unavailable for model `{0}`")]
    MissingTrainMetric(String),

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Csv { .. } => "csv",
            Error::Json { .. } => "json",
            Error::MissingFile(_) => "missing_file",
            Error::MissingPredictions { .. } => "missing_prediction_matrix",
            Error::UnknownModel(_) => "unknown_model",
            Error::Shape(_) | Error::LengthMismatch { .. } => "shape_mismatch",
            Error::RowNotNormalized { .. } => "row_not_normalized",
            Error::NonFinite { .. } | Error::Parse { .. } => "invalid_value",
            Error::InvalidTask(_) => "invalid_task",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::EmptyTrainClass(_) => "empty_train_class",
            Error::TooFewRows { .. } => "too_few_rows",
            Error::InvalidK { .. } => "invalid_k",
            Error::MissingTrainMetric(_) => "missing_train_metric",
            Error::Invalid(_) => "invalid",
        }
    }
}
