use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Problems with input data files or label contents.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("{path}: missing value at row {row}, column '{column}'")]
    MissingCell { path: String, row: usize, column: String },
    #[error("{path}: non-numeric value '{value}' at row {row}, column '{column}'")]
    NonNumeric { path: String, row: usize, column: String, value: String },
    #[error("{path}: unknown class '{value}' for task '{task}' at row {row}")]
    UnknownClass { path: String, row: usize, task: String, value: String },
    #[error("{path}: duplicate sample index {index} at row {row}")]
    DuplicateIndex { path: String, row: usize, index: String },
    #[error("row count mismatch: {features} feature rows vs {labels} label rows")]
    RowCountMismatch { features: usize, labels: usize },
    #[error("sample index {index} present in labels but not in features")]
    UnmatchedIndex { index: String },
    #[error("{path}: {message}")]
    Malformed { path: String, message: String },
    #[error("task '{task}': class {class} has no samples")]
    EmptyClass { task: String, class: usize },
    #[error("task '{task}' has a single class in the training split")]
    SingleClass { task: String },
    #[error("task '{task}': class {class} is too rare to stratify ({count} samples)")]
    TooRareToStratify { task: String, class: usize, count: usize },
    #[error("label {label} out of range for task '{task}' with {classes} classes")]
    LabelOutOfRange { task: String, label: usize, classes: usize },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("data error: {0}")]
    Data(#[from] DataError),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) => 2,
            Error::Data(_) => 3,
            Error::Numeric(_) => 4,
            Error::Io { .. } => 5,
        }
    }
}
