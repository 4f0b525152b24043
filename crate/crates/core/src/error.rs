use std::path::{Path, PathBuf};

use crate::descriptor::DescriptorError;
use crate::event::EventError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by the ingest / store / task pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error(transparent)]
    Event(#[from] EventError),
    #[error("{}: csv error: {message}", path.display())]
    Csv { path: PathBuf, message: String },
    #[error("{}: column `{column}` not found", path.display())]
    MissingColumn { path: PathBuf, column: String },
    #[error("table `{table}`: join key column `{column}` absent from {}", path.display())]
    JoinKey {
        table: String,
        column: String,
        path: PathBuf,
    },
    #[error("{}: row {row}: `{value}` does not match timestamp format `{format}`", path.display())]
    TimestampParse {
        path: PathBuf,
        row: u64,
        value: String,
        format: String,
    },
    #[error("a single row needs {needed} bytes, more than the {budget}-byte memory budget")]
    Budget { needed: usize, budget: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{}: malformed file: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("task failed on patient `{patient_id}`: {message}")]
    Task { patient_id: String, message: String },
    #[error("sample for patient `{patient_id}`: {message}")]
    Schema { patient_id: String, message: String },
    #[error("label error in field `{field}`: {message}")]
    Label { field: String, message: String },
    #[error("conservation violated: {read} events read but {written} written")]
    Conservation { read: u64, written: u64 },
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn format(path: impl AsRef<Path>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().to_path_buf(),
            message: message.into(),
        }
    }

    /// Short stable name of the variant, used in CLI diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "IoError",
            Error::Descriptor(DescriptorError::Syntax { .. }) => "SyntaxError",
            Error::Descriptor(DescriptorError::Validation { .. }) => "ValidationError",
            Error::Event(_) => "EventError",
            Error::Csv { .. } | Error::MissingColumn { .. } => "IoError",
            Error::JoinKey { .. } => "JoinKeyError",
            Error::TimestampParse { .. } => "TimestampParseError",
            Error::Budget { .. } => "BudgetError",
            Error::Config(_) => "ConfigError",
            Error::Format { .. } => "FormatError",
            Error::Manifest(_) => "ManifestError",
            Error::Task { .. } => "TaskError",
            Error::Schema { .. } => "SchemaError",
            Error::Label { .. } => "LabelError",
            Error::Conservation { .. } => "ConservationError",
        }
    }
}
