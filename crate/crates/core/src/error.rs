//! Crate-wide error type.
//!
//! Every fallible operation in this crate returns [`Error`]. Variants are
//! grouped by what went wrong rather than where, so callers (notably the CLI)
//! can map them onto process exit codes via [`Error::category`].

use std::path::PathBuf;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Bad invocation or configuration: unknown flags, invalid config values.
    Usage,
    /// The data violated a contract: schema, ranges, topology, shapes of
    /// user-supplied artifacts.
    Data,
    /// A numeric invariant failed: NaN/Inf mid-computation, divergence.
    Numeric,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Configuration value out of range or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// Input table is missing a required column.
    #[error("{path}: missing required column {column:?} (header: {header:?})")]
    MissingColumn {
        path: PathBuf,
        column: String,
        header: Vec<String>,
    },

    /// A cell failed to parse; identifies row, column and offending text.
    #[error("{path}:{row}: column {column:?}: cannot parse {value:?} as {expected}")]
    BadCell {
        path: PathBuf,
        /// 1-based data row number (header excluded).
        row: usize,
        column: String,
        value: String,
        expected: &'static str,
    },

    /// Same (well, date) key seen twice in one input table.
    #[error("duplicate record for well {well:?} on {date}")]
    DuplicateRecord { well: String, date: chrono::NaiveDate },

    /// Generic data-contract violation (ranges, empty inputs, coverage).
    #[error("invalid data: {0}")]
    Validation(String),

    /// Well/facility/field relationships are inconsistent.
    #[error("topology error: {0}")]
    Topology(String),

    /// Tensor shape mismatch; reports the operation and both shapes.
    #[error("shape mismatch in {op}: left {lhs:?}, right {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A computation produced a non-finite value.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Training diverged (loss became non-finite and could not recover).
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    /// Checkpoint file is malformed or from an unsupported version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// An artifact on disk does not match what the manifest recorded.
    #[error("artifact error: {0}")]
    Artifact(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Serde { path: PathBuf, message: String },
}

impl Error {
    /// Attach a path to a raw I/O error.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Serialization/deserialization failure for the file at `path`.
    pub fn serde(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Serde { path: path.into(), message: message.to_string() }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) => ErrorCategory::Usage,
            Error::MissingColumn { .. }
            | Error::BadCell { .. }
            | Error::DuplicateRecord { .. }
            | Error::Validation(_)
            | Error::Topology(_)
            | Error::Checkpoint(_)
            | Error::Artifact(_)
            | Error::Io { .. }
            | Error::Serde { .. } => ErrorCategory::Data,
            Error::Shape { .. } | Error::NonFinite { .. } | Error::Diverged { .. } => {
                ErrorCategory::Numeric
            }
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
