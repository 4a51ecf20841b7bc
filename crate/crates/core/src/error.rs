// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// A single field-level configuration failure, addressed by a dotted path
/// such as `hai.alpha_txt`.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct FieldError {
    pub path: String,
    pub message: String,
}

impl FieldError {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl std::fmt::Display for FieldError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid segmentation: {0}")]
    Segmentation(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("hook at layer {layer}, head {head} broke the attention contract on query {query}: {reason}")]
    HookContract {
        layer: usize,
        head: usize,
        query: usize,
        reason: String,
    },

    #[error("maximum sequence length {max} exceeded")]
    MaxLength { max: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate attention row at query {query}: every column was suppressed")]
    DegenerateRow { query: usize },

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("fixture construction infeasible: {0}")]
    Infeasible(String),

    #[error("invalid configuration: {}", join_fields(.0))]
    Config(Vec<FieldError>),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("file format: {0}")]
    Format(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn join_fields(fields: &[FieldError]) -> String {
    fields
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable name of the variant, used in CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Shape(_) => "shape",
            Error::Segmentation(_) => "segmentation",
            Error::Contract(_) => "contract",
            Error::HookContract { .. } => "hook_contract",
            Error::MaxLength { .. } => "max_length",
            Error::NonFinite(_) => "non_finite",
            Error::DegenerateRow { .. } => "degenerate_row",
            Error::MissingData(_) => "missing_data",
            Error::OutOfRange(_) => "out_of_range",
            Error::Infeasible(_) => "infeasible",
            Error::Config(_) => "config",
            Error::Parse { .. } => "parse",
            Error::Format(_) => "format",
            Error::Usage(_) => "usage",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
