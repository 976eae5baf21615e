use thiserror::Error;

use crate::mixture::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid mixture model: {}", format_violations(.0))]
    InvalidModel(Vec<Violation>),

    #[error("degenerate merge: combined weight is zero")]
    DegenerateMerge,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("rejected input: {0}")]
    RejectedInput(String),

    #[error("unknown label `{0}`")]
    UnknownLabel(String),

    #[error("invalid stream spec: {0}")]
    Spec(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::InsufficientData(_) => "insufficient_data",
            Error::InvalidModel(_) => "invalid_model",
            Error::DegenerateMerge => "degenerate_merge",
            Error::InvalidConfig(_) => "invalid_config",
            Error::RejectedInput(_) => "rejected_input",
            Error::UnknownLabel(_) => "unknown_label",
            Error::Spec(_) => "spec",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
