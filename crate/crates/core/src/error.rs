use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A runtime invariant that must never break did break (e.g. a frozen
    /// classifier changed). Surfaces as exit code 2 from the CLI.
    #[error("invariant breach in {stage}: {detail}")]
    InvariantBreach { stage: String, detail: String },

    #[error("non-finite loss after {samples_seen} samples (lr = {lr})")]
    NonFiniteLoss { samples_seen: u64, lr: f64 },

    #[error("input values outside [0, 1]: min {min}, max {max}")]
    Range { min: f64, max: f64 },

    #[error("checkpoint checksum mismatch: header {expected}, payload {actual}")]
    Checksum { expected: String, actual: String },

    #[error("invalid manifest:\n  - {}", .0.join("\n  - "))]
    Manifest(Vec<String>),

    #[error("missing upstream artifact for {stage}: {path}")]
    MissingArtifact { stage: String, path: PathBuf },

    #[error("unknown architecture `{0}`")]
    UnknownSpec(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn breach(stage: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::InvariantBreach {
            stage: stage.into(),
            detail: detail.into(),
        }
    }

    pub fn is_invariant_breach(&self) -> bool {
        matches!(self, Error::InvariantBreach { .. } | Error::Checksum { .. })
    }
}
