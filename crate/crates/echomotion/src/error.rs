//! Crate-wide error type and exit-code mapping.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("data error in clip `{clip}`: {msg}")]
    Clip { clip: String, msg: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numerical abort: non-finite value in `{term}`{}", detail.as_deref().map(|d| format!(" ({d})")).unwrap_or_default())]
    NonFinite {
        term: String,
        detail: Option<String>,
    },

    #[error("near-singular jacobian for keypoint {keypoint} (|det| = {det:.3e})")]
    SingularJacobian { keypoint: usize, det: f64 },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("feature extractor `{0}` unavailable: no pretrained weights are bundled; use the fixed-seed fallback extractor (profile `desk` or `perceptual_extractor = \"fallback\"`)")]
    ExtractorUnavailable(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn non_finite(term: impl Into<String>) -> Self {
        Error::NonFinite {
            term: term.into(),
            detail: None,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 numerical abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Clip { .. } | Error::Io { .. } => 3,
            Error::NonFinite { .. } | Error::SingularJacobian { .. } => 4,
            _ => 1,
        }
    }
}
