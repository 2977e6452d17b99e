//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum UlabError {
    /// Tensor or parameter-block shapes do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An operation produced NaN or Inf.
    #[error("non-finite values produced by `{op}`")]
    NonFinite { op: String },

    /// A precondition documented on the public API was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Token id outside the vocabulary.
    #[error("token id {id} out of range for vocab {vocab}")]
    TokenRange { id: u32, vocab: usize },

    /// A sequence tagged `train` reached a path that only accepts unseen data
    /// (or vice versa).
    #[error("provenance violation: {0}")]
    Provenance(String),

    /// Malformed checkpoint or report file.
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    /// Training loss became non-finite.
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    /// Bad experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl UlabError {
    pub fn shape(msg: impl Into<String>) -> Self {
        UlabError::Shape(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        UlabError::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        UlabError::Config(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        UlabError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, UlabError>;
