use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside the domain where the operation is defined.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Ill-conditioned or non-finite numerics.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("simulation diverged at substep {substep}: {detail}")]
    Divergence { substep: usize, detail: String },

    #[error("model error: {0}")]
    Model(String),

    #[error("runaway simulation: more than {limit} firings")]
    Runaway { limit: u64 },

    #[error("unknown system `{name}`; valid names: {valid}")]
    Lookup { name: String, valid: String },

    #[error("training error at record {index}: {detail}")]
    Training { index: usize, detail: String },

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn format(offset: u64, detail: impl Into<String>) -> Self {
        Error::Format {
            offset,
            detail: detail.into(),
        }
    }
}
