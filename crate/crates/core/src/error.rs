use thiserror::Error;

/// Errors produced by the layout model, its data adapters and its file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate schedule: alphas_cumprod[{step}] = 1 at a nonzero step")]
    DegenerateSchedule { step: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("checkpoint checksum mismatch (file is corrupted or truncated)")]
    Checksum,

    #[error("checkpoint format version {found} is incompatible with this build (expects {expected})")]
    Version { found: u32, expected: u32 },

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("malformed container: {0}")]
    Malformed(String),

    #[error("record {id}: {msg}")]
    Record { id: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
