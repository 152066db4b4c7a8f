use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("dimension error in {op}: {detail}")]
    Dim { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("training aborted at step {step}: non-finite loss ({detail})")]
    NanLoss { step: u64, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl CoreError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        CoreError::Dim { op, detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
