use thiserror::Error;
use unipart_geometry::GeometryError;
use unipart_tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Geometry(#[from] GeometryError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape generation failed: {0}")]
    Unsatisfiable(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("{stage}: non-finite value at step {step}")]
    NonFinite { stage: &'static str, step: usize },

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}
