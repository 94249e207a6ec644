use crate::autodiff::TensorError;
use crate::distributions::DistError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error("unknown domain `{0}`")]
    UnknownDomain(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: u64 },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("config: {0}")]
    Config(String),
    #[error("image: {0}")]
    Image(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Self::Io { path: path.as_ref().display().to_string(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
