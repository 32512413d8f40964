use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("stability rule violated: {message} (admissible dt <= {admissible_dt:.6e})")]
    Stability { message: String, admissible_dt: f64 },
    #[error("under-resolved: {0}")]
    UnderResolved(String),
    #[error("construction failed: {0}")]
    ConstructionFailed(String),
    #[error("budget exceeded: {0}")]
    Budget(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("iteration diverged: {0}")]
    Divergence(String),
    #[error("invariant breach at step {step} (t = {t:.6e}): {message}")]
    InvariantBreach { step: usize, t: f64, message: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
