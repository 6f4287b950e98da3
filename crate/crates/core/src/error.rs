use crate::diffengine::DiffError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("time {t} outside [0, 1]")]
    Domain { t: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate trajectory at t = {t}: squared speed {speed_squared:e} below threshold")]
    DegenerateTrajectory { t: f64, speed_squared: f64 },

    #[error("diagnostics failed: {0}")]
    Diagnostic(String),

    #[error("non-finite gradient for `{name}` at step {step}")]
    NonFiniteGradient { name: String, step: u64 },

    #[error("diverged at step {step}")]
    Divergence { step: usize },

    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("format_version: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error(transparent)]
    Diff(#[from] DiffError),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
