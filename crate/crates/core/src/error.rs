use std::path::PathBuf;

/// Errors raised anywhere in the quality-assessment pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("manifest {path}, row {row}: {message}")]
    ManifestRow {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("score at index {index} ({value}) lies outside the declared scale [{min}, {max}]")]
    ScoreOutOfScale {
        index: usize,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("image error: {0}")]
    Image(String),

    #[error("invalid template: {0}")]
    Template(String),

    #[error("text encoder failed on sentence {index}: {message}")]
    Encoder { index: usize, message: String },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("timestep {t} outside the schedule range [1, {max}]")]
    Timestep { t: usize, max: usize },

    #[error("non-finite activations at {stage}")]
    NonFinite { stage: String },

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("protocol violation: {0}")]
    Protocol(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Bad input or configuration, as opposed to a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Invalid(_)
                | Error::Manifest { .. }
                | Error::ManifestRow { .. }
                | Error::ScoreOutOfScale { .. }
                | Error::Template(_)
                | Error::Timestep { .. }
                | Error::Protocol(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(
        context: impl Into<String>,
        expected: impl std::fmt::Debug,
        actual: impl std::fmt::Debug,
    ) -> Self {
        Error::Shape {
            context: context.into(),
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }
}
