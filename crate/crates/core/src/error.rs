use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("non-finite particle on device {device} at iteration {iteration}")]
    NonFinite { device: usize, iteration: usize },

    #[error(
        "power constraint violated by device {device} in round {round}: \
         |x|^2 = {energy:e} > P = {budget:e}"
    )]
    PowerViolation {
        device: usize,
        round: usize,
        energy: f64,
        budget: f64,
    },

    #[error("channel gain of device {device} in round {round} is too close to zero ({gain:e})")]
    DeepFade { device: usize, round: usize, gain: f64 },

    #[error("convergence bound is vacuous: gamma = {gamma} (need 0 <= gamma < 1)")]
    BoundVacuous { gamma: f64 },

    #[error("run with seed {seed:#018x} ({context}) failed: {source}")]
    RunFailed {
        seed: u64,
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("CSV error on {}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 for configuration problems, 2 for runtime and
    /// protocol-invariant failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::InvalidArgument(_) => 1,
            Error::RunFailed { source, .. } => match source.as_ref() {
                Error::Config { .. } => 1,
                _ => 2,
            },
            _ => 2,
        }
    }
}
