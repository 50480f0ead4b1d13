use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Domain(String),

    #[error("{0}")]
    Config(String),

    #[error("target solid volume {target:.6} m³ exceeds 1.5 × ROI capacity ({capacity:.6} m³)")]
    Overflow { target: f64, capacity: f64 },

    #[error("{0}")]
    InsufficientData(String),

    #[error("{0}")]
    Stream(String),

    #[error("{0}")]
    Fit(String),

    #[error("load {id} excluded: {reason}")]
    ExcludedLoad { id: String, reason: String },

    #[error("{0}")]
    Manifest(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
}

impl Error {
    /// Stable, machine-parsable category name.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Config(_) => "config",
            Error::Overflow { .. } => "overflow",
            Error::InsufficientData(_) => "insufficient-data",
            Error::Stream(_) => "stream",
            Error::Fit(_) => "fit",
            Error::ExcludedLoad { .. } => "excluded-load",
            Error::Manifest(_) => "manifest",
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
        }
    }

    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } => 2,
            Error::Io { .. } => 3,
            Error::Manifest(_) => 4,
            Error::InsufficientData(_) | Error::ExcludedLoad { .. } | Error::Fit(_) => 5,
            Error::Domain(_) | Error::Overflow { .. } | Error::Stream(_) => 6,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
