use thiserror::Error;

use crate::units::UnitError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration entry failed validation. `key` is the dotted path,
    /// e.g. `source.photon_energy`.
    #[error("invalid configuration at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("{key}: {source}")]
    Unit {
        key: String,
        #[source]
        source: UnitError,
    },

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("counter dimensions differ: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    /// Malformed event or calibration file. `offset` is the byte position at
    /// which the problem was detected.
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("fit did not converge: {message}")]
    Fit {
        message: String,
        diagnostics: Box<crate::scan_analysis::FitDiagnostics>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(message: impl Into<String>) -> Self {
        Error::Domain(message.into())
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
