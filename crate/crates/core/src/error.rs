use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("invalid selector: {0}")]
    Selector(String),

    #[error("degenerate calibration for {what}: scores have no spread")]
    DegenerateCalibration { what: String },

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("detector bank mode mismatch: {0}")]
    Mode(String),

    #[error("perturbation magnitude {magnitude} outside [{min}, {max}] for {kind}")]
    Magnitude {
        kind: &'static str,
        magnitude: f64,
        min: f64,
        max: f64,
    },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("malformed {format} data at byte offset {offset}: {reason}")]
    Format {
        format: &'static str,
        offset: u64,
        reason: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("artifact error: {0}")]
    Artifact(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn dataset(msg: impl Into<String>) -> Self {
        Error::Dataset(msg.into())
    }
}
