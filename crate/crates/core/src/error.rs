use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the qbench library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid slice: {0}")]
    InvalidSlice(String),

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("invalid search configuration: {0}")]
    InvalidConfig(String),

    #[error("no background found at t = {t}: every slice is empty after thresholding")]
    NoBackground { t: f64 },

    #[error("mask selects no pixels")]
    EmptyMask,

    #[error("mask dimensions {mask:?} do not match volume dimensions {volume:?}")]
    MaskMismatch {
        mask: (usize, usize, usize),
        volume: (usize, usize, usize),
    },

    #[error("invalid phantom: {0}")]
    InvalidPhantom(String),

    #[error("invalid resampling factor {0} (must be finite and >= 1)")]
    InvalidFactor(f64),

    #[error("resampling by {factor} leaves an empty axis (input {dims:?})")]
    EmptyAxis {
        factor: f64,
        dims: (usize, usize, usize),
    },

    #[error("invalid gradient input: {0}")]
    InvalidGradient(String),

    #[error("resolution curve needs at least 2 usable points, got {0}")]
    TooFewPoints(usize),

    #[error("malformed container header: {0}")]
    MalformedHeader(String),

    #[error("payload length mismatch: expected {expected} bytes, found {found}")]
    PayloadLength { expected: usize, found: usize },

    #[error("invalid pixel value {value} at index {index} (must be finite and >= 0)")]
    InvalidPixel { index: usize, value: f64 },

    #[error("value {value} at index {index} cannot be stored exactly as u16")]
    NotRepresentable { index: usize, value: f64 },

    #[error("malformed PGM {path}: {reason}")]
    MalformedPgm { path: PathBuf, reason: String },

    #[error("PGM slice {path} is {found:?}, expected {expected:?}")]
    PgmDimensionMismatch {
        path: PathBuf,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("no PGM slices found in {0}")]
    EmptyStack(PathBuf),

    #[error("invalid phantom spec file: {0}")]
    SpecParse(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
