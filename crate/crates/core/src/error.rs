use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("duplicate map entries in column_map: index {0} appears more than once")]
    DuplicateMapEntry(usize),

    #[error("column_map entry {index} out of range for p = {p}")]
    MapOutOfRange { index: usize, p: usize },

    #[error("{path}: row {row}: {msg}")]
    Parse { path: PathBuf, row: usize, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("too few subjects: need at least {needed}, have {have}")]
    TooFewSubjects { needed: usize, have: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("unidentified direction for coordinate {coord}: |denominator| = {denom:.3e} below floor {floor:.3e}")]
    UnidentifiedDirection { coord: usize, denom: f64, floor: f64 },

    #[error("solver did not converge: {0}")]
    NoConvergence(String),

    #[error("simulation setup failed: {0}")]
    Simulation(String),

    #[error("config {pointer}: {msg}")]
    Config { pointer: String, msg: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad input data rather than numerical trouble.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::UnidentifiedDirection { .. } | Error::NoConvergence(_) | Error::Simulation(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
