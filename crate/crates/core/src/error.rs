use thiserror::Error;

use crate::imagegrid::GridError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Neural(#[from] calc_neural::NeuralError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("empty stratum: no {0} samples available")]
    EmptyStratum(&'static str),
    #[error("subject {0} appears in more than one split")]
    SubjectLeak(String),
    #[error("unmatched scan id {0}")]
    UnmatchedScan(String),
    #[error("placement failed: {0}")]
    Placement(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
