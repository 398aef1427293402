use std::io;

use thiserror::Error;

use crate::trainer::TrainHistory;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {norm:e} is below the normalization epsilon")]
    NearZeroNorm { norm: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value in {0}")]
    NonFiniteValue(String),
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("invalid bundle: {0}")]
    InvalidBundle(String),
    #[error("invalid metadata: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error("synthetic spec infeasible: {0}")]
    SpecInfeasible(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("anchor set is empty")]
    EmptyAnchorSet,
    #[error("episode has no query samples")]
    EmptyQuerySet,
    #[error("class {0} has no support samples")]
    MissingClassSupport(usize),
    #[error("training diverged at epoch {}", .0.epoch)]
    DivergenceDetected(Box<Divergence>),
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
}

/// History collected up to the epoch whose loss became non-finite.
#[derive(Debug)]
pub struct Divergence {
    pub epoch: usize,
    pub history: TrainHistory,
}

impl Error {
    /// True for errors caused by malformed input files.
    pub fn is_format_error(&self) -> bool {
        matches!(
            self,
            Error::BadMagic { .. }
                | Error::UnsupportedVersion(_)
                | Error::InvalidBundle(_)
                | Error::Metadata(_)
                | Error::DimensionMismatch(_)
                | Error::NonFiniteValue(_)
                | Error::NearZeroNorm { .. }
        )
    }
}
