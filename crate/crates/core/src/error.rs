use std::path::PathBuf;

use tcvae_numerics::NumericsError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: missing value in column `{column}`")]
    MissingValue { line: usize, column: String },
    #[error("line {line}: non-numeric value `{value}` in column `{column}`")]
    NonNumeric {
        line: usize,
        column: String,
        value: String,
    },
    #[error("line {line}: invalid timestamp `{value}`")]
    BadTimestamp { line: usize, value: String },
    #[error("line {line}: timestamps are not strictly increasing")]
    NonMonotone { line: usize },
    #[error("line {line}: irregular sampling interval ({found}s, expected {expected}s)")]
    IrregularInterval {
        line: usize,
        found: i64,
        expected: i64,
    },
    #[error("malformed csv: {0}")]
    Csv(String),
    #[error("series has {rows} rows; at least {needed} required")]
    TooShort { rows: usize, needed: usize },
    #[error("invalid calendar instant: {0}")]
    InvalidInstant(String),
    #[error("normalisation denominator is zero for variable {0} (all-zero series)")]
    ZeroScale(usize),
    #[error("regression matrix is singular")]
    Singular,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0} out of range: {1}")]
    OutOfRange(&'static str, String),
    #[error("non-finite value at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint format version {found} is not supported (this build reads version {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint checksum mismatch")]
    Checksum,
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CoreError {
    let path = path.into();
    move |source| CoreError::Io { path, source }
}
