use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the kernels, the oracles and the harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index {index} out of range 0..={bound}")]
    Index { index: usize, bound: usize },

    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    /// An exp argument is large enough to overflow `f64`.
    #[error("score overflow: max |C1 W C2^T| entry is {max_score:e} (limit {limit})")]
    Range { max_score: f64, limit: f64 },

    #[error("norm bound violated: {what} = {measured:e} exceeds gamma = {gamma:e}")]
    NormBound {
        what: &'static str,
        measured: f64,
        gamma: f64,
    },

    /// The polynomial degree needed for the requested accuracy has more
    /// monomials than the sequence length.
    #[error("rank infeasible: degree {degree} needs k1 = {rank} features but L = {seq_len}")]
    Infeasible {
        degree: usize,
        rank: u128,
        seq_len: usize,
    },

    /// The truncated exponential produced a non-positive row normalizer.
    #[error("approximation breakdown: row {row} normalizer is {value:e}")]
    Breakdown { row: usize, value: f64 },

    #[error("size guard: {what} = {size} exceeds limit {limit}")]
    Guard {
        what: &'static str,
        size: usize,
        limit: usize,
    },

    #[error("loss is not finite at probe {index} ({value})")]
    Probe { index: usize, value: f64 },

    #[error("embedding check failed: {0}")]
    Embed(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error in {path:?}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
