use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("device {device} has {found} samples, expected {expected}")]
    LengthMismatch {
        device: usize,
        expected: usize,
        found: usize,
    },

    #[error("invalid channel {device}: {reason}")]
    InvalidChannel { device: usize, reason: String },

    #[error("source rate {0} Hz is not a positive integer multiple of 1 Hz")]
    NonIntegerRate(f64),

    #[error("signal has gaps longer than one bin: {}", format_gaps(.0))]
    Gaps(Vec<(f64, f64)>),

    #[error("signal of {len} samples is shorter than one window of {omega}")]
    TooShort { len: usize, omega: usize },

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: u64,
        reason: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("linear system is singular after regularization")]
    Singular,

    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),

    #[error("non-finite value after {block} step in outer iteration {iter}")]
    NonFinite { block: &'static str, iter: usize },

    #[error("model file: {0}")]
    Model(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

fn format_gaps(gaps: &[(f64, f64)]) -> String {
    gaps.iter()
        .map(|(a, b)| format!("[{a}, {b}]"))
        .collect::<Vec<_>>()
        .join(", ")
}
