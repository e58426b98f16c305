use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite logit {value} at (t={t}, u={u}, k={k})")]
    NonFiniteLogit {
        t: usize,
        u: usize,
        k: usize,
        value: f64,
    },
    #[error("invalid shape: {0}")]
    Shape(String),
    #[error("node ({t}, {u}) is not normalized: logsumexp = {lse}")]
    NotNormalized { t: usize, u: usize, lse: f64 },
    #[error("token id {id} is outside the vocabulary 0..={max}")]
    UnknownToken { id: usize, max: usize },
    #[error("label sequences may not contain the blank token (position {0})")]
    BlankInLabels(usize),
    #[error("malformed alignment path: {0}")]
    MalformedPath(String),
    #[error("node ({t}, {u}) is outside a {frames}x{labels} lattice")]
    NodeOutOfRange {
        t: usize,
        u: usize,
        frames: usize,
        labels: usize,
    },
    #[error("diagonal {n} is outside 1..={max}")]
    DiagonalOutOfRange { n: usize, max: usize },
    #[error("enumeration guard exceeded: T={frames}, U={labels} would produce {count} paths")]
    EnumerationGuard {
        frames: usize,
        labels: usize,
        count: u128,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// True for failures caused by the numbers rather than by the caller.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_) | Error::NonFiniteLogit { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
