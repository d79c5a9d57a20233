use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer extents disagree.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid hyper-parameter, rate, group layout or preset.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed or out-of-range data (labels, empty datasets, bad files).
    #[error("data error: {0}")]
    Data(String),

    /// API called outside its contract (non-scalar loss, cache miss, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// A scheduled subnet produced a non-finite loss.
    #[error("training error at slice rate {rate}: {message}")]
    Training { rate: f64, message: String },

    /// Even the base network exceeds the requested compute budget.
    #[error("budget infeasible: ratio {ratio:.6} is below base-network cost {base_ratio:.6}")]
    BudgetInfeasible { ratio: f64, base_ratio: f64 },

    #[error("io error on {path}: {source}")]
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

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_)
            | Error::Config(_)
            | Error::Usage(_)
            | Error::BudgetInfeasible { .. } => 2,
            Error::Data(_) | Error::Io { .. } => 3,
            Error::Training { .. } => 4,
        }
    }
}
