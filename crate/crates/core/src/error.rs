use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} index {index} out of range (size {len})")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    /// The instance lacks structure an operation relies on (no dominant
    /// strategy, leave-one-out on a single agent, ...).
    #[error("structure error: {0}")]
    Structure(String),

    /// Empty contract polytope. `slack[i]` is `g_i - sum_j lower_i^j`, negative
    /// for the offending agents.
    #[error("infeasible: {message}")]
    Infeasible { message: String, slack: Vec<f64> },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn index(what: &'static str, index: usize, len: usize) -> Self {
        Error::Index { what, index, len }
    }
}
