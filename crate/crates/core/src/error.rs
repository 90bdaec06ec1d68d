use thiserror::Error;

/// Crate-wide error type.
///
/// The variants are grouped so that front ends can map them onto distinct
/// exit statuses (see [`Error::category`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid task: {}", .0.join("; "))]
    InvalidTask(Vec<String>),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{path}:{line}: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },

    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),

    #[error("backend error: {0}")]
    Backend(#[from] BackendError),

    #[error("solver error: {0}")]
    Solver(#[from] SolverError),

    #[error("candidate pool never reached K: {pool} candidates for K = {k}")]
    PoolTooSmall { pool: usize, k: usize },

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse error classes, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Validation,
    Backend,
    Solver,
}

impl Error {
    pub fn category(&self) -> Category {
        match self {
            Error::Backend(_) => Category::Backend,
            Error::Solver(_) | Error::PoolTooSmall { .. } => Category::Solver,
            _ => Category::Validation,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: usize, message: String },

    #[error("authentication failed: {0}")]
    Auth(String),

    #[error("call budget of {0} exceeded")]
    BudgetExceeded(usize),

    #[error("missing credentials: environment variable {0} is not set")]
    MissingCredentials(String),

    #[error("scripted backend exhausted after {0} responses")]
    ScriptExhausted(usize),

    #[error("unrecognized prompt: {0}")]
    UnrecognizedPrompt(String),

    #[error("malformed response: {0}")]
    MalformedResponse(String),

    #[error("invalid backend spec `{0}`")]
    InvalidSpec(String),

    #[error("empty prompt")]
    EmptyPrompt,
}

#[derive(Debug, Error, PartialEq)]
pub enum SolverError {
    #[error("infeasible: K = {k} exceeds {n_cols} candidate columns")]
    Infeasible { k: usize, n_cols: usize },

    #[error("exhaustive enumeration of {count} subsets exceeds the cap of {cap}")]
    CapExceeded { count: u128, cap: u128 },

    #[error("selection vector has length {got}, expected {expected}")]
    DimensionMismatch { got: usize, expected: usize },

    #[error("column index {index} out of range for {n_cols} columns")]
    ColumnOutOfRange { index: usize, n_cols: usize },

    #[error("greedy selection requires constrained-K mode")]
    GreedyPenalized,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
