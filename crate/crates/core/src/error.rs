use thiserror::Error;

/// Errors raised across the simulator and analysis routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),

    #[error("Bessel truncation M = {given} too small, at least {required} required")]
    Truncation { given: usize, required: usize },

    #[error("numerical divergence at t = {time:.6e} s")]
    Divergence { time: f64 },

    #[error("time step {dt:.3e} s exceeds resolution limit {limit:.3e} s")]
    Resolution { dt: f64, limit: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("no solution: {0}")]
    NoSolution(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {msg}")]
    Format { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;

/// Configuration parse and validation errors. Each names the offending key.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("missing key: {0}")]
    MissingKey(String),

    #[error("unknown key: {0}")]
    UnknownKey(String),

    #[error("duplicate key: {0}")]
    DuplicateKey(String),

    #[error("non-positive rate: {0}")]
    NonPositiveRate(String),

    #[error("invalid value for {key}: {msg}")]
    InvalidValue { key: String, msg: String },

    #[error("unit violation for {key}: expected {expected}, found {found}")]
    Unit {
        key: String,
        expected: String,
        found: String,
    },

    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
