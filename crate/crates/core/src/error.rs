use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("lookup failed: {0}")]
    Lookup(String),

    #[error("file format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("non-finite gradient in tensor '{0}'")]
    NonFinite(String),

    #[error("non-deterministic loss: two evaluations differ ({0} vs {1})")]
    Determinism(f64, f64),

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("enumeration budget exceeded: {0} features (max 20); use sampled Shapley")]
    Budget(usize),

    #[error("range error: {0}")]
    Range(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code: 1 for verification failures, 2 for usage, config,
    /// or data problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Determinism(..) | Error::NonFinite(_) => 1,
            _ => 2,
        }
    }
}
