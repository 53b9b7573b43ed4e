use thiserror::Error;

/// Errors raised by the trajectory optimization library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A time or coordinate fell outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Mismatched argument dimensions or otherwise malformed input.
    #[error("argument error: {0}")]
    Argument(String),

    /// Endpoints violate joint limits, are in collision, or miss the task box.
    #[error("task infeasible: {0}")]
    TaskInfeasible(String),

    /// Benchmark task generation ran out of rejection-sampling budget.
    #[error("task generation failed for scene `{scene}`: {reason}")]
    Generation { scene: String, reason: String },

    /// Malformed input file; the message names the offending key and position.
    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(String),

    /// A linear-algebra kernel failed (non-PD system, singular KKT, ...).
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;
