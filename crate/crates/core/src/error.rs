use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Overflow, NaN or another floating point breakdown at iteration `t`.
    #[error("numeric error at iteration {t}: {msg}")]
    Numeric { t: usize, msg: String },

    /// A loss evaluation overflowed with no stable evaluation path.
    #[error("overflow: {0}")]
    Overflow(String),

    #[error("load error in {path}: row {row} {msg}")]
    Load {
        path: PathBuf,
        row: usize,
        msg: String,
    },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("did not converge: {0}")]
    Convergence(String),

    /// A postcondition that should hold by construction failed.
    #[error("internal consistency error: {0}")]
    Consistency(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Module that raised the error, used to qualify CLI messages.
    pub fn module(&self) -> &'static str {
        match self {
            Error::Domain(_) => "math",
            Error::Config(_) | Error::Usage(_) => "config",
            Error::Numeric { .. } => "descent",
            Error::Overflow(_) => "smoothed_margin",
            Error::Load { .. } => "data",
            Error::Convergence(_) | Error::Consistency(_) => "oracle",
            Error::Io { .. } | Error::Json(_) => "io",
        }
    }

    /// Process exit code: 2 for configuration problems, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) | Error::Load { .. } | Error::Io { .. } => 2,
            Error::Json(_) => 2,
            Error::Domain(_)
            | Error::Numeric { .. }
            | Error::Overflow(_)
            | Error::Convergence(_)
            | Error::Consistency(_) => 3,
        }
    }
}
