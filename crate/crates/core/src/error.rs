use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SdqError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SdqError {
    /// A precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A value that must be finite was not.
    #[error("non-finite value in {context} at index {index}: {value}")]
    NonFinite {
        context: String,
        index: usize,
        value: f64,
    },

    /// Training produced a non-finite loss.
    #[error("numerical abort at {phase} epoch {epoch} step {step}: loss {loss}; largest activation in layer '{layer}' ({magnitude:e})")]
    NumericalAbort {
        phase: String,
        epoch: usize,
        step: usize,
        loss: f64,
        layer: String,
        magnitude: f64,
    },

    #[error("parse error in {source_name} line {line}: {msg}")]
    Parse {
        source_name: String,
        line: usize,
        msg: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SdqError {
    pub fn contract(msg: impl Into<String>) -> Self {
        SdqError::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SdqError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(source_name: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        SdqError::Parse {
            source_name: source_name.into(),
            line,
            msg: msg.into(),
        }
    }

    /// Numerical failures map to exit code 2, everything else to 1.
    pub fn is_numerical(&self) -> bool {
        matches!(self, SdqError::NumericalAbort { .. } | SdqError::NonFinite { .. })
    }

    /// Short machine-readable tag used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            SdqError::Contract(_) => "contract",
            SdqError::NonFinite { .. } => "non_finite",
            SdqError::NumericalAbort { .. } => "numerical_abort",
            SdqError::Parse { .. } => "parse",
            SdqError::Config(_) => "config",
            SdqError::Io { .. } => "io",
        }
    }
}
