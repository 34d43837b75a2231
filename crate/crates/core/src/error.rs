use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("format error at line {line}: {msg}")]
    Format { line: usize, msg: String },

    #[error("record {index}: {msg}")]
    Record { index: usize, msg: String },

    #[error("unknown class label {label:?} in record {index}")]
    Label { index: usize, label: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: bad cache file: {msg}")]
    Cache { path: PathBuf, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite scan state at token {token}, channel {channel}")]
    NonFiniteState { token: usize, channel: usize },

    #[error("training diverged at epoch {epoch}, step {step}: {msg}")]
    Divergence {
        epoch: usize,
        step: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by malformed input data rather than configuration.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Format { .. }
                | Error::Record { .. }
                | Error::Label { .. }
                | Error::Cache { .. }
                | Error::Io { .. }
        )
    }

    /// True for numerical blow-ups during a run.
    pub fn is_runtime_divergence(&self) -> bool {
        matches!(self, Error::Divergence { .. } | Error::NonFiniteState { .. })
    }

    /// Process exit status: 3 divergence, 2 data or checkpoint, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.is_runtime_divergence() {
            3
        } else if self.is_data_error() || matches!(self, Error::Checkpoint(_)) {
            2
        } else {
            1
        }
    }
}
