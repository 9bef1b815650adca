//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

/// Errors produced by the explanation engine.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Matrix or vector dimensions do not line up.
    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: String,
    },

    /// A target-model evaluation failed for a specific sample.
    #[error("model evaluation failed for sample {sample}: {source}")]
    ModelEval {
        sample: usize,
        #[source]
        source: Box<Error>,
    },

    /// An ensemble member failed; wraps the member's own failure.
    #[error("ensemble member {member} failed: {source}")]
    EnsembleMember {
        member: usize,
        #[source]
        source: Box<Error>,
    },

    /// Training aborted because the loss became non-finite.
    #[error(
        "training aborted: non-finite loss at epoch {epoch}, batch {batch} (max |param| = {max_abs_param})"
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        max_abs_param: f64,
    },

    /// A statistic is undefined for the given input (e.g. Pearson on a constant vector).
    #[error("undefined statistic: {0}")]
    UndefinedStatistic(String),

    /// Argument outside the mathematical domain of a function.
    #[error("domain error: {0}")]
    Domain(String),

    /// Every image in a benchmark was skipped; there is nothing to aggregate.
    #[error("empty benchmark: {0}")]
    EmptyBenchmark(String),

    /// A persisted file declares a schema version this build does not read.
    #[error(
        "schema version mismatch: file has version {found}, this build reads version {supported}"
    )]
    SchemaVersion { found: u32, supported: u32 },

    /// Malformed persisted data (CSV, IDX, JSON model files, ...).
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    /// Configuration rejected before any compute started.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// The external model process broke the wire protocol.
    #[error("bridge protocol error: {message} (payload: {payload})")]
    BridgeProtocol { message: String, payload: String },

    /// The external model process did not answer within the timeout.
    #[error("bridge timeout after {seconds}s; process killed")]
    BridgeTimeout { seconds: f64 },

    /// The external model process is gone (exited, killed, or closed its pipes).
    #[error("bridge process failure: {0}")]
    BridgeProcess(String),

    #[error("file not found: {0}")]
    NotFound(PathBuf),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code the CLI maps this error to.
    ///
    /// 2 = input/config error, 3 = numeric/training failure, 4 = empty result.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFiniteLoss { .. } | Error::ModelEval { .. } => 3,
            Error::EnsembleMember { source, .. } => source.exit_code(),
            Error::EmptyBenchmark(_) => 4,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
