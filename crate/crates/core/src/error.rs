use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// Variants are grouped by who is at fault: shape/contract errors are caller
/// bugs, format/structural errors come from data, config errors from the
/// user-supplied settings.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value at coordinate {index}: {detail}")]
    Numeric { index: usize, detail: String },
    #[error("structural error: {0}")]
    Structural(String),
    #[error("format error in {file}:{line}: {msg}")]
    Format {
        file: String,
        line: u64,
        msg: String,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-readable kind, used by the CLI's error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Domain(_) => "domain",
            Error::Contract(_) => "contract",
            Error::Numeric { .. } => "numeric",
            Error::Structural(_) => "structural",
            Error::Format { .. } => "format",
            Error::Config(_) => "config",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::Diverged { .. } => "diverged",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
