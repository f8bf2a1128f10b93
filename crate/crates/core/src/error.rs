use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("signal has {got} samples, shorter than one analysis window of {window}")]
    SignalTooShort { got: usize, window: usize },
    #[error("non-finite sample at index {index}")]
    NonFiniteSample { index: usize },
    #[error("invalid epoch: {0}")]
    InvalidEpoch(String),
    #[error("unknown label token {token:?} at position {position}")]
    UnknownLabel { token: String, position: usize },
    #[error("trimming leaves no epochs (in-bed {start}..={end}, recording length {len})")]
    EmptyAfterTrim { start: usize, end: usize, len: usize },
    #[error("invalid in-bed range {start}..={end} for recording of {len} epochs")]
    InvalidInBed { start: usize, end: usize, len: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("fold spec invalid: {0}")]
    FoldSpec(String),
    #[error("non-finite activation in {stage} at frame {frame}")]
    NonFiniteActivation { stage: &'static str, frame: usize },
    #[error("non-finite logits at batch item {item}, position {position}")]
    NonFiniteLogits { item: usize, position: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("format error in {context}: {message}")]
    Format { context: String, message: String },
    #[error("unsupported {what} version {found} (reader supports up to {supported})")]
    Version { what: &'static str, found: u32, supported: u32 },
    #[error("checkpoint incompatible: {0}")]
    Incompatible(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format { context: context.into(), message: message.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
