use std::io;

/// Errors raised anywhere in the pipeline.
///
/// The variant names the class of failure; the message carries the
/// diagnostics (offending value, offsets, step or slice index).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("training error at step {step}: {message}")]
    Training { step: usize, message: String },

    #[error("sampling error at slice {slice}, sub-step {substep}: {message}")]
    Sampling {
        slice: usize,
        substep: usize,
        message: String,
    },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    /// Short machine-readable tag for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Argument(_) => "argument",
            Error::Format(_) => "format",
            Error::Training { .. } => "training",
            Error::Sampling { .. } => "sampling",
            Error::Evaluation(_) => "evaluation",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)+) => {
        if !($cond) {
            return Err($crate::error::Error::$variant(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
