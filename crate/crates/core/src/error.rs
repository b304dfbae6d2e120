use thiserror::Error;

/// Errors raised by the numeric core, the environments and the file codecs.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration or call parameter is outside its admissible range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Caller-supplied data is malformed (dimensions, empty sets, non-finite values).
    #[error("invalid input: {0}")]
    Input(String),

    /// A documented precondition of the closed-form update was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Gradient training produced a non-finite loss.
    #[error("training diverged at step {step}: loss = {loss} ({detail})")]
    Training { step: usize, loss: f64, detail: String },

    /// A binary file does not follow its declared layout.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// A binary file parsed but carries semantically invalid values.
    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn param(msg: impl Into<String>) -> Error {
    Error::Parameter(msg.into())
}

pub(crate) fn input(msg: impl Into<String>) -> Error {
    Error::Input(msg.into())
}
