//! Crate-wide error type. Every fallible operation returns [`Result`].

/// Unified error for tensor ops, encoders, training, and the CLI harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not line up; `detail` names both shapes.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Bad configuration value or unknown configuration key.
    #[error("config error: {0}")]
    Config(String),

    /// Input is degenerate (zero-norm embedding, empty sequence, collapsed box).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A loss or activation went NaN/Inf; `component` names the culprit.
    #[error("non-finite value in {component}")]
    NonFinite { component: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// On-disk artifact (corpus, checkpoint, landmark file) is malformed.
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn degenerate(msg: impl Into<String>) -> Self {
        Error::Degenerate(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
