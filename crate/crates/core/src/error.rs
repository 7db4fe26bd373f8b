use alloc::boxed::Box;
use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("non-finite value produced by node {node} ({op})")]
    Numerical { node: usize, op: &'static str },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("solver failed at iteration {iteration}: {message}")]
    Solver { iteration: usize, message: String },
    #[error("distillation step {step} failed (last objective {last_objective:?}): {source}")]
    Outer {
        step: usize,
        last_objective: Option<f64>,
        source: Box<Error>,
    },
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }
}
