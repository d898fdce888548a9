use std::path::PathBuf;

use thiserror::Error;

use crate::tta::AdaptationEvent;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("data error in {path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    /// Adaptation stopped early; carries the events logged up to the failure.
    #[error("adaptation aborted at step {step}: {reason}")]
    Aborted {
        step: usize,
        reason: String,
        events: Vec<AdaptationEvent>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
