use std::fmt;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse classification used by callers that map failures onto exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Shape,
    Argument,
    Numerical,
    Format,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numerical failure{}: {msg}", StepSuffix(*.step))]
    Numerical { step: Option<usize>, msg: String },

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("frame {frame}: {source}")]
    InFrame {
        frame: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

struct StepSuffix(Option<usize>);

impl fmt::Display for StepSuffix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(step) => write!(f, " at step {step}"),
            None => Ok(()),
        }
    }
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn numerical(step: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Numerical {
            step,
            msg: msg.into(),
        }
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }

    pub fn in_frame(self, frame: usize) -> Self {
        Error::InFrame {
            frame,
            source: Box::new(self),
        }
    }

    pub fn at_step(self, step: usize) -> Self {
        Error::AtStep {
            step,
            source: Box::new(self),
        }
    }

    /// Kind of the innermost error, looking through frame/step context.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Shape(_) => ErrorKind::Shape,
            Error::Argument(_) => ErrorKind::Argument,
            Error::Numerical { .. } => ErrorKind::Numerical,
            Error::Format { .. } => ErrorKind::Format,
            Error::Io(_) => ErrorKind::Io,
            Error::InFrame { source, .. } | Error::AtStep { source, .. } => source.kind(),
        }
    }

    /// Outermost step index recorded anywhere in the context chain.
    pub fn step(&self) -> Option<usize> {
        match self {
            Error::Numerical { step, .. } => *step,
            Error::AtStep { step, .. } => Some(*step),
            Error::InFrame { source, .. } => source.step(),
            _ => None,
        }
    }
}
