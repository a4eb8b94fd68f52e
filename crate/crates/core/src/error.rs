use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("basis mismatch: expected {expected} coefficients, found {found}")]
    BasisMismatch { expected: usize, found: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("numeric overflow: field value {value:e} exceeds divergence threshold {threshold:e}")]
    Overflow { value: f64, threshold: f64 },

    #[error("Newton iteration diverged at step {step} after {iterations} iterations (residual {residual:e})")]
    NewtonDiverged {
        step: usize,
        iterations: usize,
        residual: f64,
    },

    #[error("linear solve failed at step {step}: {reason}")]
    LinearSolveFailed { step: usize, reason: String },

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("sample {sample}: {source}")]
    AtSample {
        sample: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("level {level}: {source}")]
    AtLevel {
        level: String,
        #[source]
        source: Box<Error>,
    },

    #[error("degenerate direction: coordinate {coordinate} has zero sample variance")]
    DegenerateDirection { coordinate: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("region error: {0}")]
    Region(String),

    #[error("config error in field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("malformed noise dump: {0}")]
    NoiseFormat(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn at_step(self, step: usize) -> Self {
        match self {
            // already carries its own step index
            e @ (Error::NewtonDiverged { .. } | Error::LinearSolveFailed { .. }) => e,
            e => Error::AtStep {
                step,
                source: Box::new(e),
            },
        }
    }

    pub(crate) fn at_sample(self, sample: usize) -> Self {
        Error::AtSample {
            sample,
            source: Box::new(self),
        }
    }

    pub(crate) fn at_level(self, level: impl Into<String>) -> Self {
        Error::AtLevel {
            level: level.into(),
            source: Box::new(self),
        }
    }

    /// True when the root cause is a solver divergence (Newton failure or overflow).
    pub fn is_divergence(&self) -> bool {
        match self {
            Error::NewtonDiverged { .. } | Error::Overflow { .. } | Error::LinearSolveFailed { .. } => {
                true
            }
            Error::AtStep { source, .. } | Error::AtSample { source, .. } | Error::AtLevel { source, .. } => source.is_divergence(),
            _ => false,
        }
    }

    /// True when the root cause is a configuration or parameter problem.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config { .. } | Error::InvalidParameter { .. } | Error::Precondition(_) => true,
            Error::AtStep { source, .. } | Error::AtSample { source, .. } | Error::AtLevel { source, .. } => source.is_config(),
            _ => false,
        }
    }
}
