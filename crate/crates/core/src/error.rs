use thiserror::Error;

use crate::diffcore::ParamVector;
use crate::solver::SolveStats;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite gradient in parameter segment `{segment}`")]
    PoisonedGradient { segment: String },

    #[error("solver did not converge within {max_steps} steps (nfe={}, accepted={}, rejected={})", stats.nfe, stats.steps_accepted, stats.steps_rejected)]
    NonConvergence { max_steps: usize, stats: SolveStats },

    #[error("dynamics produced a non-finite value at s={s}")]
    Instability { s: f64 },

    #[error("method `{0}` is not supported here")]
    UnsupportedMethod(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss {
        epoch: usize,
        last_good: Box<ParamVector>,
    },

    #[error("fixed-point iteration failed for {flagged} of {total} samples")]
    FixedPoint { flagged: usize, total: usize },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn dim(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            context: context.into(),
            expected,
            actual,
        }
    }

    /// Wraps the error with a description of what was being attempted.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Strips any context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for failures of the numerics (as opposed to misuse of the API).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self.root(),
            Error::NonConvergence { .. }
                | Error::Instability { .. }
                | Error::PoisonedGradient { .. }
                | Error::NonFiniteLoss { .. }
                | Error::FixedPoint { .. }
        )
    }
}

pub(crate) fn check_len(context: &str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::dim(context, expected, actual));
    }
    Ok(())
}
