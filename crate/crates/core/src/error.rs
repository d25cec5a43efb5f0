use thiserror::Error;

/// Errors raised by the numerical pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("numerical divergence at t = {t}")]
    Divergence { t: f64 },

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("sampling rejected {0} consecutive draws")]
    ResampleLimit(usize),

    #[error("all weights in the minibatch are zero")]
    DegenerateBatch,

    #[error("ensemble spread collapsed to {spread:e}")]
    EnsembleCollapse { spread: f64 },

    #[error("filter failed at step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Attach a filter step index to an error.
    pub fn at_step(self, step: usize) -> Self {
        Error::Step {
            step,
            source: Box::new(self),
        }
    }

    /// True when the root cause is numerical (divergence, loss of definiteness, collapse).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Divergence { .. }
            | Error::NotPositiveDefinite
            | Error::EnsembleCollapse { .. }
            | Error::DegenerateBatch
            | Error::ResampleLimit(_) => true,
            Error::Step { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
