use thiserror::Error;

use crate::optimize::TrainingReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unsupported operation: {0}")]
    UnsupportedOp(String),

    /// The node handed to `backward` is not a 1x1 scalar.
    #[error("invalid loss node: expected a scalar, got shape {0:?}")]
    InvalidLoss((usize, usize)),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("Newton iteration did not converge after {iterations} iterations (residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("step size underflow at t = {t} (h = {h:e}); problem may be stiff")]
    Stiffness { t: f64, h: f64 },

    #[error("quadrature scheme error: {0}")]
    Scheme(String),

    /// Training produced a non-finite loss. The partial report covers every
    /// iteration up to and including the offending one.
    #[error("training diverged at iteration {iteration}")]
    Divergence {
        iteration: usize,
        report: Box<TrainingReport>,
    },

    #[error("serialization error: {0}")]
    Serialization(#[from] serde_json::Error),
}
