use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("diverged at iteration {iteration}: {detail}")]
    Divergence { iteration: usize, detail: String },

    #[error(
        "adjoint solve did not converge (residual {residual:e} after {iterations} iterations)"
    )]
    AdjointNotConverged { residual: f64, iterations: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("training error: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}
