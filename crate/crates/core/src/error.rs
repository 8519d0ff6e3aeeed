use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid activation: {0}")]
    InvalidActivation(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value in layer {layer}: {detail}")]
    NonFiniteLayer { layer: usize, detail: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("collocation set is empty")]
    EmptyCollocation,

    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },

    #[error("integrator failed at t = {t}: {detail}")]
    Integrator { t: f64, detail: String },

    #[error("zero denominator in {0}")]
    ZeroDenominator(&'static str),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
