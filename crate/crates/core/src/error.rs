use thiserror::Error;

/// Errors produced by map construction, inversion, fitting and sampling.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("component {component}: index set does not contain the linear diagonal term")]
    MissingIdentityTerm { component: usize },

    #[error("index sets are incompatible: {0}")]
    IndexSetMismatch(String),

    #[error("map is not monotone in component {component} at {point:?} (diagonal derivative {derivative:e})")]
    Monotonicity {
        component: usize,
        point: Vec<f64>,
        derivative: f64,
    },

    #[error("could not invert component {component} for value {value:e}: {reason}")]
    Inversion {
        component: usize,
        value: f64,
        reason: &'static str,
    },

    #[error("newton solve did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NonConvergence { iterations: usize, grad_norm: f64 },

    #[error("hessian factorization failed")]
    Factorization,

    #[error("fitting component {component} failed: {source}")]
    Fit {
        component: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("need at least {needed} samples, got {found}")]
    InsufficientSamples { needed: usize, found: usize },

    #[error("series has zero variance")]
    ConstantSeries,

    #[error("target does not provide a gradient")]
    GradientUnavailable,

    #[error("gradient requires the preimage to lie inside the extension radius")]
    OutsideRadius,

    #[error("target density is not positive at the current state")]
    ZeroDensity,

    #[error("ode integration failed at t = {t}: {reason}")]
    Integration { t: f64, reason: &'static str },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}
