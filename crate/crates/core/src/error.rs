use thiserror::Error;

/// Errors raised by the score, tilt, oracle and sampler routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("noise level {0} outside [0, 1]")]
    InvalidNoiseLevel(f64),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// The affine score/denoiser map is singular at this noise level.
    #[error("{op}: degenerate noise level sigma = {sigma}")]
    DegenerateNoise { op: &'static str, sigma: f64 },

    /// Linear-only tilt queried at pure noise: the `1/sqrt(1 - sigma^2)` coefficient on `v` diverges.
    #[error("tilted score diverges at sigma = 1 for a purely linear tilt (s = 0, v != 0)")]
    DivergentTiltScore,

    /// Same corner as [`Error::DivergentTiltScore`], hit while forming the shifted location.
    #[error("shifted location is unbounded at sigma = 1 for a purely linear tilt (s = 0, v != 0)")]
    DegenerateShift,

    #[error("invalid mixture: {0}")]
    InvalidMixture(String),

    #[error("invalid tilt: {0}")]
    InvalidTilt(String),

    #[error("invalid quadrature spec: {0}")]
    InvalidQuadrature(String),

    #[error("quadrature integrand is not finite at node {0:?}")]
    NonFiniteIntegrand(Vec<f64>),

    #[error("finite-difference step must be positive and finite, got {0}")]
    InvalidStep(f64),

    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid sampler config: {0}")]
    InvalidSampler(String),

    #[error("need at least 2 samples for moments, got {0}")]
    TooFewSamples(usize),

    #[error("{0} is not supported by this model")]
    Unsupported(&'static str),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
