//! Base-density models, the variance-preserving noising channel and the
//! Tweedie score/denoiser duality.
//!
//! The channel is `U = sqrt(1 - sigma^2) X + sigma Z` with `Z ~ N(0, I)`.
//! Its marginal density `q(u, sigma)` has score
//!
//! ```text
//! grad log q(u, sigma) = (sqrt(1 - sigma^2) F[u, sigma] - u) / sigma^2
//! ```
//!
//! where `F[u, sigma] = E[X | U = u]` is the denoiser.

mod mixture;

use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use mixture::GaussianMixture;

/// Noise scale `sigma` of the channel, always in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct NoiseLevel(f64);

impl NoiseLevel {
    pub const ZERO: NoiseLevel = NoiseLevel(0.0);
    pub const ONE: NoiseLevel = NoiseLevel(1.0);

    pub fn new(sigma: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&sigma) {
            Ok(NoiseLevel(sigma))
        } else {
            Err(Error::InvalidNoiseLevel(sigma))
        }
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }

    /// `sigma^2`.
    #[inline]
    pub fn variance(self) -> f64 {
        self.0 * self.0
    }

    /// `sqrt(1 - sigma^2)`, the attenuation applied to the clean signal.
    #[inline]
    pub fn signal_scale(self) -> f64 {
        (1.0 - self.variance()).max(0.0).sqrt()
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0.0
    }

    pub fn is_one(self) -> bool {
        self.0 == 1.0
    }
}

impl TryFrom<f64> for NoiseLevel {
    type Error = Error;

    fn try_from(sigma: f64) -> Result<Self> {
        NoiseLevel::new(sigma)
    }
}

impl From<NoiseLevel> for f64 {
    fn from(sigma: NoiseLevel) -> f64 {
        sigma.0
    }
}

impl fmt::Display for NoiseLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// A location in `R^d` with finite coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Point(Vec<f64>);

impl Point {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.iter().all(|c| c.is_finite()) {
            Ok(Point(coords))
        } else {
            Err(Error::NonFinite("point coordinates"))
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Point(vec![0.0; dim])
    }

    /// Wraps coordinates produced by arithmetic on finite inputs.
    ///
    /// Callers that cannot rule out overflow should go through [`Point::new`].
    pub(crate) fn from_vec_unchecked(coords: Vec<f64>) -> Self {
        debug_assert!(coords.iter().all(|c| c.is_finite()), "{coords:?}");
        Point(coords)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&c| c == 0.0)
    }

    pub fn norm_squared(&self) -> f64 {
        self.0.iter().map(|c| c * c).sum()
    }

    pub(crate) fn expect_dim(&self, expected: usize) -> Result<()> {
        if self.dim() == expected {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected,
                found: self.dim(),
            })
        }
    }
}

impl Deref for Point {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for Point {
    type Error = Error;

    fn try_from(coords: Vec<f64>) -> Result<Self> {
        Point::new(coords)
    }
}

impl From<Point> for Vec<f64> {
    fn from(p: Point) -> Vec<f64> {
        p.0
    }
}

/// `a * x + b * y`, checked for finiteness.
pub(crate) fn axpby(a: f64, x: &[f64], b: f64, y: &[f64]) -> Result<Point> {
    Point::new(x.iter().zip(y).map(|(xi, yi)| a * xi + b * yi).collect())
}

/// A base density seen through the noising channel.
///
/// Implementations must keep `score` and `denoiser` consistent through
/// [`tweedie_score_from_denoiser`] at every `sigma` in `(0, 1)`. At
/// `sigma = 0` the denoiser is the identity; at `sigma = 1` the score is `-u`.
pub trait ScoreModel: Send + Sync {
    fn dim(&self) -> usize;

    /// `grad log q(u, sigma)`.
    fn score(&self, u: &Point, sigma: NoiseLevel) -> Result<Point>;

    /// `F[u, sigma] = E[X | U = u]`.
    fn denoiser(&self, u: &Point, sigma: NoiseLevel) -> Result<Point>;

    /// `log q(u, sigma)` up to a model-specific additive constant.
    fn log_marginal(&self, _u: &Point, _sigma: NoiseLevel) -> Result<f64> {
        Err(Error::Unsupported("log_marginal"))
    }
}

impl<T: ScoreModel + ?Sized> ScoreModel for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn score(&self, u: &Point, sigma: NoiseLevel) -> Result<Point> {
        (**self).score(u, sigma)
    }
    fn denoiser(&self, u: &Point, sigma: NoiseLevel) -> Result<Point> {
        (**self).denoiser(u, sigma)
    }
    fn log_marginal(&self, u: &Point, sigma: NoiseLevel) -> Result<f64> {
        (**self).log_marginal(u, sigma)
    }
}

impl<T: ScoreModel + ?Sized> ScoreModel for Box<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn score(&self, u: &Point, sigma: NoiseLevel) -> Result<Point> {
        (**self).score(u, sigma)
    }
    fn denoiser(&self, u: &Point, sigma: NoiseLevel) -> Result<Point> {
        (**self).denoiser(u, sigma)
    }
    fn log_marginal(&self, u: &Point, sigma: NoiseLevel) -> Result<f64> {
        (**self).log_marginal(u, sigma)
    }
}

/// Pushes a clean point through the channel with caller-supplied standard
/// normal `noise`: `sqrt(1 - sigma^2) x + sigma noise`.
pub fn forward_noise(x: &Point, sigma: NoiseLevel, noise: &Point) -> Result<Point> {
    noise.expect_dim(x.dim())?;
    axpby(sigma.signal_scale(), x, sigma.value(), noise)
}

/// Tweedie: score `= (sqrt(1 - sigma^2) f - u) / sigma^2` for denoiser value `f`.
pub fn tweedie_score_from_denoiser(f: &Point, u: &Point, sigma: NoiseLevel) -> Result<Point> {
    f.expect_dim(u.dim())?;
    if sigma.is_zero() {
        return Err(Error::DegenerateNoise {
            op: "tweedie_score_from_denoiser",
            sigma: 0.0,
        });
    }
    let var = sigma.variance();
    axpby(sigma.signal_scale() / var, f, -1.0 / var, u)
}

/// Inverse of [`tweedie_score_from_denoiser`]: `(u + sigma^2 g) / sqrt(1 - sigma^2)`.
pub fn denoiser_from_score(g: &Point, u: &Point, sigma: NoiseLevel) -> Result<Point> {
    g.expect_dim(u.dim())?;
    if sigma.is_zero() || sigma.is_one() {
        return Err(Error::DegenerateNoise {
            op: "denoiser_from_score",
            sigma: sigma.value(),
        });
    }
    let scale = sigma.signal_scale();
    axpby(1.0 / scale, u, sigma.variance() / scale, g)
}
