//! Brute-force ground truth used to check the closed forms and the tilt
//! identities: grid quadrature over an unnormalized log-density, central
//! finite differences, and sample moments.
//!
//! Nothing here calls into the tilt module or the mixture score/denoiser
//! formulas; mixtures only enter through their log-density.

mod quadrature;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::score::{GaussianMixture, NoiseLevel, Point, ScoreModel};
use crate::tilt::TiltParams;

pub use quadrature::{
    quad_denoiser, quad_marginal_logq, quad_normalizer, QuadEstimate, QuadratureSpec,
    BOUNDARY_WARN, MAX_GRID_NODES, MAX_QUAD_DIM, MIN_POINTS_PER_AXIS,
};

/// Unnormalized `log p(x)`.
pub trait LogDensityModel: Send + Sync {
    fn dim(&self) -> usize;
    fn log_density(&self, x: &[f64]) -> f64;
}

impl LogDensityModel for GaussianMixture {
    fn dim(&self) -> usize {
        GaussianMixture::dim(self)
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        GaussianMixture::log_density(self, x)
    }
}

impl<T: LogDensityModel + ?Sized> LogDensityModel for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        (**self).log_density(x)
    }
}

/// Closure-backed log-density.
pub struct FnLogDensity<F> {
    dim: usize,
    f: F,
}

impl<F> FnLogDensity<F>
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        FnLogDensity { dim, f }
    }
}

impl<F> LogDensityModel for FnLogDensity<F>
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
}

/// `log p(x) + v^T x - s |x|^2 / 2`, the unnormalized tilted density.
pub struct TiltedLogDensity<P> {
    base: P,
    tilt: TiltParams,
}

impl<P: LogDensityModel> TiltedLogDensity<P> {
    pub fn new(base: P, tilt: TiltParams) -> Result<Self> {
        tilt.v().expect_dim(base.dim())?;
        Ok(TiltedLogDensity { base, tilt })
    }
}

impl<P: LogDensityModel> LogDensityModel for TiltedLogDensity<P> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let lin: f64 = self.tilt.v().iter().zip(x).map(|(a, b)| a * b).sum();
        let sq: f64 = x.iter().map(|c| c * c).sum();
        self.base.log_density(x) + lin - 0.5 * self.tilt.s() * sq
    }
}

/// A [`ScoreModel`] for an arbitrary log-density in `d <= 3`, evaluated by
/// quadrature on a fixed box.
///
/// The denoiser is the quadrature posterior mean and the score follows from
/// it through Tweedie. At `sigma = 0` the score is a finite-difference
/// gradient of `log p`.
pub struct QuadratureModel<P> {
    density: P,
    spec: QuadratureSpec,
}

impl<P: LogDensityModel> QuadratureModel<P> {
    pub fn new(density: P, spec: QuadratureSpec) -> Result<Self> {
        if density.dim() != spec.dim() {
            return Err(Error::DimensionMismatch {
                expected: spec.dim(),
                found: density.dim(),
            });
        }
        Ok(QuadratureModel { density, spec })
    }

    fn prior_mean(&self) -> Result<Point> {
        Ok(quadrature::quad_mean(&self.density, &self.spec)?.value)
    }
}

impl<P: LogDensityModel> ScoreModel for QuadratureModel<P> {
    fn dim(&self) -> usize {
        self.density.dim()
    }

    fn score(&self, u: &Point, sigma: NoiseLevel) -> Result<Point> {
        u.expect_dim(self.dim())?;
        if sigma.is_one() {
            return Point::new(u.iter().map(|x| -x).collect());
        }
        if sigma.is_zero() {
            return fd_gradient(|x| Ok(self.density.log_density(x)), u, 1e-5);
        }
        let f = quad_denoiser(&self.density, u, sigma, &self.spec)?.value;
        crate::score::tweedie_score_from_denoiser(&f, u, sigma)
    }

    fn denoiser(&self, u: &Point, sigma: NoiseLevel) -> Result<Point> {
        u.expect_dim(self.dim())?;
        if sigma.is_zero() {
            return Ok(u.clone());
        }
        if sigma.is_one() {
            return self.prior_mean();
        }
        Ok(quad_denoiser(&self.density, u, sigma, &self.spec)?.value)
    }

    fn log_marginal(&self, u: &Point, sigma: NoiseLevel) -> Result<f64> {
        Ok(quad_marginal_logq(&self.density, u, sigma, &self.spec)?.value)
    }
}

/// Finite-difference step for coordinate value `x` at base step `h`:
/// `h * max(1, |x|)`.
pub fn fd_step(h: f64, x: f64) -> f64 {
    h * x.abs().max(1.0)
}

/// Central differences `(f(u + h_i e_i) - f(u - h_i e_i)) / (2 h_i)` with
/// `h_i = h * max(1, |u_i|)`.
pub fn fd_gradient<F>(f: F, u: &Point, h: f64) -> Result<Point>
where
    F: Fn(&Point) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidStep(h));
    }
    let mut probe = u.clone().into_vec();
    let mut grad = Vec::with_capacity(u.dim());
    for i in 0..u.dim() {
        let hi = fd_step(h, u[i]);
        probe[i] = u[i] + hi;
        let up = f(&Point::new(probe.clone())?)?;
        probe[i] = u[i] - hi;
        let down = f(&Point::new(probe.clone())?)?;
        probe[i] = u[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite("finite-difference evaluation"));
        }
        grad.push((up - down) / (2.0 * hi));
    }
    Point::new(grad)
}

/// Sample mean, unbiased covariance, and standard error of the mean.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    pub se_mean: Vec<f64>,
}

pub fn mc_moments(samples: &[Point]) -> Result<Moments> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    let d = samples[0].dim();
    for s in samples {
        s.expect_dim(d)?;
    }
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, x) in mean.iter_mut().zip(s.iter()) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![vec![0.0; d]; d];
    for s in samples {
        for i in 0..d {
            let di = s[i] - mean[i];
            for j in 0..=i {
                cov[i][j] += di * (s[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in 0..=i {
            cov[i][j] /= (n - 1) as f64;
            cov[j][i] = cov[i][j];
        }
    }
    let se_mean = (0..d).map(|i| (cov[i][i] / n as f64).sqrt()).collect();
    Ok(Moments { mean, cov, se_mean })
}
