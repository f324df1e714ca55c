//! Tensor-product trapezoid quadrature with log-domain accumulation.
//!
//! Integrands are supplied as log-values. Accumulation keeps a running
//! maximum and rescales when it moves, so products of densities spanning
//! hundreds of orders of magnitude stay representable. Nodes are visited in
//! a fixed lexicographic order, which makes every result deterministic.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::score::{GaussianMixture, NoiseLevel, Point};
use crate::tilt::TiltParams;

use super::LogDensityModel;

pub const MAX_QUAD_DIM: usize = 3;
pub const MIN_POINTS_PER_AXIS: usize = 32;
pub const MAX_GRID_NODES: usize = 1 << 24;
/// Fraction of integrand mass on the box boundary above which a result is
/// flagged as possibly truncated.
pub const BOUNDARY_WARN: f64 = 1e-10;

/// Integration box and resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QuadratureSpecRaw", into = "QuadratureSpecRaw")]
pub struct QuadratureSpec {
    lower: Point,
    upper: Point,
    points_per_axis: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuadratureSpecRaw {
    lower: Vec<f64>,
    upper: Vec<f64>,
    points_per_axis: usize,
}

impl TryFrom<QuadratureSpecRaw> for QuadratureSpec {
    type Error = Error;

    fn try_from(raw: QuadratureSpecRaw) -> Result<Self> {
        QuadratureSpec::new(raw.lower, raw.upper, raw.points_per_axis)
    }
}

impl From<QuadratureSpec> for QuadratureSpecRaw {
    fn from(q: QuadratureSpec) -> Self {
        QuadratureSpecRaw {
            lower: q.lower.into_vec(),
            upper: q.upper.into_vec(),
            points_per_axis: q.points_per_axis,
        }
    }
}

impl QuadratureSpec {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, points_per_axis: usize) -> Result<Self> {
        let d = lower.len();
        if d == 0 || d > MAX_QUAD_DIM {
            return Err(Error::InvalidQuadrature(format!(
                "lower: dimension {d} outside 1..={MAX_QUAD_DIM}"
            )));
        }
        if upper.len() != d {
            return Err(Error::InvalidQuadrature(format!(
                "upper: expected dimension {d}, found {}",
                upper.len()
            )));
        }
        if points_per_axis < MIN_POINTS_PER_AXIS {
            return Err(Error::InvalidQuadrature(format!(
                "points_per_axis: need at least {MIN_POINTS_PER_AXIS}, got {points_per_axis}"
            )));
        }
        let total = points_per_axis.checked_pow(d as u32).unwrap_or(usize::MAX);
        if total > MAX_GRID_NODES {
            return Err(Error::InvalidQuadrature(format!(
                "points_per_axis: {points_per_axis}^{d} nodes exceeds {MAX_GRID_NODES}"
            )));
        }
        let lower = Point::new(lower)
            .map_err(|_| Error::InvalidQuadrature("lower: non-finite entry".into()))?;
        let upper = Point::new(upper)
            .map_err(|_| Error::InvalidQuadrature("upper: non-finite entry".into()))?;
        if let Some(i) = (0..d).find(|&i| !(lower[i] < upper[i])) {
            return Err(Error::InvalidQuadrature(format!(
                "axis {i}: lower {} must be below upper {}",
                lower[i], upper[i]
            )));
        }
        Ok(QuadratureSpec {
            lower,
            upper,
            points_per_axis,
        })
    }

    /// Box covering every component's posterior `x | u, k` at `mean ± width * std`
    /// per axis. At `sigma = 1` the posterior is the prior.
    pub fn posterior_box(
        mixture: &GaussianMixture,
        u: &Point,
        sigma: NoiseLevel,
        width: f64,
        points_per_axis: usize,
    ) -> Result<Self> {
        let d = mixture.dim();
        u.expect_dim(d)?;
        if sigma.is_zero() {
            return Err(Error::DegenerateNoise {
                op: "posterior_box",
                sigma: 0.0,
            });
        }
        let a = sigma.signal_scale();
        let var = sigma.variance();
        let uv = DVector::from_column_slice(u);
        let mut lower = vec![f64::INFINITY; d];
        let mut upper = vec![f64::NEG_INFINITY; d];
        for (mean, cov) in mixture.means().into_iter().zip(mixture.covariances()) {
            let flat: Vec<f64> = cov.into_iter().flatten().collect();
            let sigma_k = DMatrix::from_row_slice(d, d, &flat);
            let prec = sigma_k
                .clone()
                .cholesky()
                .ok_or_else(|| {
                    Error::InvalidMixture("covariance lost positive definiteness".into())
                })?
                .inverse();
            let post_prec = &prec + DMatrix::identity(d, d) * (a * a / var);
            let post_cov = post_prec
                .cholesky()
                .ok_or_else(|| {
                    Error::InvalidMixture("posterior precision not positive definite".into())
                })?
                .inverse();
            let rhs = &prec * DVector::from_vec(mean) + &uv * (a / var);
            let post_mean = &post_cov * rhs;
            for i in 0..d {
                let half = width * post_cov[(i, i)].sqrt();
                lower[i] = lower[i].min(post_mean[i] - half);
                upper[i] = upper[i].max(post_mean[i] + half);
            }
        }
        QuadratureSpec::new(lower, upper, points_per_axis)
    }

    /// Box covering every component at `mean ± width * std` per axis.
    pub fn prior_box(
        mixture: &GaussianMixture,
        width: f64,
        points_per_axis: usize,
    ) -> Result<Self> {
        let d = mixture.dim();
        let mut lower = vec![f64::INFINITY; d];
        let mut upper = vec![f64::NEG_INFINITY; d];
        for (mean, cov) in mixture.means().iter().zip(mixture.covariances()) {
            for i in 0..d {
                let half = width * cov[i][i].sqrt();
                lower[i] = lower[i].min(mean[i] - half);
                upper[i] = upper[i].max(mean[i] + half);
            }
        }
        QuadratureSpec::new(lower, upper, points_per_axis)
    }

    pub fn dim(&self) -> usize {
        self.lower.dim()
    }

    pub fn lower(&self) -> &Point {
        &self.lower
    }

    pub fn upper(&self) -> &Point {
        &self.upper
    }

    pub fn points_per_axis(&self) -> usize {
        self.points_per_axis
    }

    /// Same box at a different resolution.
    pub fn with_points(&self, points_per_axis: usize) -> Result<Self> {
        QuadratureSpec::new(self.lower.to_vec(), self.upper.to_vec(), points_per_axis)
    }

    fn step(&self, axis: usize) -> f64 {
        (self.upper[axis] - self.lower[axis]) / (self.points_per_axis - 1) as f64
    }
}

/// A quadrature result with the share of integrand mass found on the box
/// boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadEstimate<T> {
    pub value: T,
    pub boundary_fraction: f64,
}

impl<T> QuadEstimate<T> {
    /// True when the box is likely too small for the integrand.
    pub fn truncated(&self) -> bool {
        !(self.boundary_fraction <= BOUNDARY_WARN)
    }
}

/// Log-domain sums of `w_j f_j` and optionally `w_j f_j x_j`.
struct Accumulator {
    max: f64,
    total: f64,
    boundary: f64,
    first: Vec<f64>,
}

impl Accumulator {
    fn rescale(&mut self, new_max: f64) {
        let factor = if self.max == f64::NEG_INFINITY {
            0.0
        } else {
            (self.max - new_max).exp()
        };
        self.total *= factor;
        self.boundary *= factor;
        for f in &mut self.first {
            *f *= factor;
        }
        self.max = new_max;
    }
}

struct Integral {
    log_total: f64,
    boundary_fraction: f64,
    /// `E[x]` under the normalized integrand, when requested.
    mean: Vec<f64>,
}

fn integrate<F>(spec: &QuadratureSpec, with_mean: bool, mut log_f: F) -> Result<Integral>
where
    F: FnMut(&[f64]) -> f64,
{
    let d = spec.dim();
    let n = spec.points_per_axis;
    let steps: Vec<f64> = (0..d).map(|i| spec.step(i)).collect();
    let mut idx = vec![0usize; d];
    let mut x: Vec<f64> = spec.lower.to_vec();
    let mut acc = Accumulator {
        max: f64::NEG_INFINITY,
        total: 0.0,
        boundary: 0.0,
        first: vec![0.0; if with_mean { d } else { 0 }],
    };
    loop {
        for i in 0..d {
            x[i] = if idx[i] == n - 1 {
                spec.upper[i]
            } else {
                spec.lower[i] + idx[i] as f64 * steps[i]
            };
        }
        let lf = log_f(&x);
        if lf.is_nan() || lf == f64::INFINITY {
            return Err(Error::NonFiniteIntegrand(x));
        }
        if lf != f64::NEG_INFINITY {
            if lf > acc.max {
                acc.rescale(lf);
            }
            let on_edge = idx.iter().any(|&j| j == 0 || j == n - 1);
            let w = idx
                .iter()
                .map(|&j| if j == 0 || j == n - 1 { 0.5 } else { 1.0 })
                .product::<f64>();
            let term = w * (lf - acc.max).exp();
            acc.total += term;
            if on_edge {
                acc.boundary += term;
            }
            for (f, xi) in acc.first.iter_mut().zip(&x) {
                *f += term * xi;
            }
        }

        let mut axis = d;
        loop {
            if axis == 0 {
                let log_cell: f64 = steps.iter().map(|h| h.ln()).sum();
                if !(acc.total > 0.0) {
                    return Ok(Integral {
                        log_total: f64::NEG_INFINITY,
                        boundary_fraction: f64::NAN,
                        mean: vec![f64::NAN; acc.first.len()],
                    });
                }
                return Ok(Integral {
                    log_total: acc.max + acc.total.ln() + log_cell,
                    boundary_fraction: acc.boundary / acc.total,
                    mean: acc.first.iter().map(|f| f / acc.total).collect(),
                });
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < n {
                break;
            }
            idx[axis] = 0;
        }
    }
}

fn check_dims<P: LogDensityModel + ?Sized>(p: &P, spec: &QuadratureSpec) -> Result<()> {
    if p.dim() != spec.dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.dim(),
            found: p.dim(),
        });
    }
    Ok(())
}

fn no_mass() -> Error {
    Error::InvalidQuadrature("integrand has no mass on the grid".into())
}

/// `E_p[exp(v^T x - s |x|^2 / 2)]` as a ratio of two grid integrals.
pub fn quad_normalizer<P: LogDensityModel + ?Sized>(
    p: &P,
    tilt: &TiltParams,
    spec: &QuadratureSpec,
) -> Result<QuadEstimate<f64>> {
    check_dims(p, spec)?;
    tilt.v().expect_dim(spec.dim())?;
    let v = tilt.v().as_slice();
    let s = tilt.s();
    let plain = integrate(spec, false, |x| p.log_density(x))?;
    let tilted = integrate(spec, false, |x| {
        let lin: f64 = v.iter().zip(x).map(|(a, b)| a * b).sum();
        let sq: f64 = x.iter().map(|c| c * c).sum();
        p.log_density(x) + lin - 0.5 * s * sq
    })?;
    if !plain.log_total.is_finite() || !tilted.log_total.is_finite() {
        return Err(no_mass());
    }
    Ok(QuadEstimate {
        value: (tilted.log_total - plain.log_total).exp(),
        boundary_fraction: plain.boundary_fraction.max(tilted.boundary_fraction),
    })
}

/// `E_p[x]` under the normalized density.
pub(crate) fn quad_mean<P: LogDensityModel + ?Sized>(
    p: &P,
    spec: &QuadratureSpec,
) -> Result<QuadEstimate<Point>> {
    check_dims(p, spec)?;
    let out = integrate(spec, true, |x| p.log_density(x))?;
    if !out.log_total.is_finite() {
        return Err(no_mass());
    }
    Ok(QuadEstimate {
        value: Point::new(out.mean)?,
        boundary_fraction: out.boundary_fraction,
    })
}

/// Reverse-conditional mean `E[x | u, sigma]` by direct integration of
/// `x p(x) exp(sqrt(1 - sigma^2) u^T x / sigma^2 - (1/sigma^2 - 1) |x|^2 / 2)`.
pub fn quad_denoiser<P: LogDensityModel + ?Sized>(
    p: &P,
    u: &Point,
    sigma: NoiseLevel,
    spec: &QuadratureSpec,
) -> Result<QuadEstimate<Point>> {
    check_dims(p, spec)?;
    u.expect_dim(spec.dim())?;
    if sigma.is_zero() || sigma.is_one() {
        return Err(Error::DegenerateNoise {
            op: "quad_denoiser",
            sigma: sigma.value(),
        });
    }
    let var = sigma.variance();
    let lin = (1.0 - var).sqrt() / var;
    let quad = 1.0 / var - 1.0;
    let out = integrate(spec, true, |x| {
        let ux: f64 = u.iter().zip(x).map(|(a, b)| a * b).sum();
        let sq: f64 = x.iter().map(|c| c * c).sum();
        p.log_density(x) + lin * ux - 0.5 * quad * sq
    })?;
    if !out.log_total.is_finite() {
        return Err(no_mass());
    }
    Ok(QuadEstimate {
        value: Point::new(out.mean)?,
        boundary_fraction: out.boundary_fraction,
    })
}

/// `log q(u, sigma) = log ∫ p(x) N(u; sqrt(1 - sigma^2) x, sigma^2 I) dx`.
///
/// Carries whatever additive constant `p`'s log-density carries.
pub fn quad_marginal_logq<P: LogDensityModel + ?Sized>(
    p: &P,
    u: &Point,
    sigma: NoiseLevel,
    spec: &QuadratureSpec,
) -> Result<QuadEstimate<f64>> {
    check_dims(p, spec)?;
    u.expect_dim(spec.dim())?;
    if sigma.is_zero() {
        return Err(Error::DegenerateNoise {
            op: "quad_marginal_logq",
            sigma: 0.0,
        });
    }
    let var = sigma.variance();
    let a = sigma.signal_scale();
    let log_norm = -0.5 * spec.dim() as f64 * (2.0 * PI * var).ln();
    let out = integrate(spec, false, |x| {
        let dist: f64 = u.iter().zip(x).map(|(ui, xi)| (ui - a * xi).powi(2)).sum();
        p.log_density(x) + log_norm - 0.5 * dist / var
    })?;
    if !out.log_total.is_finite() {
        return Err(no_mass());
    }
    Ok(QuadEstimate {
        value: out.log_total,
        boundary_fraction: out.boundary_fraction,
    })
}
