//! Scores and denoisers of exponentially tilted densities.
//!
//! For `p*(x) ∝ p(x) exp(v^T x - s |x|^2 / 2)` with `s >= 0`, the denoiser of
//! `p*` at `(u, sigma)` is the denoiser of `p` at a shifted location `u'` and
//! a reduced noise level `sigma'`:
//!
//! ```text
//! u'      = sigma^2 v / sqrt(A B) + sqrt((1 - sigma^2) / (A B)) u
//! sigma'  = sqrt(sigma^2 / B)
//! A       = 1 - sigma^2 + s sigma^2
//! B       = 1 + s sigma^2
//! ```
//!
//! The score follows through Tweedie, in a form that stays finite at both
//! `sigma = 0` and (for `s > 0`) `sigma = 1`:
//!
//! ```text
//! grad log q*(u, sigma) = v sqrt(1 - sigma^2) / A - u s / A
//!                       + sqrt(1 - sigma^2) / sqrt(A B) * grad log q(u', sigma')
//! ```
//!
//! In `rho = 1/sigma^2 - 1` coordinates a quadratic tilt is a pure translation,
//! `rho' = rho + s`, which is where the time shift comes from.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::score::{NoiseLevel, Point, ScoreModel};

/// Linear tilt `v` and quadratic tilt `s >= 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TiltSpec", into = "TiltSpec")]
pub struct TiltParams {
    v: Point,
    s: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TiltSpec {
    v: Vec<f64>,
    s: f64,
}

impl TiltParams {
    pub fn new(v: Vec<f64>, s: f64) -> Result<Self> {
        if !s.is_finite() || s < 0.0 {
            return Err(Error::InvalidTilt(format!(
                "s: must be finite and >= 0, got {s}"
            )));
        }
        let v = Point::new(v).map_err(|_| Error::InvalidTilt("v: non-finite entry".into()))?;
        Ok(TiltParams { v, s })
    }

    pub fn identity(dim: usize) -> Self {
        TiltParams {
            v: Point::zeros(dim),
            s: 0.0,
        }
    }

    pub fn linear(v: Vec<f64>) -> Result<Self> {
        TiltParams::new(v, 0.0)
    }

    pub fn v(&self) -> &Point {
        &self.v
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn dim(&self) -> usize {
        self.v.dim()
    }

    pub fn is_identity(&self) -> bool {
        self.s == 0.0 && self.v.is_zero()
    }

    pub fn from_json_str(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }
}

impl TryFrom<TiltSpec> for TiltParams {
    type Error = Error;

    fn try_from(spec: TiltSpec) -> Result<Self> {
        TiltParams::new(spec.v, spec.s)
    }
}

impl From<TiltParams> for TiltSpec {
    fn from(t: TiltParams) -> TiltSpec {
        TiltSpec {
            v: t.v.into_vec(),
            s: t.s,
        }
    }
}

/// Where to query the base model: `(u', sigma')`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftedQuery {
    pub u_prime: Point,
    pub sigma_prime: NoiseLevel,
}

fn radicand(x: f64) -> f64 {
    debug_assert!(x > -1e-15, "radicand {x}");
    x.max(0.0)
}

/// Maps a query `(u, sigma)` on the tilted density to the equivalent query
/// on the base density.
///
/// For `s = 0` the noise level is unchanged and `u' = u + sigma^2 v / sqrt(1 - sigma^2)`.
/// That location is unbounded at `sigma = 1` when `v != 0`, which is reported
/// as [`Error::DegenerateShift`]; every other input maps to a finite query.
pub fn shift_map(u: &Point, sigma: NoiseLevel, tilt: &TiltParams) -> Result<ShiftedQuery> {
    tilt.v.expect_dim(u.dim())?;
    let s = tilt.s;
    let var = sigma.variance();
    if s == 0.0 {
        if tilt.v.is_zero() {
            return Ok(ShiftedQuery {
                u_prime: u.clone(),
                sigma_prime: sigma,
            });
        }
        if sigma.is_one() {
            return Err(Error::DegenerateShift);
        }
        let coef_v = var / sigma.signal_scale();
        let u_prime = u
            .iter()
            .zip(tilt.v.iter())
            .map(|(ui, vi)| ui + coef_v * vi)
            .collect();
        return Ok(ShiftedQuery {
            u_prime: Point::new(u_prime)?,
            sigma_prime: sigma,
        });
    }
    let attenuated = radicand(1.0 - var);
    let tilted = radicand(attenuated + s * var);
    let widened = 1.0 + s * var;
    let denom = (tilted * widened).sqrt();
    let coef_v = var / denom;
    let coef_u = attenuated.sqrt() / denom;
    let u_prime = u
        .iter()
        .zip(tilt.v.iter())
        .map(|(ui, vi)| coef_v * vi + coef_u * ui)
        .collect();
    Ok(ShiftedQuery {
        u_prime: Point::new(u_prime)?,
        sigma_prime: NoiseLevel::new((var / widened).sqrt())?,
    })
}

/// Denoiser of the tilted density: `G[u, sigma] = F[u', sigma']`.
pub fn tilted_denoiser<M: ScoreModel + ?Sized>(
    base: &M,
    u: &Point,
    sigma: NoiseLevel,
    tilt: &TiltParams,
) -> Result<Point> {
    let q = shift_map(u, sigma, tilt)?;
    debug_assert!(
        q.sigma_prime <= sigma,
        "sigma' {} > sigma {}",
        q.sigma_prime,
        sigma
    );
    base.denoiser(&q.u_prime, q.sigma_prime)
}

/// Score of the tilted density under the channel, evaluated through the base
/// score at the shifted query.
///
/// Finite for every `sigma` in `[0, 1]` except the purely linear tilt at
/// `sigma = 1`, which is rejected with [`Error::DivergentTiltScore`].
pub fn tilted_score<M: ScoreModel + ?Sized>(
    base: &M,
    u: &Point,
    sigma: NoiseLevel,
    tilt: &TiltParams,
) -> Result<Point> {
    tilt.v.expect_dim(u.dim())?;
    let s = tilt.s;
    if s == 0.0 && sigma.is_one() {
        if !tilt.v.is_zero() {
            return Err(Error::DivergentTiltScore);
        }
        return base.score(u, sigma);
    }
    let q = shift_map(u, sigma, tilt)?;
    let g = base.score(&q.u_prime, q.sigma_prime)?;
    g.expect_dim(u.dim())?;

    let var = sigma.variance();
    let scale = sigma.signal_scale();
    let tilted = radicand(1.0 - var + s * var);
    let widened = 1.0 + s * var;
    let coef_v = scale / tilted;
    let coef_u = s / tilted;
    let coef_g = (1.0 / widened.sqrt()) * (scale / tilted.sqrt());
    let out = (0..u.dim())
        .map(|i| coef_v * tilt.v[i] - coef_u * u[i] + coef_g * g[i])
        .collect();
    Point::new(out)
}

/// The same score written as `-(u - c u') / sigma^2 + k grad log q(u', sigma')`.
///
/// Divides by `sigma^2` and `sqrt(1 - sigma'^2)`, so only `sigma` strictly
/// inside `(0, 1)` is accepted. Kept as an independent check on
/// [`tilted_score`].
pub fn tilted_score_unreduced<M: ScoreModel + ?Sized>(
    base: &M,
    u: &Point,
    sigma: NoiseLevel,
    tilt: &TiltParams,
) -> Result<Point> {
    if sigma.is_zero() || sigma.is_one() {
        return Err(Error::DegenerateNoise {
            op: "tilted_score_unreduced",
            sigma: sigma.value(),
        });
    }
    let q = shift_map(u, sigma, tilt)?;
    let g = base.score(&q.u_prime, q.sigma_prime)?;
    g.expect_dim(u.dim())?;

    let var = sigma.variance();
    let var_p = q.sigma_prime.variance();
    let ratio = ((1.0 - var) / (1.0 - var_p)).sqrt();
    let coef_g = var_p * (1.0 - var).sqrt() / (var * (1.0 - var_p).sqrt());
    let out = (0..u.dim())
        .map(|i| -(u[i] - ratio * q.u_prime[i]) / var + coef_g * g[i])
        .collect();
    Point::new(out)
}

/// Score of a purely linear tilt `p~ ∝ p exp(v^T x)` at `(w, gamma)`:
/// `v / sqrt(1 - gamma^2) + grad log q(w + gamma^2 v / sqrt(1 - gamma^2), gamma)`.
pub fn linear_tilt_score<M: ScoreModel + ?Sized>(
    base: &M,
    w: &Point,
    gamma: NoiseLevel,
    v: &Point,
) -> Result<Point> {
    v.expect_dim(w.dim())?;
    if gamma.is_one() {
        return Err(Error::DivergentTiltScore);
    }
    let root = (1.0 - gamma.variance()).sqrt();
    let offset = gamma.variance() / root;
    let shifted = Point::new(
        w.iter()
            .zip(v.iter())
            .map(|(wi, vi)| wi + offset * vi)
            .collect(),
    )?;
    let g = base.score(&shifted, gamma)?;
    Point::new(
        v.iter()
            .zip(g.iter())
            .map(|(vi, gi)| vi / root + gi)
            .collect(),
    )
}

/// `rho = 1/sigma^2 - 1`, the precision-like coordinate of the quadratic term
/// in the reverse conditional.
pub fn rho_parametrization(sigma: NoiseLevel) -> Result<f64> {
    if sigma.is_zero() {
        return Err(Error::DegenerateNoise {
            op: "rho_parametrization",
            sigma: 0.0,
        });
    }
    Ok(1.0 / sigma.variance() - 1.0)
}

/// `sigma = 1 / sqrt(1 + rho)`.
pub fn rho_inverse(rho: f64) -> Result<NoiseLevel> {
    if rho.is_nan() || rho < 0.0 {
        return Err(Error::InvalidNoiseLevel(rho));
    }
    NoiseLevel::new(1.0 / (1.0 + rho).sqrt())
}

/// A quadratic tilt of strength `s` translates `rho` by `s`.
pub fn rho_shift(rho: f64, s: f64) -> f64 {
    rho + s
}

/// The tilted density `p*` presented as a [`ScoreModel`] backed only by
/// queries to `base`.
#[derive(Clone, Debug)]
pub struct TiltedModel<M> {
    base: M,
    tilt: TiltParams,
}

impl<M: ScoreModel> TiltedModel<M> {
    pub fn new(base: M, tilt: TiltParams) -> Result<Self> {
        tilt.v.expect_dim(base.dim())?;
        Ok(TiltedModel { base, tilt })
    }

    pub fn base(&self) -> &M {
        &self.base
    }

    pub fn tilt(&self) -> &TiltParams {
        &self.tilt
    }
}

impl<M: ScoreModel> ScoreModel for TiltedModel<M> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn score(&self, u: &Point, sigma: NoiseLevel) -> Result<Point> {
        tilted_score(&self.base, u, sigma, &self.tilt)
    }

    fn denoiser(&self, u: &Point, sigma: NoiseLevel) -> Result<Point> {
        tilted_denoiser(&self.base, u, sigma, &self.tilt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::GaussianMixture;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn pt(c: &[f64]) -> Point {
        Point::new(c.to_vec()).unwrap()
    }

    fn sig(x: f64) -> NoiseLevel {
        NoiseLevel::new(x).unwrap()
    }

    fn tilt(v: &[f64], s: f64) -> TiltParams {
        TiltParams::new(v.to_vec(), s).unwrap()
    }

    #[test]
    fn tilt_params_validation() {
        assert!(TiltParams::new(vec![1.0], -0.1).is_err());
        assert!(TiltParams::new(vec![f64::NAN], 0.0).is_err());
        let t = TiltParams::from_json_str(r#"{"v":[1.0,-2.0],"s":0.5}"#).unwrap();
        assert_eq!(t, tilt(&[1.0, -2.0], 0.5));
        let err = TiltParams::from_json_str(r#"{"v":[1.0],"s":-1}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("s: must be"), "{err}");
        assert!(TiltParams::from_json_str(r#"{"v":[1.0],"s":1,"q":2}"#).is_err());
        let round: TiltParams = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        assert_eq!(round, t);
    }

    #[test]
    fn shift_map_identity_tilt() {
        for s in [0.0, 0.3, 0.999, 1.0] {
            let u = pt(&[0.25, -1.5]);
            let q = shift_map(&u, sig(s), &TiltParams::identity(2)).unwrap();
            assert_eq!(q.u_prime, u);
            assert_eq!(q.sigma_prime, sig(s));
        }
    }

    #[test]
    fn shift_map_examples() {
        let q = shift_map(&pt(&[0.0]), sig(1.0), &tilt(&[2.0], 1.0)).unwrap();
        assert_relative_eq!(q.u_prime[0], 2f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(q.sigma_prime.value(), 0.5f64.sqrt(), epsilon = 1e-15);

        let q = shift_map(&pt(&[1.0]), sig(0.6), &tilt(&[0.5], 1.0)).unwrap();
        assert!((q.u_prime[0] - 0.840343).abs() < 5e-7);
        assert!((q.sigma_prime.value() - 0.514496).abs() < 5e-7);

        let q = shift_map(&pt(&[0.0]), sig(0.8), &tilt(&[1.0], 0.0)).unwrap();
        assert_relative_eq!(q.u_prime[0], 0.64 / 0.6, epsilon = 1e-14);
        assert_eq!(q.sigma_prime, sig(0.8));

        assert!(matches!(
            shift_map(&pt(&[0.0]), sig(1.0), &tilt(&[1.0], 0.0)),
            Err(Error::DegenerateShift)
        ));
        assert!(matches!(
            shift_map(&pt(&[0.0, 1.0]), sig(0.5), &tilt(&[1.0], 0.0)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn shift_map_at_zero_noise_is_identity() {
        let u = pt(&[0.7, -0.2]);
        let q = shift_map(&u, sig(0.0), &tilt(&[3.0, -1.0], 4.0)).unwrap();
        assert_eq!(q.u_prime, u);
        assert!(q.sigma_prime.is_zero());
    }

    #[test]
    fn tilted_denoiser_examples() {
        let base = GaussianMixture::new(
            vec![0.3, 0.7],
            vec![vec![-1.0], vec![2.0]],
            vec![vec![vec![1.0]], vec![vec![0.5]]],
        )
        .unwrap();
        let u = pt(&[0.9]);
        assert_eq!(
            tilted_denoiser(&base, &u, sig(0.4), &TiltParams::identity(1)).unwrap(),
            base.denoiser(&u, sig(0.4)).unwrap()
        );
        assert_eq!(
            tilted_denoiser(&base, &u, sig(0.0), &tilt(&[2.0], 3.0)).unwrap(),
            u
        );

        // N(0,1) tilted by (v=1, s=1) is N(1/2, 1/2); conjugate posterior mean
        // E[x|u] = m + a tau^2 (u - a m) / (a^2 tau^2 + sigma^2).
        let std1 = GaussianMixture::standard_normal(1);
        let (m, tau2, s) = (0.5, 0.5, 0.5f64);
        let a = (1.0 - s * s).sqrt();
        let expect = m + a * tau2 * (0.5 - a * m) / (a * a * tau2 + s * s);
        let got = tilted_denoiser(&std1, &pt(&[0.5]), sig(s), &tilt(&[1.0], 1.0)).unwrap();
        assert_relative_eq!(got[0], expect, epsilon = 1e-14);
        let q = shift_map(&pt(&[0.5]), sig(s), &tilt(&[1.0], 1.0)).unwrap();
        assert_relative_eq!(
            got[0],
            q.sigma_prime.signal_scale() * q.u_prime[0],
            epsilon = 1e-15
        );
    }

    #[test]
    fn tilted_score_endpoints() {
        let base = GaussianMixture::new(
            vec![0.3, 0.7],
            vec![vec![-1.0], vec![2.0]],
            vec![vec![vec![1.0]], vec![vec![0.5]]],
        )
        .unwrap();
        let u = pt(&[0.6]);
        let t = tilt(&[0.7], 2.0);
        let g = tilted_score(&base, &u, sig(0.0), &t).unwrap();
        let direct = 0.7 - 2.0 * 0.6 + base.score(&u, sig(0.0)).unwrap()[0];
        assert!((g[0] - direct).abs() < 1e-12);

        let g = tilted_score(&base, &u, sig(1.0), &t).unwrap();
        assert_eq!(g[0], -0.6);

        assert!(matches!(
            tilted_score(&base, &u, sig(1.0), &tilt(&[0.7], 0.0)),
            Err(Error::DivergentTiltScore)
        ));
        assert_eq!(
            tilted_score(&base, &u, sig(1.0), &TiltParams::identity(1)).unwrap(),
            pt(&[-0.6])
        );
    }

    #[test]
    fn tilted_score_gaussian_example() {
        // p* = N(1/2, 1/2); at sigma = 0.5 the noised law is N(sqrt(.75)/2, .75/2 + .25).
        let std1 = GaussianMixture::standard_normal(1);
        let expect = -(0.2 - 0.75f64.sqrt() * 0.5) / (0.75 * 0.5 + 0.25);
        let g = tilted_score(&std1, &pt(&[0.2]), sig(0.5), &tilt(&[1.0], 1.0)).unwrap();
        assert_relative_eq!(g[0], expect, epsilon = 1e-14);
        let g = tilted_score_unreduced(&std1, &pt(&[0.2]), sig(0.5), &tilt(&[1.0], 1.0)).unwrap();
        assert_relative_eq!(g[0], expect, epsilon = 1e-13);
    }

    #[test]
    fn unreduced_rejects_endpoints() {
        let std1 = GaussianMixture::standard_normal(1);
        for s in [0.0, 1.0] {
            assert!(matches!(
                tilted_score_unreduced(&std1, &pt(&[0.2]), sig(s), &tilt(&[1.0], 1.0)),
                Err(Error::DegenerateNoise { .. })
            ));
        }
        let u = pt(&[0.2]);
        assert_eq!(
            tilted_score_unreduced(&std1, &u, sig(0.5), &TiltParams::identity(1)).unwrap()[0],
            std1.score(&u, sig(0.5)).unwrap()[0]
        );
    }

    #[test]
    fn linear_tilt_score_examples() {
        let std1 = GaussianMixture::standard_normal(1);
        let g = linear_tilt_score(&std1, &pt(&[0.0]), sig(0.6), &pt(&[1.0])).unwrap();
        assert_relative_eq!(g[0], 0.8, epsilon = 1e-15);
        // Independent route: p~ = N(1, 1) noised is N(0.8, 1).
        assert_relative_eq!(g[0], -(0.0 - 0.8), epsilon = 1e-15);

        let w = pt(&[0.3]);
        assert_eq!(
            linear_tilt_score(&std1, &w, sig(0.4), &pt(&[0.0])).unwrap(),
            std1.score(&w, sig(0.4)).unwrap()
        );
        let g = linear_tilt_score(&std1, &w, sig(0.0), &pt(&[2.0])).unwrap();
        assert_eq!(g[0], 2.0 - 0.3);
        assert!(matches!(
            linear_tilt_score(&std1, &w, sig(1.0), &pt(&[1.0])),
            Err(Error::DivergentTiltScore)
        ));
    }

    #[test]
    fn rho_examples() {
        assert_eq!(rho_parametrization(sig(1.0)).unwrap(), 0.0);
        assert_eq!(rho_parametrization(sig(0.5)).unwrap(), 3.0);
        assert_eq!(rho_shift(3.0, 1.0), 4.0);
        assert_relative_eq!(
            rho_inverse(4.0).unwrap().value(),
            0.2f64.sqrt(),
            epsilon = 1e-16
        );
        assert_relative_eq!(
            rho_inverse(4.0).unwrap().value(),
            (0.25f64 / 1.25).sqrt(),
            epsilon = 1e-16
        );
        assert!(
            (rho_inverse(rho_parametrization(sig(0.37)).unwrap())
                .unwrap()
                .value()
                - 0.37)
                .abs()
                < 1e-14
        );
        assert!(rho_parametrization(sig(0.0)).is_err());
        assert!(rho_inverse(-0.5).is_err());
        assert_eq!(rho_inverse(f64::INFINITY).unwrap(), NoiseLevel::ZERO);
    }

    #[test]
    fn rho_shift_composes_additively_on_dyadics() {
        // Exact for values whose sums are representable.
        for (rho, s1, s2) in [(3.0, 0.5, 0.25), (0.0, 2.0, 1.5), (7.125, 0.375, 4.0)] {
            assert_eq!(rho_shift(rho_shift(rho, s1), s2), rho_shift(rho, s1 + s2));
        }
    }

    proptest! {
        #[test]
        fn rho_shift_composes(rho in 0.0..100.0f64, s1 in 0.0..10.0f64, s2 in 0.0..10.0f64) {
            let a = rho_shift(rho_shift(rho, s1), s2);
            let b = rho_shift(rho, s1 + s2);
            prop_assert!((a - b).abs() <= 2.0 * f64::EPSILON * a.max(1.0));
        }

        #[test]
        fn linear_shift_recovers_location_offset(
            u in -5.0..5.0f64, v in -3.0..3.0f64, sigma in 0.0..0.999f64,
        ) {
            let q = shift_map(&pt(&[u]), sig(sigma), &tilt(&[v], 0.0)).unwrap();
            prop_assert_eq!(q.sigma_prime, sig(sigma));
            let offset = sigma * sigma * v / (1.0 - sigma * sigma).sqrt();
            prop_assert!(((q.u_prime[0] - u) - offset).abs() <= 1e-12 * offset.abs().max(1.0));
        }

        #[test]
        fn time_shift_bounds(sigma in 0.0..=1.0f64, s in 0.0..20.0f64, u in -3.0..3.0f64) {
            let q = shift_map(&pt(&[u]), sig(sigma), &tilt(&[0.5], s)).unwrap();
            let sp = q.sigma_prime.value();
            prop_assert!(sp <= sigma);
            prop_assert!(sp <= (1.0 / (1.0 + s)).sqrt() + 1e-16);
        }
    }
}
