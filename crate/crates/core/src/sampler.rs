//! Reverse-diffusion sampling driven only by denoiser queries.
//!
//! Each chain starts from `N(0, I)` at the top of a decreasing noise schedule
//! and is moved level by level with the denoiser-based update
//!
//! ```text
//! u_lo = sqrt(1 - lo^2) x + (lo / hi) (u - sqrt(1 - hi^2) x)
//! ```
//!
//! where `x` is the denoiser output at `(u, hi)`. Sampling a tilted density
//! wraps the base model in [`TiltedModel`], so the base is only ever queried
//! at shifted `(u', sigma')`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::score::{NoiseLevel, Point, ScoreModel};
use crate::tilt::{TiltParams, TiltedModel};

/// Top of every generated schedule. Starting just below 1 keeps the purely
/// linear tilt away from its `sigma = 1` singularity.
pub const SCHEDULE_START: f64 = 1.0 - 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    LinearSigma,
    GeometricSigma,
}

/// Strictly decreasing noise levels, at least two.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<NoiseLevel>", into = "Vec<NoiseLevel>")]
pub struct NoiseSchedule {
    levels: Vec<NoiseLevel>,
}

impl NoiseSchedule {
    pub fn new(levels: Vec<NoiseLevel>) -> Result<Self> {
        if levels.len() < 2 {
            return Err(Error::InvalidSchedule(format!(
                "need at least 2 levels, got {}",
                levels.len()
            )));
        }
        if let Some(i) = levels.windows(2).position(|w| !(w[0] > w[1])) {
            return Err(Error::InvalidSchedule(format!(
                "levels must strictly decrease: levels[{i}] = {} then {}",
                levels[i],
                levels[i + 1]
            )));
        }
        Ok(NoiseSchedule { levels })
    }

    pub fn levels(&self) -> &[NoiseLevel] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

impl TryFrom<Vec<NoiseLevel>> for NoiseSchedule {
    type Error = Error;

    fn try_from(levels: Vec<NoiseLevel>) -> Result<Self> {
        NoiseSchedule::new(levels)
    }
}

impl From<NoiseSchedule> for Vec<NoiseLevel> {
    fn from(s: NoiseSchedule) -> Self {
        s.levels
    }
}

/// `steps` levels from [`SCHEDULE_START`] down to `sigma_min`, evenly spaced
/// in `sigma` or in `log sigma`. Geometric spacing needs `sigma_min > 0`.
pub fn make_schedule(kind: ScheduleKind, steps: usize, sigma_min: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::InvalidSchedule(format!(
            "steps: need at least 2, got {steps}"
        )));
    }
    if !(0.0..SCHEDULE_START).contains(&sigma_min) {
        return Err(Error::InvalidSchedule(format!(
            "sigma_min: must lie in [0, {SCHEDULE_START}), got {sigma_min}"
        )));
    }
    let last = (steps - 1) as f64;
    let raw: Vec<f64> = match kind {
        ScheduleKind::LinearSigma => (0..steps)
            .map(|i| SCHEDULE_START + (sigma_min - SCHEDULE_START) * (i as f64 / last))
            .collect(),
        ScheduleKind::GeometricSigma => {
            if sigma_min == 0.0 {
                return Err(Error::InvalidSchedule(
                    "sigma_min: geometric spacing needs sigma_min > 0".into(),
                ));
            }
            let (lo, hi) = (sigma_min.ln(), SCHEDULE_START.ln());
            (0..steps)
                .map(|i| (hi + (lo - hi) * (i as f64 / last)).exp())
                .collect()
        }
    };
    let mut levels = raw
        .into_iter()
        .map(NoiseLevel::new)
        .collect::<Result<Vec<_>>>()?;
    levels[0] = NoiseLevel::new(SCHEDULE_START)?;
    levels[steps - 1] = NoiseLevel::new(sigma_min)?;
    NoiseSchedule::new(levels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    #[default]
    Deterministic,
    Ancestral,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub schedule: NoiseSchedule,
    pub n_samples: usize,
    pub seed: u64,
    #[serde(default)]
    pub mode: SamplingMode,
}

impl SamplerConfig {
    pub fn new(
        schedule: NoiseSchedule,
        n_samples: usize,
        seed: u64,
        mode: SamplingMode,
    ) -> Result<Self> {
        let cfg = SamplerConfig {
            schedule,
            n_samples,
            seed,
            mode,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidSampler(
                "n_samples: must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// One reverse update from `sigma_hi` to `sigma_lo` given the denoiser output
/// `xhat` at `(u, sigma_hi)`.
///
/// Ancestral mode injects `eta * noise` with `eta = lo sqrt(1 - (lo/hi)^2)`
/// and shrinks the deterministic noise direction to `sqrt(lo^2 - eta^2) = lo^2 / hi`,
/// so the conditional variance at `sigma_lo` given the clean point stays `lo^2`.
/// `noise` is ignored in deterministic mode.
pub fn denoiser_step(
    u: &Point,
    sigma_hi: NoiseLevel,
    sigma_lo: NoiseLevel,
    xhat: &Point,
    noise: &Point,
    mode: SamplingMode,
) -> Result<Point> {
    if !(sigma_hi > sigma_lo) {
        return Err(Error::InvalidSchedule(format!(
            "step must lower the noise level: {sigma_hi} -> {sigma_lo}"
        )));
    }
    xhat.expect_dim(u.dim())?;
    let (hi, lo) = (sigma_hi.value(), sigma_lo.value());
    let (a_hi, a_lo) = (sigma_hi.signal_scale(), sigma_lo.signal_scale());
    let ratio = lo / hi;
    let out = match mode {
        SamplingMode::Deterministic => (0..u.dim())
            .map(|i| a_lo * xhat[i] + ratio * (u[i] - a_hi * xhat[i]))
            .collect(),
        SamplingMode::Ancestral => {
            noise.expect_dim(u.dim())?;
            let eta = lo * (1.0 - ratio * ratio).max(0.0).sqrt();
            let keep = ratio * ratio;
            (0..u.dim())
                .map(|i| a_lo * xhat[i] + keep * (u[i] - a_hi * xhat[i]) + eta * noise[i])
                .collect()
        }
    };
    Point::new(out)
}

/// RNG stream for chain `index`; chains are independent of evaluation order.
pub fn chain_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn standard_normal(rng: &mut ChaCha8Rng, dim: usize) -> Point {
    Point::from_vec_unchecked((0..dim).map(|_| StandardNormal.sample(rng)).collect())
}

/// Runs one chain through the schedule.
pub fn sample_chain<M: ScoreModel + ?Sized>(
    model: &M,
    cfg: &SamplerConfig,
    index: u64,
) -> Result<Point> {
    let dim = model.dim();
    let mut rng = chain_rng(cfg.seed, index);
    let mut u = standard_normal(&mut rng, dim);
    let zeros = Point::zeros(dim);
    for w in cfg.schedule.levels().windows(2) {
        let (hi, lo) = (w[0], w[1]);
        let xhat = model.denoiser(&u, hi)?;
        let noise = match cfg.mode {
            SamplingMode::Ancestral if !lo.is_zero() => standard_normal(&mut rng, dim),
            _ => zeros.clone(),
        };
        u = denoiser_step(&u, hi, lo, &xhat, &noise, cfg.mode)?;
    }
    Ok(u)
}

/// Draws `cfg.n_samples` points from the density behind `model`.
pub fn sample<M: ScoreModel + ?Sized>(model: &M, cfg: &SamplerConfig) -> Result<Vec<Point>> {
    cfg.validate()?;
    (0..cfg.n_samples as u64)
        .map(|i| sample_chain(model, cfg, i))
        .collect()
}

/// Draws from `p* ∝ p exp(v^T x - s |x|^2 / 2)` using only denoiser queries to `base`.
pub fn sample_tilted<M: ScoreModel>(
    base: M,
    tilt: &TiltParams,
    cfg: &SamplerConfig,
) -> Result<Vec<Point>> {
    let model = TiltedModel::new(base, tilt.clone())?;
    sample(&model, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::GaussianMixture;
    use approx::assert_relative_eq;

    fn pt(c: &[f64]) -> Point {
        Point::new(c.to_vec()).unwrap()
    }

    fn sig(x: f64) -> NoiseLevel {
        NoiseLevel::new(x).unwrap()
    }

    #[test]
    fn schedule_examples() {
        let s = make_schedule(ScheduleKind::LinearSigma, 3, 0.0).unwrap();
        let v: Vec<f64> = s.levels().iter().map(|l| l.value()).collect();
        assert_eq!(v[0], 0.9999);
        assert_relative_eq!(v[1], 0.49995, epsilon = 1e-15);
        assert_eq!(v[2], 0.0);

        let s = make_schedule(ScheduleKind::GeometricSigma, 2, 0.1).unwrap();
        assert_eq!(s.levels(), &[sig(0.9999), sig(0.1)]);

        let s = make_schedule(ScheduleKind::GeometricSigma, 5, 0.01).unwrap();
        let v: Vec<f64> = s.levels().iter().map(|l| l.value()).collect();
        for w in v.windows(3) {
            assert_relative_eq!(w[1] / w[0], w[2] / w[1], epsilon = 1e-12);
        }

        assert!(make_schedule(ScheduleKind::LinearSigma, 1, 0.0).is_err());
        assert!(make_schedule(ScheduleKind::GeometricSigma, 4, 0.0).is_err());
        assert!(make_schedule(ScheduleKind::LinearSigma, 4, 0.99995).is_err());
    }

    #[test]
    fn schedule_validation() {
        assert!(NoiseSchedule::new(vec![sig(0.5)]).is_err());
        assert!(NoiseSchedule::new(vec![sig(0.5), sig(0.5)]).is_err());
        assert!(NoiseSchedule::new(vec![sig(0.2), sig(0.5)]).is_err());
        assert!(serde_json::from_str::<NoiseSchedule>("[0.9, 0.1]").is_ok());
        assert!(serde_json::from_str::<NoiseSchedule>("[0.1, 0.9]").is_err());
    }

    #[test]
    fn step_examples() {
        let u = pt(&[0.3, -0.8]);
        let xhat = pt(&[1.0, 2.0]);
        let z = pt(&[0.5, 0.5]);
        for mode in [SamplingMode::Deterministic, SamplingMode::Ancestral] {
            assert_eq!(
                denoiser_step(&u, sig(0.4), sig(0.0), &xhat, &z, mode).unwrap(),
                xhat
            );
        }

        let (hi, lo) = (sig(0.8), sig(0.3));
        let on = pt(&[0.6 * 1.0, 0.6 * 2.0]);
        let next = denoiser_step(&on, hi, lo, &xhat, &z, SamplingMode::Deterministic).unwrap();
        let a_lo = (1.0 - 0.09f64).sqrt();
        assert_relative_eq!(next[0], a_lo, epsilon = 1e-15);
        assert_relative_eq!(next[1], 2.0 * a_lo, epsilon = 1e-15);

        assert!(denoiser_step(
            &u,
            sig(0.3),
            sig(0.3),
            &xhat,
            &z,
            SamplingMode::Deterministic
        )
        .is_err());
        assert!(denoiser_step(
            &u,
            sig(0.3),
            sig(0.5),
            &xhat,
            &z,
            SamplingMode::Deterministic
        )
        .is_err());
    }

    #[test]
    fn ancestral_step_preserves_conditional_variance() {
        // With the true clean point, u_hi = a_hi x + hi e and the step output is
        // a_lo x + (lo^2/hi) e + eta z: variance lo^2 around a_lo x.
        let (hi, lo) = (0.7f64, 0.4f64);
        let eta2 = lo * lo * (1.0 - (lo / hi).powi(2));
        let keep = lo * lo / hi;
        assert_relative_eq!(keep * keep + eta2, lo * lo, epsilon = 1e-15);
    }

    #[test]
    fn sampling_is_deterministic_for_a_seed() {
        let base = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![vec![-1.0], vec![1.0]],
            vec![vec![vec![0.2]], vec![vec![0.2]]],
        )
        .unwrap();
        let schedule = make_schedule(ScheduleKind::LinearSigma, 20, 0.0).unwrap();
        for mode in [SamplingMode::Deterministic, SamplingMode::Ancestral] {
            let cfg = SamplerConfig::new(schedule.clone(), 50, 7, mode).unwrap();
            let tilt = TiltParams::new(vec![0.5], 1.0).unwrap();
            let a = sample_tilted(&base, &tilt, &cfg).unwrap();
            let b = sample_tilted(&base, &tilt, &cfg).unwrap();
            assert_eq!(a, b);
            let other = SamplerConfig { seed: 8, ..cfg };
            assert_ne!(a, sample_tilted(&base, &tilt, &other).unwrap());
        }
    }

    #[test]
    fn chains_do_not_depend_on_batch_size() {
        let base = GaussianMixture::standard_normal(2);
        let schedule = make_schedule(ScheduleKind::GeometricSigma, 10, 0.01).unwrap();
        let small = SamplerConfig::new(schedule.clone(), 3, 11, SamplingMode::Ancestral).unwrap();
        let large = SamplerConfig::new(schedule, 10, 11, SamplingMode::Ancestral).unwrap();
        let a = sample(&base, &small).unwrap();
        let b = sample(&base, &large).unwrap();
        assert_eq!(a[..], b[..3]);
    }

    #[test]
    fn zero_samples_rejected() {
        let schedule = make_schedule(ScheduleKind::LinearSigma, 4, 0.0).unwrap();
        assert!(SamplerConfig::new(schedule, 0, 1, SamplingMode::Deterministic).is_err());
    }
}
