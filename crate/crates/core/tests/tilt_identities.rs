use std::sync::Mutex;

use proptest::prelude::*;
use tilted_score::oracle::{quad_denoiser, QuadratureModel, QuadratureSpec, TiltedLogDensity};
use tilted_score::sampler::{
    make_schedule, sample, sample_tilted, SamplerConfig, SamplingMode, ScheduleKind,
};
use tilted_score::tilt::{shift_map, tilted_denoiser, tilted_score};
use tilted_score::{
    GaussianMixture, NoiseLevel, Point, Result, ScoreModel, TiltParams, TiltedModel,
};

fn pt(c: &[f64]) -> Point {
    Point::new(c.to_vec()).unwrap()
}

fn sig(x: f64) -> NoiseLevel {
    NoiseLevel::new(x).unwrap()
}

fn mixture_2d() -> GaussianMixture {
    GaussianMixture::new(
        vec![0.4, 0.6],
        vec![vec![-1.0, 0.5], vec![1.5, -0.5]],
        vec![
            vec![vec![0.6, 0.2], vec![0.2, 0.5]],
            vec![vec![0.9, -0.3], vec![-0.3, 0.7]],
        ],
    )
    .unwrap()
}

#[test]
fn denoiser_identity_in_two_dimensions() {
    let base = mixture_2d();
    for (v, s) in [
        ([0.0, 0.0], 0.0),
        ([0.8, -0.4], 0.0),
        ([-0.5, 1.0], 0.5),
        ([0.3, 0.3], 2.0),
    ] {
        let tilt = TiltParams::new(v.to_vec(), s).unwrap();
        let exact = base.tilted(&tilt).unwrap();
        for sigma in [0.1, 0.4, 0.8] {
            for u in [[-2.0, 1.0], [0.0, 0.0], [1.5, -1.5]] {
                let u = pt(&u);
                let spec =
                    QuadratureSpec::posterior_box(&exact, &u, sig(sigma), 10.0, 256).unwrap();
                let q = quad_denoiser(&exact, &u, sig(sigma), &spec).unwrap();
                assert!(!q.truncated());
                let got = tilted_denoiser(&base, &u, sig(sigma), &tilt).unwrap();
                for i in 0..2 {
                    assert!(
                        (got[i] - q.value[i]).abs() < 1e-6,
                        "tilt ({v:?},{s}) sigma {sigma} u {u:?}: {got:?} vs {:?}",
                        q.value
                    );
                }
            }
        }
    }
}

#[test]
fn tilted_score_of_quadrature_model_matches_unnormalized_tilt() {
    // Base known only through quadrature; tilt applied either via the shift
    // identity or by multiplying the density directly.
    let base = mixture_2d();
    let spec = QuadratureSpec::new(vec![-9.0, -9.0], vec![9.0, 9.0], 400).unwrap();
    let tilt = TiltParams::new(vec![0.5, -0.25], 1.0).unwrap();
    let via_shift = TiltedModel::new(
        QuadratureModel::new(&base, spec.clone()).unwrap(),
        tilt.clone(),
    )
    .unwrap();
    let direct = QuadratureModel::new(TiltedLogDensity::new(&base, tilt).unwrap(), spec).unwrap();
    for sigma in [0.2, 0.5, 0.9] {
        for u in [[-1.0, 0.5], [0.7, 0.7]] {
            let u = pt(&u);
            let a = via_shift.score(&u, sig(sigma)).unwrap();
            let b = direct.score(&u, sig(sigma)).unwrap();
            for i in 0..2 {
                assert!(
                    (a[i] - b[i]).abs() < 1e-6 * b[i].abs().max(1.0),
                    "{a:?} vs {b:?}"
                );
            }
        }
    }
}

/// Records every noise level the base model is queried at.
struct Recording<M> {
    inner: M,
    seen: Mutex<Vec<(f64, f64)>>,
    outer: Mutex<f64>,
}

impl<M: ScoreModel> ScoreModel for Recording<M> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn score(&self, u: &Point, sigma: NoiseLevel) -> Result<Point> {
        self.inner.score(u, sigma)
    }

    fn denoiser(&self, u: &Point, sigma: NoiseLevel) -> Result<Point> {
        let outer = *self.outer.lock().unwrap();
        self.seen.lock().unwrap().push((outer, sigma.value()));
        self.inner.denoiser(u, sigma)
    }
}

/// Publishes the outer noise level before delegating to the tilted model.
struct Outer<'a, M> {
    tilted: TiltedModel<&'a Recording<M>>,
}

impl<M: ScoreModel> ScoreModel for Outer<'_, M> {
    fn dim(&self) -> usize {
        self.tilted.dim()
    }

    fn score(&self, u: &Point, sigma: NoiseLevel) -> Result<Point> {
        self.tilted.score(u, sigma)
    }

    fn denoiser(&self, u: &Point, sigma: NoiseLevel) -> Result<Point> {
        *self.tilted.base().outer.lock().unwrap() = sigma.value();
        self.tilted.denoiser(u, sigma)
    }
}

#[test]
fn sampler_queries_base_at_reduced_noise() {
    let rec = Recording {
        inner: GaussianMixture::standard_normal(2),
        seen: Mutex::new(Vec::new()),
        outer: Mutex::new(f64::NAN),
    };
    let tilt = TiltParams::new(vec![0.5, -1.0], 1.5).unwrap();
    let model = Outer {
        tilted: TiltedModel::new(&rec, tilt.clone()).unwrap(),
    };
    let schedule = make_schedule(ScheduleKind::LinearSigma, 50, 0.0).unwrap();
    let cfg = SamplerConfig::new(schedule, 20, 7, SamplingMode::Ancestral).unwrap();
    sample(&model, &cfg).unwrap();

    let seen = rec.seen.lock().unwrap();
    assert_eq!(seen.len(), 20 * (cfg.schedule.levels().len() - 1));
    for &(outer, inner) in seen.iter() {
        let bound = (1.0 / (1.0 + tilt.s())).sqrt();
        assert!(
            inner <= outer && inner <= bound,
            "sigma' {inner} at sigma {outer}"
        );
    }
}

#[test]
fn gaussian_sampler_end_to_end_2d() {
    let base =
        GaussianMixture::gaussian(vec![0.5, -0.5], vec![vec![1.0, 0.3], vec![0.3, 0.6]]).unwrap();
    let tilt = TiltParams::new(vec![0.4, 0.2], 0.5).unwrap();
    let exact = base.tilted(&tilt).unwrap();
    let schedule = make_schedule(ScheduleKind::LinearSigma, 200, 0.0).unwrap();
    for mode in [SamplingMode::Deterministic, SamplingMode::Ancestral] {
        let cfg = SamplerConfig::new(schedule.clone(), 10_000, 11, mode).unwrap();
        let draws = sample_tilted(&base, &tilt, &cfg).unwrap();
        let m = tilted_score::oracle::mc_moments(&draws).unwrap();
        let (want_mean, want_cov) = (exact.mean(), exact.covariance());
        for i in 0..2 {
            assert!(
                (m.mean[i] - want_mean[i]).abs() < 0.05,
                "{mode:?} mean {:?} vs {want_mean:?}",
                m.mean
            );
            for j in 0..2 {
                assert!(
                    (m.cov[i][j] - want_cov[i][j]).abs() < 0.05,
                    "{mode:?} cov {:?} vs {want_cov:?}",
                    m.cov
                );
            }
        }
    }
}

#[test]
fn sampling_is_reproducible_and_chains_are_order_independent() {
    let base = GaussianMixture::standard_normal(1);
    let tilt = TiltParams::new(vec![1.0], 0.5).unwrap();
    let schedule = make_schedule(ScheduleKind::GeometricSigma, 40, 1e-3).unwrap();
    let small = SamplerConfig::new(schedule.clone(), 5, 3, SamplingMode::Ancestral).unwrap();
    let large = SamplerConfig::new(schedule, 50, 3, SamplingMode::Ancestral).unwrap();
    let a = sample_tilted(&base, &tilt, &small).unwrap();
    let b = sample_tilted(&base, &tilt, &small).unwrap();
    let c = sample_tilted(&base, &tilt, &large).unwrap();
    assert_eq!(a, b);
    assert_eq!(a[..], c[..5]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn tilted_denoiser_equals_base_at_shifted_query(
        u in prop::collection::vec(-4.0..4.0f64, 2),
        v in prop::collection::vec(-2.0..2.0f64, 2),
        s in 0.0..4.0f64,
        sigma in 0.0..0.999f64,
    ) {
        let base = mixture_2d();
        let tilt = TiltParams::new(v, s).unwrap();
        let u = pt(&u);
        let q = shift_map(&u, sig(sigma), &tilt).unwrap();
        let got = tilted_denoiser(&base, &u, sig(sigma), &tilt).unwrap();
        prop_assert_eq!(got, base.denoiser(&q.u_prime, q.sigma_prime).unwrap());
    }

    #[test]
    fn tilted_score_matches_exact_tilt(
        u in prop::collection::vec(-4.0..4.0f64, 2),
        v in prop::collection::vec(-2.0..2.0f64, 2),
        s in 0.0..4.0f64,
        sigma in 0.0..0.99f64,
    ) {
        let base = mixture_2d();
        let tilt = TiltParams::new(v, s).unwrap();
        let exact = base.tilted(&tilt).unwrap();
        let u = pt(&u);
        let a = tilted_score(&base, &u, sig(sigma), &tilt).unwrap();
        let b = exact.score(&u, sig(sigma)).unwrap();
        for i in 0..2 {
            prop_assert!((a[i] - b[i]).abs() <= 1e-9 * b[i].abs().max(1.0), "{:?} vs {:?}", a, b);
        }
    }
}
