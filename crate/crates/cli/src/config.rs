//! Experiment configuration files.
//!
//! JSON, unknown keys rejected. Relative paths inside a config (`base_model`
//! given as a file, `output_path`) resolve against the config's directory.
//!
//! ```json
//! {
//!   "base_model": {"weights": [0.3, 0.7], "means": [[-1], [2]], "covariances": [[[1]], [[0.5]]]},
//!   "tilt": {"v": [0.7], "s": 2.0},
//!   "sigma_grid": [0.05, 0.5, 0.95],
//!   "u_grid": {"lower": [-4], "upper": [4], "points_per_axis": 33},
//!   "quadrature": {"points_per_axis": 1024, "width": 10},
//!   "sampler": {"schedule": {"kind": "linear_sigma", "steps": 200, "sigma_min": 0},
//!               "n_samples": 50000, "seed": 42, "mode": "deterministic"},
//!   "tolerance": 1e-6,
//!   "output_path": "out/run.csv"
//! }
//! ```
//!
//! Everything except `base_model`, `tilt` and `output_path` has a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tilted_score::oracle::{QuadratureSpec, MAX_QUAD_DIM};
use tilted_score::sampler::{make_schedule, SamplerConfig, SamplingMode, ScheduleKind};
use tilted_score::{GaussianMixture, NoiseLevel, Point, TiltParams};

use crate::error::{CliError, Result};

/// Box of evaluation points, `points_per_axis` evenly spaced per axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub points_per_axis: usize,
}

impl GridSpec {
    fn default_for(dim: usize) -> Self {
        GridSpec {
            lower: vec![-4.0; dim],
            upper: vec![4.0; dim],
            points_per_axis: 33,
        }
    }

    fn validate(&self, dim: usize) -> std::result::Result<(), String> {
        if self.lower.len() != dim || self.upper.len() != dim {
            return Err(format!(
                "lower/upper must have length {dim}, got {}/{}",
                self.lower.len(),
                self.upper.len()
            ));
        }
        if self.points_per_axis == 0 {
            return Err("points_per_axis: must be at least 1".into());
        }
        for (i, (lo, hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(format!(
                    "axis {i}: need finite lower <= upper, got [{lo}, {hi}]"
                ));
            }
        }
        Ok(())
    }

    /// Grid points in lexicographic order, last axis fastest.
    pub fn points(&self) -> Vec<Point> {
        let d = self.lower.len();
        let n = self.points_per_axis;
        let axis = |i: usize, k: usize| {
            if n == 1 {
                self.lower[i]
            } else {
                self.lower[i] + (self.upper[i] - self.lower[i]) * k as f64 / (n - 1) as f64
            }
        };
        let total = n.pow(d as u32);
        (0..total)
            .map(|mut flat| {
                let mut coords = vec![0.0; d];
                for i in (0..d).rev() {
                    coords[i] = axis(i, flat % n);
                    flat /= n;
                }
                Point::new(coords).expect("grid coordinates are finite")
            })
            .collect()
    }
}

/// Quadrature oracle settings. Without an explicit box, each query gets a
/// box covering every component posterior at `mean ± width * std`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadratureConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points_per_axis: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<Vec<f64>>,
}

impl QuadratureConfig {
    pub const DEFAULT_WIDTH: f64 = 10.0;

    fn resolve(mut self, dim: usize) -> std::result::Result<Self, String> {
        self.points_per_axis.get_or_insert(match dim {
            1 => 1024,
            2 => 256,
            _ => 64,
        });
        if self.lower.is_some() != self.upper.is_some() {
            return Err("lower and upper must be given together".into());
        }
        match (&self.lower, &self.upper) {
            (Some(_), Some(_)) => {
                if self.width.is_some() {
                    return Err("width applies only without an explicit lower/upper box".into());
                }
                self.fixed_box()
                    .expect("box present")
                    .map_err(|e| e.to_string())?;
                if self.lower.as_ref().map(Vec::len) != Some(dim) {
                    return Err(format!("lower/upper must have length {dim}"));
                }
            }
            _ => {
                let w = *self.width.get_or_insert(Self::DEFAULT_WIDTH);
                if !(w > 0.0 && w.is_finite()) {
                    return Err(format!("width: must be positive, got {w}"));
                }
                let n = self.points_per_axis.expect("defaulted above");
                QuadratureSpec::new(vec![-1.0; dim], vec![1.0; dim], n)
                    .map_err(|e| e.to_string())?;
            }
        }
        Ok(self)
    }

    fn fixed_box(&self) -> Option<tilted_score::Result<QuadratureSpec>> {
        match (&self.lower, &self.upper) {
            (Some(lo), Some(hi)) => Some(QuadratureSpec::new(
                lo.clone(),
                hi.clone(),
                self.points_per_axis.expect("resolved"),
            )),
            _ => None,
        }
    }

    /// Integration box for the density `target` queried at `(u, sigma)`.
    pub fn spec_for(
        &self,
        target: &GaussianMixture,
        u: &Point,
        sigma: NoiseLevel,
    ) -> tilted_score::Result<QuadratureSpec> {
        match self.fixed_box() {
            Some(spec) => spec,
            None => QuadratureSpec::posterior_box(
                target,
                u,
                sigma,
                self.width.expect("resolved"),
                self.points_per_axis.expect("resolved"),
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    #[serde(default)]
    pub sigma_min: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    pub schedule: ScheduleConfig,
    pub n_samples: usize,
    pub seed: u64,
    #[serde(default)]
    pub mode: SamplingMode,
}

impl SamplerSection {
    pub fn build(&self) -> tilted_score::Result<SamplerConfig> {
        let schedule = make_schedule(
            self.schedule.kind,
            self.schedule.steps,
            self.schedule.sigma_min,
        )?;
        SamplerConfig::new(schedule, self.n_samples, self.seed, self.mode)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    base_model: Value,
    tilt: TiltParams,
    #[serde(default)]
    sigma_grid: Option<Vec<NoiseLevel>>,
    #[serde(default)]
    u_grid: Option<GridSpec>,
    #[serde(default)]
    quadrature: QuadratureConfig,
    #[serde(default)]
    sampler: Option<SamplerSection>,
    #[serde(default)]
    tolerance: Option<f64>,
    #[serde(default)]
    fd_step: Option<f64>,
    output_path: PathBuf,
}

/// A fully resolved configuration. This is what every report embeds.
#[derive(Clone, Debug, Serialize)]
pub struct ExperimentConfig {
    pub base_model: GaussianMixture,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_model_file: Option<PathBuf>,
    pub tilt: TiltParams,
    pub sigma_grid: Vec<NoiseLevel>,
    pub u_grid: GridSpec,
    pub quadrature: QuadratureConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sampler: Option<SamplerSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    pub fd_step: f64,
    pub output_path: PathBuf,
    /// The file this config was loaded from.
    #[serde(skip)]
    pub source: Option<PathBuf>,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub tolerance: Option<f64>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

pub const DEFAULT_FD_STEP: f64 = 1e-4;

pub fn default_sigma_grid() -> Vec<NoiseLevel> {
    (1..=19)
        .map(|i| NoiseLevel::new(0.05 * i as f64).expect("in range"))
        .collect()
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::ReadConfig {
            path: path.to_path_buf(),
            source,
        })?;
        let dir = path.parent().unwrap_or(Path::new(""));
        let mut cfg = Self::from_json_str(&text, dir).map_err(|msg| CliError::Config {
            path: path.to_path_buf(),
            msg,
        })?;
        cfg.apply(overrides).map_err(|msg| CliError::Config {
            path: path.to_path_buf(),
            msg,
        })?;
        cfg.source = Some(path.to_path_buf());
        Ok(cfg)
    }

    /// Parses and validates a config. Relative paths resolve against `dir`.
    pub fn from_json_str(text: &str, dir: &Path) -> std::result::Result<Self, String> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let raw: RawConfig = serde_path_to_error::deserialize(de).map_err(|e| field_error(&e))?;

        let (base_model, base_model_file) = match raw.base_model {
            Value::String(file) => {
                let file = dir.join(file);
                let m = GaussianMixture::from_json_file(&file)
                    .map_err(|e| format!("base_model: {e}"))?;
                (m, Some(file))
            }
            value @ Value::Object(_) => {
                let m = serde_path_to_error::deserialize(value)
                    .map_err(|e| format!("base_model.{}", field_error(&e)))?;
                (m, None)
            }
            _ => return Err("base_model: expected a mixture object or a file path".into()),
        };
        let dim = base_model.dim();

        if raw.tilt.dim() != dim {
            return Err(format!(
                "tilt.v: expected length {dim}, got {}",
                raw.tilt.dim()
            ));
        }
        let sigma_grid = raw.sigma_grid.unwrap_or_else(default_sigma_grid);
        if sigma_grid.is_empty() {
            return Err("sigma_grid: must not be empty".into());
        }
        let u_grid = raw.u_grid.unwrap_or_else(|| GridSpec::default_for(dim));
        u_grid.validate(dim).map_err(|e| format!("u_grid: {e}"))?;
        let quadrature = raw
            .quadrature
            .resolve(dim)
            .map_err(|e| format!("quadrature: {e}"))?;
        if let Some(s) = &raw.sampler {
            s.build().map_err(|e| format!("sampler: {e}"))?;
            if s.n_samples < 2 {
                return Err(format!(
                    "sampler.n_samples: need at least 2 for moments, got {}",
                    s.n_samples
                ));
            }
        }
        if let Some(t) = raw.tolerance {
            check_tolerance(t).map_err(|e| format!("tolerance: {e}"))?;
        }
        let fd_step = raw.fd_step.unwrap_or(DEFAULT_FD_STEP);
        if !(fd_step > 0.0 && fd_step.is_finite()) {
            return Err(format!("fd_step: must be positive, got {fd_step}"));
        }

        Ok(ExperimentConfig {
            base_model,
            base_model_file,
            tilt: raw.tilt,
            sigma_grid,
            u_grid,
            quadrature,
            sampler: raw.sampler,
            tolerance: raw.tolerance,
            fd_step,
            output_path: dir.join(raw.output_path),
            source: None,
        })
    }

    fn apply(&mut self, o: &Overrides) -> std::result::Result<(), String> {
        if let Some(t) = o.tolerance {
            check_tolerance(t).map_err(|e| format!("--tolerance: {e}"))?;
            self.tolerance = Some(t);
        }
        if let Some(seed) = o.seed {
            if let Some(s) = &mut self.sampler {
                s.seed = seed;
            }
        }
        if let Some(out) = &o.out {
            self.output_path = out.clone();
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.base_model.dim()
    }

    pub fn seed(&self) -> Option<u64> {
        self.sampler.as_ref().map(|s| s.seed)
    }

    /// The exactly tilted base, used as ground truth.
    pub fn exact_tilt(&self) -> tilted_score::Result<GaussianMixture> {
        self.base_model.tilted(&self.tilt)
    }

    /// Fails unless the quadrature oracle can handle this dimension and every
    /// grid level lies strictly inside `(0, 1)`.
    pub fn require_oracle_grid(&self) -> std::result::Result<(), String> {
        if self.dim() > MAX_QUAD_DIM {
            return Err(format!(
                "base_model: quadrature oracle supports d <= {MAX_QUAD_DIM}, got d = {}",
                self.dim()
            ));
        }
        if let Some(i) = self
            .sigma_grid
            .iter()
            .position(|s| s.is_zero() || s.is_one())
        {
            return Err(format!(
                "sigma_grid[{i}]: verification needs 0 < sigma < 1, got {}",
                self.sigma_grid[i]
            ));
        }
        Ok(())
    }
}

fn check_tolerance(t: f64) -> std::result::Result<(), String> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(format!("must be positive and finite, got {t}"))
    }
}

fn field_error(e: &serde_path_to_error::Error<serde_json::Error>) -> String {
    let path = e.path().to_string();
    if path == "." {
        e.inner().to_string()
    } else {
        format!("{path}: {}", e.inner())
    }
}
