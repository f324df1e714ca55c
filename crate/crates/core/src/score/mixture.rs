//! Gaussian mixtures: the conjugate base family with closed-form noised
//! marginals, scores, denoisers and exact exponential tilts.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::{NoiseLevel, Point, ScoreModel};
use crate::error::{Error, Result};
use crate::tilt::TiltParams;

const WEIGHT_SUM_TOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-12;

/// Wire form: `{"weights":[...], "means":[[...]], "covariances":[[[...]]]}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug)]
struct Component {
    mean: Vec<f64>,
    /// Row-major `d x d`.
    cov: Vec<f64>,
    /// Eigenvalues of `cov`, all positive.
    eigvals: Vec<f64>,
    /// Row-major; column `j` is the eigenvector for `eigvals[j]`.
    eigvecs: Vec<f64>,
    /// `eigvecs^T mean`.
    mean_rot: Vec<f64>,
    /// `sum log eigvals`.
    log_det: f64,
}

impl Component {
    fn new(mean: Vec<f64>, cov: Vec<f64>, dim: usize) -> std::result::Result<Self, String> {
        let m = DMatrix::from_row_slice(dim, dim, &cov);
        let eig = SymmetricEigen::new((&m + m.transpose()) * 0.5);
        let eigvals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        let min = eigvals.iter().copied().fold(f64::INFINITY, f64::min);
        if !(min > 0.0) || eigvals.iter().any(|l| !l.is_finite()) {
            return Err(format!("not positive definite (smallest eigenvalue {min})"));
        }
        let mut eigvecs = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..dim {
                eigvecs[i * dim + j] = eig.eigenvectors[(i, j)];
            }
        }
        let mut c = Component {
            mean,
            cov,
            eigvals,
            eigvecs,
            mean_rot: Vec::new(),
            log_det: 0.0,
        };
        c.log_det = c.eigvals.iter().map(|l| l.ln()).sum();
        c.mean_rot = c.to_eigenbasis(&c.mean);
        Ok(c)
    }

    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn to_eigenbasis(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|j| (0..d).map(|i| self.eigvecs[i * d + j] * x[i]).sum())
            .collect()
    }

    /// `(x - mean)^T cov^{-1} (x - mean)` without allocating.
    fn mahalanobis(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let mut total = 0.0;
        for j in 0..d {
            let mut proj = 0.0;
            for i in 0..d {
                proj += self.eigvecs[i * d + j] * (x[i] - self.mean[i]);
            }
            total += proj * proj / self.eigvals[j];
        }
        total
    }

    fn rotate_back_into(&self, y: &[f64], scale: f64, out: &mut [f64]) {
        let d = self.dim();
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.eigvecs[i * d..(i + 1) * d];
            *o += scale * row.iter().zip(y).map(|(q, y)| q * y).sum::<f64>();
        }
    }
}

/// Per-component quantities of the noised marginal at one `(u, sigma)`.
struct Noised {
    /// `log w_k + log N(u; a mu_k, a^2 Sigma_k + sigma^2 I)`.
    log_joint: f64,
    /// `u - a mu_k` in the eigenbasis.
    resid: Vec<f64>,
    /// Eigenvalues of `a^2 Sigma_k + sigma^2 I`.
    var: Vec<f64>,
}

/// A finite mixture of Gaussians with dense symmetric positive-definite covariances.
#[derive(Clone, Debug)]
pub struct GaussianMixture {
    dim: usize,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    components: Vec<Component>,
}

impl GaussianMixture {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covariances: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::InvalidMixture(
                "weights: mixture needs at least one component".into(),
            ));
        }
        if means.len() != k {
            return Err(Error::InvalidMixture(format!(
                "means: expected {k} entries, found {}",
                means.len()
            )));
        }
        if covariances.len() != k {
            return Err(Error::InvalidMixture(format!(
                "covariances: expected {k} entries, found {}",
                covariances.len()
            )));
        }
        for (i, &w) in weights.iter().enumerate() {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::InvalidMixture(format!(
                    "weights[{i}]: must be positive and finite, got {w}"
                )));
            }
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidMixture(format!(
                "weights: sum to {total}, expected 1"
            )));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::InvalidMixture(
                "means[0]: dimension must be at least 1".into(),
            ));
        }
        let mut components = Vec::with_capacity(k);
        for (i, (mean, cov)) in means.into_iter().zip(covariances).enumerate() {
            if mean.len() != dim {
                return Err(Error::InvalidMixture(format!(
                    "means[{i}]: expected dimension {dim}, found {}",
                    mean.len()
                )));
            }
            if mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::InvalidMixture(format!(
                    "means[{i}]: non-finite entry"
                )));
            }
            let flat = flatten_square(&cov, dim)
                .map_err(|e| Error::InvalidMixture(format!("covariances[{i}]: {e}")))?;
            components.push(
                Component::new(mean, flat, dim)
                    .map_err(|e| Error::InvalidMixture(format!("covariances[{i}]: {e}")))?,
            );
        }
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(GaussianMixture {
            dim,
            weights,
            log_weights,
            components,
        })
    }

    /// Single Gaussian `N(mean, cov)`.
    pub fn gaussian(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> Result<Self> {
        GaussianMixture::new(vec![1.0], vec![mean], vec![cov])
    }

    pub fn standard_normal(dim: usize) -> Self {
        let cov = (0..dim)
            .map(|i| (0..dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        GaussianMixture::gaussian(vec![0.0; dim], cov).expect("identity covariance is valid")
    }

    pub fn from_spec(spec: MixtureSpec) -> Result<Self> {
        GaussianMixture::new(spec.weights, spec.means, spec.covariances)
    }

    pub fn to_spec(&self) -> MixtureSpec {
        MixtureSpec {
            weights: self.weights.clone(),
            means: self.components.iter().map(|c| c.mean.clone()).collect(),
            covariances: self.covariances(),
        }
    }

    /// Parses the JSON wire form. Syntax errors carry serde's line/column;
    /// invariant violations name the field and the line it starts on.
    pub fn from_json_str(json: &str) -> Result<Self> {
        let spec: MixtureSpec = serde_json::from_str(json)?;
        GaussianMixture::from_spec(spec).map_err(|e| match e {
            Error::InvalidMixture(msg) => {
                let field = msg.split(['[', ':']).next().unwrap_or_default();
                let key = format!("\"{field}\"");
                match json.lines().position(|l| l.contains(&key)) {
                    Some(line) => Error::InvalidMixture(format!("{msg} (line {})", line + 1)),
                    None => Error::InvalidMixture(msg),
                }
            }
            other => other,
        })
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidMixture(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_spec()).expect("mixture spec serializes")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> Vec<Vec<f64>> {
        self.components.iter().map(|c| c.mean.clone()).collect()
    }

    pub fn covariances(&self) -> Vec<Vec<Vec<f64>>> {
        self.components
            .iter()
            .map(|c| c.cov.chunks(self.dim).map(|r| r.to_vec()).collect())
            .collect()
    }

    /// Mixture mean `sum_k w_k mu_k`.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for (w, c) in self.weights.iter().zip(&self.components) {
            for (mi, ci) in m.iter_mut().zip(&c.mean) {
                *mi += w * ci;
            }
        }
        m
    }

    /// Mixture covariance `sum_k w_k (Sigma_k + mu_k mu_k^T) - m m^T`.
    pub fn covariance(&self) -> Vec<Vec<f64>> {
        let d = self.dim;
        let m = self.mean();
        let mut out = vec![vec![0.0; d]; d];
        for (w, c) in self.weights.iter().zip(&self.components) {
            for i in 0..d {
                for j in 0..d {
                    out[i][j] += w * (c.cov[i * d + j] + (c.mean[i] - m[i]) * (c.mean[j] - m[j]));
                }
            }
        }
        out
    }

    /// Normalized log-density `log p(x)`.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let norm = self.dim as f64 * (2.0 * PI).ln();
        let mut max = f64::NEG_INFINITY;
        let mut acc = 0.0;
        for (lw, c) in self.log_weights.iter().zip(&self.components) {
            let term = lw - 0.5 * (c.mahalanobis(x) + c.log_det + norm);
            if term > max {
                acc = acc * (max - term).exp() + 1.0;
                max = term;
            } else {
                acc += (term - max).exp();
            }
        }
        max + acc.ln()
    }

    /// Mixture law of `U = sqrt(1 - sigma^2) X + sigma Z`: weights kept,
    /// means scaled by `sqrt(1 - sigma^2)`, covariances `(1 - sigma^2) Sigma_k + sigma^2 I`.
    pub fn noised(&self, sigma: NoiseLevel) -> GaussianMixture {
        if sigma.is_zero() {
            return self.clone();
        }
        let d = self.dim;
        let a = sigma.signal_scale();
        let (a2, s2) = (1.0 - sigma.variance(), sigma.variance());
        let components = self
            .components
            .iter()
            .map(|c| {
                let mean = c.mean.iter().map(|m| a * m).collect();
                let mut cov: Vec<f64> = c.cov.iter().map(|x| a2 * x).collect();
                for i in 0..d {
                    cov[i * d + i] += s2;
                }
                Component::new(mean, cov, d).expect("noised covariance stays positive definite")
            })
            .collect();
        GaussianMixture {
            dim: d,
            weights: self.weights.clone(),
            log_weights: self.log_weights.clone(),
            components,
        }
    }

    /// Exact law of `p*(x) ∝ p(x) exp(v^T x - s |x|^2 / 2)`.
    ///
    /// Component `k` becomes `N((Sigma_k^{-1} + s I)^{-1} (Sigma_k^{-1} mu_k + v), (Sigma_k^{-1} + s I)^{-1})`
    /// and its weight is multiplied by the component's tilt normalizer
    /// `E_k[exp(v^T x - s |x|^2 / 2)]` before renormalizing.
    ///
    /// Extreme tilts can drive a weight below the smallest positive `f64`;
    /// the log-weight is kept so responsibilities stay exact, but such a
    /// mixture will not survive a JSON round trip.
    pub fn tilted(&self, tilt: &TiltParams) -> Result<GaussianMixture> {
        tilt.v().expect_dim(self.dim)?;
        if tilt.is_identity() {
            return Ok(self.clone());
        }
        let d = self.dim;
        let s = tilt.s();
        let v = tilt.v().as_slice();
        let mut log_weights = Vec::with_capacity(self.components.len());
        let mut components = Vec::with_capacity(self.components.len());
        for (lw, c) in self.log_weights.iter().zip(&self.components) {
            let v_rot = c.to_eigenbasis(v);
            let mut log_norm = 0.0;
            for i in 0..d {
                let (lam, mu, vi) = (c.eigvals[i], c.mean_rot[i], v_rot[i]);
                let shrink = 1.0 + s * lam;
                log_norm += -0.5 * shrink.ln()
                    + 0.5 * (2.0 * mu * vi + lam * vi * vi - s * mu * mu) / shrink;
            }
            log_weights.push(lw + log_norm);

            let comp = if s == 0.0 {
                let mut mean = c.mean.clone();
                for i in 0..d {
                    mean[i] += (0..d).map(|j| c.cov[i * d + j] * v[j]).sum::<f64>();
                }
                Component::new(mean, c.cov.clone(), d).map_err(Error::InvalidMixture)?
            } else {
                let new_eig: Vec<f64> = c.eigvals.iter().map(|l| l / (1.0 + s * l)).collect();
                let mean_rot: Vec<f64> = (0..d)
                    .map(|i| (c.mean_rot[i] + c.eigvals[i] * v_rot[i]) / (1.0 + s * c.eigvals[i]))
                    .collect();
                let mut mean = vec![0.0; d];
                c.rotate_back_into(&mean_rot, 1.0, &mut mean);
                let mut cov = vec![0.0; d * d];
                for i in 0..d {
                    for j in 0..=i {
                        let x: f64 = (0..d)
                            .map(|m| c.eigvecs[i * d + m] * new_eig[m] * c.eigvecs[j * d + m])
                            .sum();
                        cov[i * d + j] = x;
                        cov[j * d + i] = x;
                    }
                }
                Component::new(mean, cov, d).map_err(Error::InvalidMixture)?
            };
            components.push(comp);
        }
        let lse = log_sum_exp(&log_weights);
        if !lse.is_finite() {
            return Err(Error::InvalidTilt("tilt normalizer overflows".into()));
        }
        for lw in &mut log_weights {
            *lw -= lse;
        }
        let weights = log_weights.iter().map(|lw| lw.exp()).collect();
        Ok(GaussianMixture {
            dim: d,
            weights,
            log_weights,
            components,
        })
    }

    fn noised_component(&self, k: usize, u: &[f64], sigma: NoiseLevel) -> Noised {
        let c = &self.components[k];
        let a = sigma.signal_scale();
        let (a2, s2) = (1.0 - sigma.variance(), sigma.variance());
        let u_rot = c.to_eigenbasis(u);
        let mut quad = 0.0;
        let mut log_det = 0.0;
        let mut resid = Vec::with_capacity(self.dim);
        let mut var = Vec::with_capacity(self.dim);
        for i in 0..self.dim {
            let vi = a2 * c.eigvals[i] + s2;
            let ri = u_rot[i] - a * c.mean_rot[i];
            quad += ri * ri / vi;
            log_det += vi.ln();
            resid.push(ri);
            var.push(vi);
        }
        let log_joint =
            self.log_weights[k] - 0.5 * (quad + log_det + self.dim as f64 * (2.0 * PI).ln());
        Noised {
            log_joint,
            resid,
            var,
        }
    }

    fn log_marginal_slice(&self, u: &[f64], sigma: NoiseLevel) -> f64 {
        let terms: Vec<f64> = (0..self.components.len())
            .map(|k| self.noised_component(k, u, sigma).log_joint)
            .collect();
        log_sum_exp(&terms)
    }

    /// Shared pass for score and denoiser: per-component terms plus normalized
    /// responsibilities.
    fn posterior(&self, u: &[f64], sigma: NoiseLevel) -> (Vec<Noised>, Vec<f64>) {
        let parts: Vec<Noised> = (0..self.components.len())
            .map(|k| self.noised_component(k, u, sigma))
            .collect();
        let logs: Vec<f64> = parts.iter().map(|p| p.log_joint).collect();
        let lse = log_sum_exp(&logs);
        let resp = logs.iter().map(|l| (l - lse).exp()).collect();
        (parts, resp)
    }
}

impl ScoreModel for GaussianMixture {
    fn dim(&self) -> usize {
        self.dim
    }

    /// Responsibility-weighted component scores `-C_k^{-1} (u - a mu_k)`.
    fn score(&self, u: &Point, sigma: NoiseLevel) -> Result<Point> {
        u.expect_dim(self.dim)?;
        if sigma.is_one() {
            return Ok(Point::from_vec_unchecked(u.iter().map(|x| -x).collect()));
        }
        let (parts, resp) = self.posterior(u, sigma);
        let mut out = vec![0.0; self.dim];
        for (k, (part, r)) in parts.iter().zip(&resp).enumerate() {
            let y: Vec<f64> = part
                .resid
                .iter()
                .zip(&part.var)
                .map(|(ri, vi)| -ri / vi)
                .collect();
            self.components[k].rotate_back_into(&y, *r, &mut out);
        }
        Point::new(out)
    }

    /// Responsibility-weighted posterior means `mu_k + a Sigma_k C_k^{-1} (u - a mu_k)`.
    fn denoiser(&self, u: &Point, sigma: NoiseLevel) -> Result<Point> {
        u.expect_dim(self.dim)?;
        if sigma.is_zero() {
            return Ok(u.clone());
        }
        let a = sigma.signal_scale();
        let (parts, resp) = self.posterior(u, sigma);
        let mut out = vec![0.0; self.dim];
        for (k, (part, r)) in parts.iter().zip(&resp).enumerate() {
            let c = &self.components[k];
            let y: Vec<f64> = (0..self.dim)
                .map(|i| c.mean_rot[i] + a * c.eigvals[i] * part.resid[i] / part.var[i])
                .collect();
            c.rotate_back_into(&y, *r, &mut out);
        }
        Point::new(out)
    }

    /// Normalized `log q(u, sigma)`.
    fn log_marginal(&self, u: &Point, sigma: NoiseLevel) -> Result<f64> {
        u.expect_dim(self.dim)?;
        Ok(self.log_marginal_slice(u, sigma))
    }
}

impl TryFrom<MixtureSpec> for GaussianMixture {
    type Error = Error;

    fn try_from(spec: MixtureSpec) -> Result<Self> {
        GaussianMixture::from_spec(spec)
    }
}

impl Serialize for GaussianMixture {
    fn serialize<S: serde::Serializer>(
        &self,
        serializer: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        self.to_spec().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for GaussianMixture {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        let spec = MixtureSpec::deserialize(deserializer)?;
        GaussianMixture::from_spec(spec).map_err(serde::de::Error::custom)
    }
}

fn flatten_square(rows: &[Vec<f64>], dim: usize) -> std::result::Result<Vec<f64>, String> {
    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
        return Err(format!("expected a {dim}x{dim} matrix"));
    }
    let mut flat = Vec::with_capacity(dim * dim);
    for r in rows {
        flat.extend_from_slice(r);
    }
    if flat.iter().any(|x| !x.is_finite()) {
        return Err("non-finite entry".into());
    }
    for i in 0..dim {
        for j in 0..i {
            let gap = (flat[i * dim + j] - flat[j * dim + i]).abs();
            if gap > SYMMETRY_TOL {
                return Err(format!(
                    "not symmetric: entries ({i},{j}) and ({j},{i}) differ by {gap:e}"
                ));
            }
        }
    }
    Ok(flat)
}

/// `log sum exp(x)`, returning `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
