//! Scores and denoisers of exponentially tilted densities under the
//! variance-preserving Gaussian channel `U = sqrt(1 - sigma^2) X + sigma Z`.
//!
//! A tilt `p*(x) ∝ p(x) exp(v^T x - s |x|^2 / 2)` with `s >= 0` never needs a
//! new score model: the denoiser of `p*` at `(u, sigma)` equals the denoiser
//! of `p` at a shifted location and a smaller noise level, and the score
//! follows through Tweedie's formula.
//!
//! - [`score`]: noise levels, points, the [`ScoreModel`] trait, Gaussian
//!   mixtures and the Tweedie maps.
//! - [`tilt`]: the shift map and the tilted denoiser/score.
//! - [`oracle`]: quadrature, finite differences and sample moments used as
//!   independent ground truth.
//! - [`sampler`]: reverse-diffusion sampling of tilted densities through
//!   base-model denoiser queries.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod oracle;
pub mod sampler;
pub mod score;
pub mod tilt;

pub use error::{Error, Result};
pub use score::{GaussianMixture, NoiseLevel, Point, ScoreModel};
pub use tilt::{ShiftedQuery, TiltParams, TiltedModel};
