//! Posterior building blocks: truncated Gaussian marginals, Gaussian
//! mixtures restricted to a hypercube, and the Gaussian copula.
//!
//! All three posterior families share the bounded damage domain. Mixtures
//! handle the bound by renormalizing with a Monte Carlo constant and sample
//! by rejection; the copula bakes the bound into its truncated marginals and
//! samples without rejection.

mod copula;
mod mixture;
mod truncnorm;

pub use copula::{
    copula_density, copula_joint_logpdf, copula_joint_logpdf_untruncated, correlation_from_chol,
    CopulaDraw, GaussianCopulaPosterior,
};
pub use mixture::{GaussianMixture, GmDraw, MixtureCovariance};
pub use truncnorm::TruncatedGaussian1D;

use crate::{Error, Result};

/// Uniform prior over an axis-aligned box; the flat log density is dropped
/// from the training loss as an additive constant, so this type mainly
/// carries the domain bounds and the membership test.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformPrior {
    b_low: Vec<f64>,
    b_up: Vec<f64>,
}

impl UniformPrior {
    pub fn new(b_low: Vec<f64>, b_up: Vec<f64>) -> Result<Self> {
        if b_low.len() != b_up.len() {
            return Err(Error::arity("prior bounds length", b_low.len(), b_up.len()));
        }
        if b_low.is_empty() {
            return Err(Error::parameter("prior needs at least one dimension"));
        }
        for (lo, hi) in b_low.iter().zip(&b_up) {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::parameter(format!(
                    "prior bounds must satisfy low < high, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(UniformPrior { b_low, b_up })
    }

    /// Unit hypercube in `d` dimensions, the damage domain.
    pub fn unit(d: usize) -> Self {
        UniformPrior {
            b_low: vec![0.0; d],
            b_up: vec![1.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.b_low.len()
    }

    pub fn low(&self) -> &[f64] {
        &self.b_low
    }

    pub fn high(&self) -> &[f64] {
        &self.b_up
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        z.len() == self.dim()
            && z.iter()
                .zip(self.b_low.iter().zip(&self.b_up))
                .all(|(&x, (&lo, &hi))| x >= lo && x <= hi)
    }

    pub fn volume(&self) -> f64 {
        self.b_low
            .iter()
            .zip(&self.b_up)
            .map(|(&lo, &hi)| hi - lo)
            .product()
    }

    pub fn logpdf(&self, z: &[f64]) -> f64 {
        if self.contains(z) {
            -self.volume().ln()
        } else {
            f64::NEG_INFINITY
        }
    }
}

/// Density floor applied before any logarithm; keeps far-tail evaluations
/// finite without visibly perturbing realistic densities.
pub const DENSITY_FLOOR: f64 = 1e-300;
