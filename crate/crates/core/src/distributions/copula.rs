//! Gaussian copula with truncated-Gaussian marginals on the unit hypercube.
//!
//! The joint density factors as copula times marginals:
//!   f(z) = c(F_1(z_1), ..., F_D(z_D)) * prod_d q_d(z_d)
//! with q_d a [`TruncatedGaussian1D`] on [0, 1] and F_d its CDF. Because each
//! F_d maps [0, 1] onto [0, 1], the joint normalizes exactly; no Monte Carlo
//! constant and no rejection step is needed.
//!
//! The copula itself is parametrized by a correlation matrix derived from an
//! unconstrained lower-triangular factor L:
//!   Sigma = L L^T,  Sigma-hat = D^-1/2 Sigma D^-1/2,  D = diag(Sigma),
//! so Sigma-hat has unit diagonal by construction and Cholesky factor
//! L-hat = D^-1/2 L. The density uses one forward solve:
//!   c(u) = exp(-1/2 (|w|^2 - |v|^2) - sum_i ln L-hat_ii),
//!   v = Phi^-1(u),  w = L-hat^-1 v.

use crate::distributions::{TruncatedGaussian1D, DENSITY_FLOOR};
use crate::mathcore::{std_normal_cdf, std_normal_pdf, std_normal_quantile, Matrix};
use crate::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// Clamp applied to u before Phi^-1; matches the taped NormalQuantile op.
pub const U_CLAMP: f64 = 1e-16;

/// One copula draw with its reparametrization trace:
/// `z_d = F_d^-1(Phi((corr_chol * eps)_d))`.
#[derive(Debug, Clone)]
pub struct CopulaDraw {
    pub z: Vec<f64>,
    pub eps: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GaussianCopulaPosterior {
    marginal_mu: Vec<f64>,
    marginal_sigma: Vec<f64>,
    chol: Matrix,
    corr: Matrix,
    corr_chol: Matrix,
}

fn check_lower_positive(l: &Matrix) -> Result<()> {
    let d = l.rows();
    if l.cols() != d {
        return Err(Error::arity("copula factor columns", d, l.cols()));
    }
    for i in 0..d {
        if l.get(i, i) <= 0.0 {
            return Err(Error::parameter(format!(
                "copula factor diagonal entry {i} must be positive, got {}",
                l.get(i, i)
            )));
        }
        for j in (i + 1)..d {
            if l.get(i, j) != 0.0 {
                return Err(Error::parameter(format!(
                    "copula factor must be lower triangular, found nonzero at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

/// Correlation matrix implied by a lower-triangular factor:
/// normalize(L L^T) to unit diagonal.
pub fn correlation_from_chol(l: &Matrix) -> Result<Matrix> {
    check_lower_positive(l)?;
    let d = l.rows();
    let sigma = l.matmul(&l.transpose())?;
    let scale: Vec<f64> = (0..d).map(|i| sigma.get(i, i).sqrt()).collect();
    let mut corr = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            corr.set(i, j, sigma.get(i, j) / (scale[i] * scale[j]))?;
        }
    }
    for i in 0..d {
        debug_assert!((corr.get(i, i) - 1.0).abs() <= 1e-12);
        corr.set(i, i, 1.0)?;
    }
    Ok(corr)
}

fn density_from_chol(corr_chol: &Matrix, u: &[f64]) -> Result<f64> {
    let d = corr_chol.rows();
    if u.len() != d {
        return Err(Error::arity("copula_density point length", d, u.len()));
    }
    let mut v = Vec::with_capacity(d);
    for &ui in u {
        v.push(std_normal_quantile(ui.clamp(U_CLAMP, 1.0 - U_CLAMP))?);
    }
    let w = corr_chol.solve_lower(&v)?;
    let v2: f64 = v.iter().map(|x| x * x).sum();
    let w2: f64 = w.iter().map(|x| x * x).sum();
    let half_logdet: f64 = (0..d).map(|i| corr_chol.get(i, i).ln()).sum();
    Ok((-0.5 * (w2 - v2) - half_logdet).exp())
}

/// Copula density at u in [0, 1]^D for a correlation matrix.
pub fn copula_density(corr: &Matrix, u: &[f64]) -> Result<f64> {
    density_from_chol(&corr.cholesky()?, u)
}

impl GaussianCopulaPosterior {
    /// Build from marginal parameters and an unconstrained lower-triangular
    /// factor. The domain is fixed to [0, 1] per axis.
    pub fn new(marginal_mu: Vec<f64>, marginal_sigma: Vec<f64>, chol: Matrix) -> Result<Self> {
        let d = marginal_mu.len();
        if d == 0 {
            return Err(Error::parameter("copula posterior needs dimension >= 1"));
        }
        if marginal_sigma.len() != d {
            return Err(Error::arity("copula marginal sigmas", d, marginal_sigma.len()));
        }
        if marginal_mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::parameter("copula marginal means must be finite"));
        }
        if marginal_sigma.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::parameter("copula marginal sigmas must be positive"));
        }
        if chol.rows() != d {
            return Err(Error::arity("copula factor rows", d, chol.rows()));
        }
        check_lower_positive(&chol)?;
        let corr = correlation_from_chol(&chol)?;
        // L-hat = D^-1/2 L is exactly the Cholesky factor of Sigma-hat.
        let sigma = chol.matmul(&chol.transpose())?;
        let mut corr_chol = Matrix::zeros(d, d);
        for i in 0..d {
            let s = sigma.get(i, i).sqrt();
            for j in 0..=i {
                corr_chol.set(i, j, chol.get(i, j) / s)?;
            }
        }
        Ok(GaussianCopulaPosterior {
            marginal_mu,
            marginal_sigma,
            chol,
            corr,
            corr_chol,
        })
    }

    pub fn dim(&self) -> usize {
        self.marginal_mu.len()
    }

    pub fn marginal_mu(&self) -> &[f64] {
        &self.marginal_mu
    }

    pub fn marginal_sigma(&self) -> &[f64] {
        &self.marginal_sigma
    }

    pub fn chol(&self) -> &Matrix {
        &self.chol
    }

    pub fn corr(&self) -> &Matrix {
        &self.corr
    }

    pub fn corr_chol(&self) -> &Matrix {
        &self.corr_chol
    }

    pub fn marginal(&self, d: usize) -> Result<TruncatedGaussian1D> {
        TruncatedGaussian1D::new(self.marginal_mu[d], self.marginal_sigma[d], 0.0, 1.0)
    }

    pub fn in_domain(&self, z: &[f64]) -> bool {
        z.iter().all(|&x| (0.0..=1.0).contains(&x))
    }

    fn check_point(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::arity("copula point length", self.dim(), z.len()));
        }
        Ok(())
    }

    /// Log joint density: copula term at the truncated-marginal CDF values
    /// plus the truncated-marginal log densities.
    pub fn joint_logpdf(&self, z: &[f64]) -> Result<f64> {
        self.check_point(z)?;
        let d = self.dim();
        let mut u = Vec::with_capacity(d);
        let mut log_marg = 0.0;
        for i in 0..d {
            let tg = self.marginal(i)?;
            u.push(tg.cdf(z[i]));
            log_marg += tg.pdf(z[i]).max(DENSITY_FLOOR).ln();
        }
        let c = density_from_chol(&self.corr_chol, &u)?;
        Ok(c.max(DENSITY_FLOOR).ln() + log_marg)
    }

    /// Variant with plain (untruncated) Gaussian marginals. Mass escaping
    /// the unit hypercube is simply lost, so over [0, 1]^D this integrates
    /// to less than one; kept as an independently testable reference path.
    pub fn joint_logpdf_untruncated(&self, z: &[f64]) -> Result<f64> {
        self.check_point(z)?;
        let d = self.dim();
        let mut u = Vec::with_capacity(d);
        let mut log_marg = 0.0;
        for i in 0..d {
            let t = (z[i] - self.marginal_mu[i]) / self.marginal_sigma[i];
            u.push(std_normal_cdf(t));
            log_marg += (std_normal_pdf(t) / self.marginal_sigma[i])
                .max(DENSITY_FLOOR)
                .ln();
        }
        let c = density_from_chol(&self.corr_chol, &u)?;
        Ok(c.max(DENSITY_FLOOR).ln() + log_marg)
    }

    /// Fully reparametrized sampling: eps ~ N(0, I), v = L-hat eps,
    /// u = Phi(v), z_d = F_d^-1(u_d). Every draw lands inside [0, 1]^D.
    pub fn sample_traced<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Vec<CopulaDraw>> {
        let d = self.dim();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let eps: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let z = self.reparametrize(&eps)?;
            out.push(CopulaDraw { z, eps });
        }
        Ok(out)
    }

    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .sample_traced(n, rng)?
            .into_iter()
            .map(|dr| dr.z)
            .collect())
    }

    /// The pathwise sample map applied to one noise vector.
    pub fn reparametrize(&self, eps: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if eps.len() != d {
            return Err(Error::arity("copula noise length", d, eps.len()));
        }
        let mut z = Vec::with_capacity(d);
        for i in 0..d {
            let mut v = 0.0;
            for j in 0..=i {
                v += self.corr_chol.get(i, j) * eps[j];
            }
            let u = std_normal_cdf(v);
            z.push(self.marginal(i)?.quantile(u)?);
        }
        Ok(z)
    }
}

/// Log joint density of a copula posterior; free-function form mirroring
/// [`GaussianMixture::truncated_logpdf`](super::GaussianMixture).
pub fn copula_joint_logpdf(post: &GaussianCopulaPosterior, z: &[f64]) -> Result<f64> {
    post.joint_logpdf(z)
}

/// Untruncated-marginal variant of [`copula_joint_logpdf`].
pub fn copula_joint_logpdf_untruncated(post: &GaussianCopulaPosterior, z: &[f64]) -> Result<f64> {
    post.joint_logpdf_untruncated(z)
}
