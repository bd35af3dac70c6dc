//! Gaussian mixtures on a hypercube domain.
//!
//! Covariances come in two parametrizations: per-axis sigmas (diagonal), or
//! the rotation-scaling form Sigma = R S S R^T with R a product of plane
//! rotations and S = diag(scalings). The second needs no matrix inversion
//! anywhere: Sigma^-1 = R S^-2 R^T and |Sigma| = prod(scalings)^2.
//!
//! [`GaussianMixture::pdf`] is the untruncated mixture density. Restriction
//! to the domain happens in [`GaussianMixture::truncated_logpdf`], which
//! divides by a Monte Carlo estimate of the in-domain mass
//!   C = vol(A)/N * sum_i pdf(u_i),   u_i uniform over the domain,
//! and in [`GaussianMixture::rejection_sample`], which redraws whole batches
//! and replaces invalid slots until every sample lies inside.

use crate::distributions::DENSITY_FLOOR;
use crate::mathcore::{rotation_matrix, Matrix};
use crate::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, PartialEq)]
pub enum MixtureCovariance {
    /// Per-component, per-axis standard deviations (K x D).
    Diagonal { sigmas: Vec<Vec<f64>> },
    /// Per-component scalings (K x D) and plane-rotation angles
    /// (K x D(D-1)/2, lexicographic pair order).
    RotationScaling {
        scalings: Vec<Vec<f64>>,
        angles: Vec<Vec<f64>>,
    },
}

/// One accepted rejection-sampler draw with its reparametrization trace:
/// `z = mean[component] + sqrt_factor[component] * eps`.
#[derive(Debug, Clone)]
pub struct GmDraw {
    pub z: Vec<f64>,
    pub component: usize,
    pub eps: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariance: MixtureCovariance,
    low: f64,
    high: f64,
    /// Cached R_k for the rotation-scaling form; None for diagonal.
    rotations: Option<Vec<Matrix>>,
}

fn check_positive_grid(name: &str, grid: &[Vec<f64>], k: usize, d: usize) -> Result<()> {
    if grid.len() != k {
        return Err(Error::arity(format!("{name} component count"), k, grid.len()));
    }
    for row in grid {
        if row.len() != d {
            return Err(Error::arity(format!("{name} length"), d, row.len()));
        }
        if row.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(Error::parameter(format!("{name} entries must be positive and finite")));
        }
    }
    Ok(())
}

impl GaussianMixture {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covariance: MixtureCovariance,
        low: f64,
        high: f64,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::parameter("mixture needs at least one component"));
        }
        if weights.iter().any(|&w| !(w.is_finite() && w >= 0.0)) {
            return Err(Error::parameter("mixture weights must be nonnegative"));
        }
        let wsum: f64 = weights.iter().sum();
        if (wsum - 1.0).abs() > 1e-9 {
            return Err(Error::parameter(format!(
                "mixture weights must sum to 1, got {wsum}"
            )));
        }
        if means.len() != k {
            return Err(Error::arity("mixture means count", k, means.len()));
        }
        let d = means.first().map_or(0, |m| m.len());
        if d == 0 {
            return Err(Error::parameter("mixture dimension must be at least 1"));
        }
        for m in &means {
            if m.len() != d {
                return Err(Error::arity("mixture mean length", d, m.len()));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::parameter("mixture means must be finite"));
            }
        }
        if !(low.is_finite() && high.is_finite() && low < high) {
            return Err(Error::parameter(format!(
                "mixture domain must satisfy low < high, got [{low}, {high}]"
            )));
        }
        let rotations = match &covariance {
            MixtureCovariance::Diagonal { sigmas } => {
                check_positive_grid("mixture sigmas", sigmas, k, d)?;
                None
            }
            MixtureCovariance::RotationScaling { scalings, angles } => {
                if d < 2 {
                    return Err(Error::parameter(
                        "rotation-scaling covariance requires dimension >= 2",
                    ));
                }
                check_positive_grid("mixture scalings", scalings, k, d)?;
                if angles.len() != k {
                    return Err(Error::arity("mixture angles count", k, angles.len()));
                }
                let mut rots = Vec::with_capacity(k);
                for a in angles {
                    rots.push(rotation_matrix(a, d)?);
                }
                Some(rots)
            }
        };
        Ok(GaussianMixture {
            weights,
            means,
            covariance,
            low,
            high,
            rotations,
        })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn low(&self) -> f64 {
        self.low
    }

    pub fn high(&self) -> f64 {
        self.high
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn covariance(&self) -> &MixtureCovariance {
        &self.covariance
    }

    pub fn in_domain(&self, z: &[f64]) -> bool {
        z.iter().all(|&x| x >= self.low && x <= self.high)
    }

    /// Per-axis scale factors of component `k` (sigmas or scalings).
    fn scales(&self, k: usize) -> &[f64] {
        match &self.covariance {
            MixtureCovariance::Diagonal { sigmas } => &sigmas[k],
            MixtureCovariance::RotationScaling { scalings, .. } => &scalings[k],
        }
    }

    fn component_density(&self, k: usize, z: &[f64]) -> f64 {
        let d = self.dim();
        let mu = &self.means[k];
        let scl = self.scales(k);
        let quad = match &self.rotations {
            None => {
                let mut q = 0.0;
                for i in 0..d {
                    let t = (z[i] - mu[i]) / scl[i];
                    q += t * t;
                }
                q
            }
            Some(rots) => {
                // y = R^T (z - mu); quad = sum (y_i / s_i)^2
                let r = &rots[k];
                let mut q = 0.0;
                for i in 0..d {
                    let mut y = 0.0;
                    for j in 0..d {
                        y += r.get(j, i) * (z[j] - mu[j]);
                    }
                    let t = y / scl[i];
                    q += t * t;
                }
                q
            }
        };
        let log_norm: f64 = -0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln()
            - scl.iter().map(|s| s.ln()).sum::<f64>();
        (log_norm - 0.5 * quad).exp()
    }

    /// Mixture density without domain truncation.
    pub fn pdf(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.dim() {
            return Err(Error::arity("gm_pdf point length", self.dim(), z.len()));
        }
        Ok(self
            .weights
            .iter()
            .enumerate()
            .map(|(k, &w)| w * self.component_density(k, z))
            .sum())
    }

    /// Monte Carlo estimate of the mixture mass inside the domain.
    pub fn normalization_constant<R: Rng>(&self, n_mc: usize, rng: &mut R) -> Result<f64> {
        if n_mc == 0 {
            return Err(Error::parameter("normalization_constant requires n_mc >= 1"));
        }
        let d = self.dim();
        let vol = (self.high - self.low).powi(d as i32);
        let mut acc = 0.0;
        let mut u = vec![0.0; d];
        for _ in 0..n_mc {
            for x in u.iter_mut() {
                *x = rng.gen_range(self.low..self.high);
            }
            acc += self.pdf(&u)?;
        }
        Ok(vol * acc / n_mc as f64)
    }

    /// Log density of the domain-truncated mixture,
    /// ln pdf(z) - ln C with both terms floored at 1e-300.
    pub fn truncated_logpdf<R: Rng>(&self, z: &[f64], n_mc: usize, rng: &mut R) -> Result<f64> {
        let c = self.normalization_constant(n_mc, rng)?;
        let p = if self.in_domain(z) { self.pdf(z)? } else { 0.0 };
        Ok(p.max(DENSITY_FLOOR).ln() - c.max(DENSITY_FLOOR).ln())
    }

    /// As [`truncated_logpdf`] but reusing a precomputed normalization
    /// constant, so one batch of draws can share one estimate.
    pub fn truncated_logpdf_with_constant(&self, z: &[f64], c: f64) -> Result<f64> {
        if z.len() != self.dim() {
            return Err(Error::arity("truncated_logpdf point length", self.dim(), z.len()));
        }
        let p = if self.in_domain(z) { self.pdf(z)? } else { 0.0 };
        Ok(p.max(DENSITY_FLOOR).ln() - c.max(DENSITY_FLOOR).ln())
    }

    fn draw_one<R: Rng>(&self, rng: &mut R) -> GmDraw {
        let u: f64 = rng.gen();
        let mut component = self.k() - 1;
        let mut cum = 0.0;
        for (k, &w) in self.weights.iter().enumerate() {
            cum += w;
            if u < cum {
                component = k;
                break;
            }
        }
        let d = self.dim();
        let eps: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let z = self.reparametrize(component, &eps);
        GmDraw { z, component, eps }
    }

    /// mean[k] + sqrt_factor[k] * eps, the pathwise sample map.
    pub fn reparametrize(&self, k: usize, eps: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mu = &self.means[k];
        let scl = self.scales(k);
        match &self.rotations {
            None => (0..d).map(|i| mu[i] + scl[i] * eps[i]).collect(),
            Some(rots) => {
                let r = &rots[k];
                let scaled: Vec<f64> = (0..d).map(|i| scl[i] * eps[i]).collect();
                (0..d)
                    .map(|i| {
                        let mut y = mu[i];
                        for j in 0..d {
                            y += r.get(i, j) * scaled[j];
                        }
                        y
                    })
                    .collect()
            }
        }
    }

    /// Batch rejection sampling with traces. Draws a full batch, then keeps
    /// redrawing full batches and swapping fresh draws into still-invalid
    /// slots. Fails after `max_rounds` with the observed acceptance rate.
    pub fn rejection_sample_traced<R: Rng>(
        &self,
        h: usize,
        max_rounds: usize,
        rng: &mut R,
    ) -> Result<Vec<GmDraw>> {
        if h == 0 {
            return Ok(Vec::new());
        }
        let mut draws: Vec<GmDraw> = (0..h).map(|_| self.draw_one(rng)).collect();
        let mut total_drawn = h;
        let mut total_valid = draws.iter().filter(|dr| self.in_domain(&dr.z)).count();
        let mut invalid: Vec<usize> = (0..h).filter(|&j| !self.in_domain(&draws[j].z)).collect();
        let mut rounds = 0;
        while !invalid.is_empty() {
            rounds += 1;
            if rounds > max_rounds {
                return Err(Error::RejectionExhausted {
                    rounds: max_rounds,
                    acceptance_rate: total_valid as f64 / total_drawn as f64,
                });
            }
            let fresh: Vec<GmDraw> = (0..h).map(|_| self.draw_one(rng)).collect();
            total_drawn += h;
            total_valid += fresh.iter().filter(|dr| self.in_domain(&dr.z)).count();
            for &j in &invalid {
                draws[j] = fresh[j].clone();
            }
            invalid.retain(|&j| !self.in_domain(&draws[j].z));
        }
        Ok(draws)
    }

    pub fn rejection_sample<R: Rng>(
        &self,
        h: usize,
        max_rounds: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .rejection_sample_traced(h, max_rounds, rng)?
            .into_iter()
            .map(|dr| dr.z)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testsupport::determinant;
    use proptest::prelude::*;
    // Explicit so the rand 0.8 trait wins over proptest's rand re-export.
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn diag_k1(mu: [f64; 2], sigma: [f64; 2]) -> GaussianMixture {
        GaussianMixture::new(
            vec![1.0],
            vec![mu.to_vec()],
            MixtureCovariance::Diagonal {
                sigmas: vec![sigma.to_vec()],
            },
            0.0,
            1.0,
        )
        .unwrap()
    }

    /// Dense-covariance Gaussian density; independent of the scaled-quad path.
    fn dense_gauss(z: &[f64], mu: &[f64], cov: &[f64], d: usize) -> f64 {
        let det = determinant(cov, d);
        // explicit inverse for d = 2
        assert_eq!(d, 2);
        let inv = [
            cov[3] / det,
            -cov[1] / det,
            -cov[2] / det,
            cov[0] / det,
        ];
        let dz = [z[0] - mu[0], z[1] - mu[1]];
        let quad = dz[0] * (inv[0] * dz[0] + inv[1] * dz[1]) + dz[1] * (inv[2] * dz[0] + inv[3] * dz[1]);
        (-0.5 * quad).exp() / (2.0 * std::f64::consts::PI * det.sqrt())
    }

    #[test]
    fn peak_value_k1_diag() {
        let gm = diag_k1([0.4, 0.6], [0.1, 0.2]);
        let expect = 1.0 / (2.0 * std::f64::consts::PI * 0.1 * 0.2);
        assert!((gm.pdf(&[0.4, 0.6]).unwrap() - expect).abs() < 1e-12 * expect);
    }

    #[test]
    fn diag_k2_matches_dense_oracle() {
        let gm = GaussianMixture::new(
            vec![0.3, 0.7],
            vec![vec![0.2, 0.3], vec![0.7, 0.6]],
            MixtureCovariance::Diagonal {
                sigmas: vec![vec![0.15, 0.1], vec![0.05, 0.2]],
            },
            0.0,
            1.0,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let z = [rng.gen_range(-0.5..1.5), rng.gen_range(-0.5..1.5)];
            let c1 = [0.15f64.powi(2), 0.0, 0.0, 0.1f64.powi(2)];
            let c2 = [0.05f64.powi(2), 0.0, 0.0, 0.2f64.powi(2)];
            let expect = 0.3 * dense_gauss(&z, &[0.2, 0.3], &c1, 2)
                + 0.7 * dense_gauss(&z, &[0.7, 0.6], &c2, 2);
            let got = gm.pdf(&z).unwrap();
            assert!((got - expect).abs() <= 1e-12 * expect.max(1e-8), "{got} vs {expect}");
        }
    }

    #[test]
    fn rotation_scaling_matches_dense_oracle() {
        let gamma: f64 = 0.9;
        let s = [0.3f64, 0.08f64];
        let mu = [0.5, 0.4];
        let gm = GaussianMixture::new(
            vec![1.0],
            vec![mu.to_vec()],
            MixtureCovariance::RotationScaling {
                scalings: vec![s.to_vec()],
                angles: vec![vec![gamma]],
            },
            0.0,
            1.0,
        )
        .unwrap();
        // Dense Sigma = R diag(s^2) R^T assembled by hand.
        let (sn, cs) = gamma.sin_cos();
        let r = [cs, -sn, sn, cs];
        let d2 = [s[0] * s[0], s[1] * s[1]];
        let mut cov = [0.0; 4];
        for i in 0..2 {
            for j in 0..2 {
                cov[i * 2 + j] = (0..2).map(|p| r[i * 2 + p] * d2[p] * r[j * 2 + p]).sum();
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let z = [rng.gen_range(-0.3..1.3), rng.gen_range(-0.3..1.3)];
            let expect = dense_gauss(&z, &mu, &cov, 2);
            let got = gm.pdf(&z).unwrap();
            assert!(
                (got - expect).abs() <= 1e-11 * expect.max(1e-10),
                "{got} vs {expect} at {z:?}"
            );
        }
    }

    #[test]
    fn normalization_interior_and_face() {
        // Draw counts sized to the estimator variance: a sigma = 0.1
        // component has Var[pdf(U)] ~ 1/(4 pi sigma^2) - 1 ~ 7, so 2^20
        // draws put three MC sigmas near 0.008, inside the tolerance.
        // 65536 draws would not resolve 1% for these widths.
        let n = 1 << 20;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Interior component five sigmas from every face: mass ~ 1.
        let interior = diag_k1([0.5, 0.5], [0.1, 0.1]);
        let c = interior.normalization_constant(n, &mut rng).unwrap();
        assert!((c - 1.0).abs() < 0.01, "interior C = {c}");
        // Mean on a face: half the mass sticks out.
        let face = diag_k1([0.5, 0.0], [0.05, 0.05]);
        let c = face.normalization_constant(n, &mut rng).unwrap();
        assert!((c - 0.5).abs() < 0.02, "face C = {c}");
    }

    #[test]
    fn truncated_logpdf_uses_constant() {
        let gm = diag_k1([0.5, 0.5], [0.3, 0.3]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = gm.normalization_constant(65536, &mut rng).unwrap();
        let z = [0.25, 0.75];
        let lp = gm.truncated_logpdf_with_constant(&z, c).unwrap();
        let expect = gm.pdf(&z).unwrap().ln() - c.ln();
        assert!((lp - expect).abs() < 1e-12);
        // outside the domain the floored density applies
        let out = gm.truncated_logpdf_with_constant(&[1.5, 0.5], c).unwrap();
        assert!((out - (DENSITY_FLOOR.ln() - c.ln())).abs() < 1e-9);
    }

    #[test]
    fn rejection_sampling_stays_in_domain() {
        let gm = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![vec![0.1, 0.1], vec![0.9, 0.9]],
            MixtureCovariance::Diagonal {
                sigmas: vec![vec![0.3, 0.3], vec![0.3, 0.3]],
            },
            0.0,
            1.0,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draws = gm.rejection_sample(5000, 1000, &mut rng).unwrap();
        assert_eq!(draws.len(), 5000);
        assert!(draws.iter().all(|z| gm.in_domain(z)));
    }

    #[test]
    fn rejection_trace_reconstructs_sample() {
        let gm = GaussianMixture::new(
            vec![0.4, 0.6],
            vec![vec![0.3, 0.5], vec![0.7, 0.4]],
            MixtureCovariance::RotationScaling {
                scalings: vec![vec![0.2, 0.05], vec![0.1, 0.15]],
                angles: vec![vec![0.7], vec![2.0]],
            },
            0.0,
            1.0,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for draw in gm.rejection_sample_traced(200, 1000, &mut rng).unwrap() {
            let rebuilt = gm.reparametrize(draw.component, &draw.eps);
            for (a, b) in rebuilt.iter().zip(&draw.z) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejection_exhaustion_reports_rate() {
        // Essentially no mass in the unit square.
        let gm = diag_k1([-5.0, -5.0], [0.01, 0.01]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        match gm.rejection_sample(16, 10, &mut rng) {
            Err(Error::RejectionExhausted { rounds, acceptance_rate }) => {
                assert_eq!(rounds, 10);
                assert!(acceptance_rate < 1e-3);
            }
            other => panic!("expected exhaustion, got {other:?}"),
        }
    }

    #[test]
    fn constructor_validation() {
        let cov = MixtureCovariance::Diagonal {
            sigmas: vec![vec![0.1, 0.1]],
        };
        assert!(GaussianMixture::new(vec![0.9], vec![vec![0.5, 0.5]], cov.clone(), 0.0, 1.0).is_err());
        assert!(GaussianMixture::new(vec![1.0], vec![vec![0.5]], cov.clone(), 0.0, 1.0).is_err());
        assert!(GaussianMixture::new(vec![1.0], vec![vec![0.5, 0.5]], cov, 1.0, 0.0).is_err());
        let bad_sigma = MixtureCovariance::Diagonal {
            sigmas: vec![vec![0.1, -0.1]],
        };
        assert!(GaussianMixture::new(vec![1.0], vec![vec![0.5, 0.5]], bad_sigma, 0.0, 1.0).is_err());
        let bad_angles = MixtureCovariance::RotationScaling {
            scalings: vec![vec![0.1, 0.1]],
            angles: vec![vec![0.1, 0.2]],
        };
        assert!(GaussianMixture::new(vec![1.0], vec![vec![0.5, 0.5]], bad_angles, 0.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn full_reduces_to_diag_at_zero_angles(
            z0 in -0.5..1.5f64,
            z1 in -0.5..1.5f64,
            m0 in 0.0..1.0f64,
            m1 in 0.0..1.0f64,
            s0 in 0.01..0.5f64,
            s1 in 0.01..0.5f64,
        ) {
            let diag = GaussianMixture::new(
                vec![1.0],
                vec![vec![m0, m1]],
                MixtureCovariance::Diagonal { sigmas: vec![vec![s0, s1]] },
                0.0,
                1.0,
            ).unwrap();
            let full = GaussianMixture::new(
                vec![1.0],
                vec![vec![m0, m1]],
                MixtureCovariance::RotationScaling {
                    scalings: vec![vec![s0, s1]],
                    angles: vec![vec![0.0]],
                },
                0.0,
                1.0,
            ).unwrap();
            let a = diag.pdf(&[z0, z1]).unwrap();
            let b = full.pdf(&[z0, z1]).unwrap();
            prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1e-12));
        }

        #[test]
        fn samples_always_inside(seed in 0u64..500) {
            let gm = GaussianMixture::new(
                vec![1.0],
                vec![vec![0.2, 0.8]],
                MixtureCovariance::Diagonal { sigmas: vec![vec![0.4, 0.4]] },
                0.0,
                1.0,
            ).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let draws = gm.rejection_sample(64, 1000, &mut rng).unwrap();
            prop_assert!(draws.iter().all(|z| gm.in_domain(z)));
        }
    }
}
