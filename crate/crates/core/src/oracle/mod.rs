//! Reference posteriors from exhaustive search through the frozen surrogate.
//!
//! For an observation (m, w) the latent box [0,1]^D is swept on a uniform
//! grid; each grid point z_j is pushed through the decoder under the same w
//! and scored by the squared misfit
//!
//!   delta_j = || m - F([z_j, w]) ||_2^2.
//!
//! The n_f lowest-misfit points are kept and turned into a weighted kernel
//! density estimate with weights proportional to 1/delta_j and a diagonal
//! Gaussian kernel,
//!
//!   f(z) = sum_j w_j (2 pi)^(-D/2) |S|^(-1/2) exp(-1/2 (z-z_j)' S^-1 (z-z_j)),
//!
//! where S = diag(h_1^2, .., h_D^2) and h_d follows Scott's rule
//! h_d = n_f^(-1/(D+4)) sigma_d over the retained cloud. This density is the
//! yardstick the trained posterior families are judged against.
//!
//! The kernel is not renormalized to the box, so a cloud hugging a boundary
//! leaks some mass outside; [`GroundTruthPosterior::mc_integral`] measures
//! what remains.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rayon::prelude::*;

use crate::distributions::DENSITY_FLOOR;
use crate::mathcore::Matrix;
use crate::nn::Mlp;
use crate::{Error, Result};

/// Default grid resolution per axis.
pub const GRID_DEFAULT_PER_AXIS: usize = 200;
/// Default retained-cloud size on the default grid.
pub const N_F_DEFAULT: usize = 2_000;
/// Discrepancies are floored here before inversion: a perfect grid match
/// must dominate the weights without producing an infinity.
pub const DELTA_FLOOR: f64 = 1e-12;
/// Per-axis kernel bandwidth floor, in latent units. Keeps the smoothing
/// matrix positive definite when the retained cloud is degenerate (a single
/// point, or a line along one axis).
pub const BANDWIDTH_FLOOR: f64 = 1e-3;

/// Grid rows per decoder batch; bounds peak memory on fine grids.
const FORWARD_CHUNK: usize = 8192;

/// Uniform grid over [0, 1] including both endpoints.
pub fn grid_axis(n_per_axis: usize) -> Result<Vec<f64>> {
    if n_per_axis < 2 {
        return Err(Error::parameter(format!(
            "grid needs at least 2 points per axis, got {n_per_axis}"
        )));
    }
    let step = 1.0 / (n_per_axis - 1) as f64;
    Ok((0..n_per_axis).map(|i| i as f64 * step).collect())
}

/// One full grid sweep: every grid point with its measurement discrepancy.
///
/// Points are ordered lexicographically with the last axis fastest, so for
/// D = 2 the flat index is i * n + j with i indexing z1 and j indexing z2.
#[derive(Debug, Clone)]
pub struct GridSweep {
    d: usize,
    n_per_axis: usize,
    /// Row-major n_total x d.
    points: Vec<f64>,
    deltas: Vec<f64>,
}

impl GridSweep {
    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn n_per_axis(&self) -> usize {
        self.n_per_axis
    }

    /// Spacing between neighboring grid points along one axis.
    pub fn cell_width(&self) -> f64 {
        1.0 / (self.n_per_axis - 1) as f64
    }

    pub fn point(&self, j: usize) -> &[f64] {
        &self.points[j * self.d..(j + 1) * self.d]
    }

    pub fn delta(&self, j: usize) -> f64 {
        self.deltas[j]
    }

    /// Index and value of the smallest discrepancy; first index wins ties.
    pub fn min_delta(&self) -> (usize, f64) {
        let mut best = 0;
        for j in 1..self.deltas.len() {
            if self.deltas[j] < self.deltas[best] {
                best = j;
            }
        }
        (best, self.deltas[best])
    }

    /// Indices sorted by ascending discrepancy, grid order breaking ties.
    /// The stable order makes the retained cloud a prefix: growing n_f can
    /// only append points.
    fn ascending_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.deltas.len()).collect();
        idx.sort_by(|&a, &b| {
            self.deltas[a]
                .partial_cmp(&self.deltas[b])
                .expect("discrepancies are finite by construction")
                .then(a.cmp(&b))
        });
        idx
    }
}

/// Sweeps the latent grid through the frozen decoder and scores every point
/// against the observation. The latent dimension is what the decoder input
/// leaves after the environment block: d = input_dim - w.len().
pub fn grid_discrepancies(
    m_scaled: &[f64],
    w_scaled: &[f64],
    decoder: &Mlp,
    n_per_axis: usize,
) -> Result<GridSweep> {
    if !decoder.is_frozen() {
        return Err(Error::Incompatible(
            "ground-truth construction requires a frozen decoder".into(),
        ));
    }
    if decoder.input_dim() <= w_scaled.len() {
        return Err(Error::arity(
            "decoder input vs environment width",
            w_scaled.len() + 1,
            decoder.input_dim(),
        ));
    }
    let d = decoder.input_dim() - w_scaled.len();
    if m_scaled.len() != decoder.output_dim() {
        return Err(Error::arity(
            "observation feature width",
            decoder.output_dim(),
            m_scaled.len(),
        ));
    }
    if !m_scaled.iter().chain(w_scaled).all(|v| v.is_finite()) {
        return Err(Error::parameter("observation and environment must be finite"));
    }
    let axis = grid_axis(n_per_axis)?;
    let total = n_per_axis
        .checked_pow(d as u32)
        .filter(|&t| t <= 100_000_000)
        .ok_or_else(|| {
            Error::parameter(format!(
                "grid of {n_per_axis}^{d} points is too large to enumerate"
            ))
        })?;

    // Axis 0 slowest: digit a of flat index t is (t / n^(d-1-a)) % n.
    let mut points = Vec::with_capacity(total * d);
    for t in 0..total {
        let mut rem = t;
        let mut digits = vec![0usize; d];
        for a in (0..d).rev() {
            digits[a] = rem % n_per_axis;
            rem /= n_per_axis;
        }
        for a in 0..d {
            points.push(axis[digits[a]]);
        }
    }

    let in_width = d + w_scaled.len();
    let chunks: Vec<(usize, usize)> = (0..total)
        .step_by(FORWARD_CHUNK)
        .map(|lo| (lo, (lo + FORWARD_CHUNK).min(total)))
        .collect();
    let deltas: Vec<f64> = chunks
        .into_par_iter()
        .map(|(lo, hi)| -> Result<Vec<f64>> {
            let rows = hi - lo;
            let mut data = Vec::with_capacity(rows * in_width);
            for t in lo..hi {
                data.extend_from_slice(&points[t * d..(t + 1) * d]);
                data.extend_from_slice(w_scaled);
            }
            let out = decoder.forward_batch(&Matrix::new(rows, in_width, data)?)?;
            Ok((0..rows)
                .map(|r| {
                    out.row(r)
                        .iter()
                        .zip(m_scaled)
                        .map(|(mhat, m)| (m - mhat) * (m - mhat))
                        .sum()
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?
        .concat();
    if !deltas.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { op: "grid discrepancy".into() });
    }
    Ok(GridSweep { d, n_per_axis, points, deltas })
}

/// The grid-search reference posterior: a weighted Gaussian KDE over the
/// lowest-discrepancy latent points. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthPosterior {
    scenario_id: usize,
    d: usize,
    /// Row-major n_f x d, ascending discrepancy order.
    points: Vec<f64>,
    /// Normalized to unit sum.
    weights: Vec<f64>,
    /// Per-axis kernel standard deviations h_d.
    bandwidth: Vec<f64>,
}

impl GroundTruthPosterior {
    /// Builds a KDE from raw (unnormalized) nonnegative weights. `points`
    /// is row-major with `d` coordinates per support point.
    pub fn new(
        scenario_id: usize,
        d: usize,
        points: Vec<f64>,
        raw_weights: Vec<f64>,
        bandwidth: Vec<f64>,
    ) -> Result<Self> {
        if d == 0 {
            return Err(Error::parameter("support dimension must be >= 1"));
        }
        if points.len() != raw_weights.len() * d {
            return Err(Error::arity(
                "support coordinate count",
                raw_weights.len() * d,
                points.len(),
            ));
        }
        if raw_weights.is_empty() {
            return Err(Error::parameter("KDE needs at least one support point"));
        }
        if bandwidth.len() != d {
            return Err(Error::arity("bandwidth length", d, bandwidth.len()));
        }
        if !points.iter().all(|v| v.is_finite()) {
            return Err(Error::parameter("support points must be finite"));
        }
        if !bandwidth.iter().all(|&h| h.is_finite() && h > 0.0) {
            return Err(Error::parameter("bandwidths must be positive and finite"));
        }
        if !raw_weights.iter().all(|&w| w.is_finite() && w >= 0.0) {
            return Err(Error::parameter("weights must be nonnegative and finite"));
        }
        // Two normalization passes: the second removes the first's rounding
        // so the stored weights re-sum to 1 within a few ulps even for
        // clouds of 10^4+ points.
        let mut weights = raw_weights;
        for _ in 0..2 {
            let sum: f64 = weights.iter().sum();
            if !(sum.is_finite() && sum > 0.0) {
                return Err(Error::parameter("weights must have a positive finite sum"));
            }
            for w in &mut weights {
                *w /= sum;
            }
        }
        Ok(GroundTruthPosterior { scenario_id, d, points, weights, bandwidth })
    }

    pub fn scenario_id(&self) -> usize {
        self.scenario_id
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Number of support points.
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, j: usize) -> &[f64] {
        &self.points[j * self.d..(j + 1) * self.d]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Per-axis kernel standard deviations.
    pub fn bandwidth(&self) -> &[f64] {
        &self.bandwidth
    }

    /// The full smoothing matrix S = diag(h_d^2).
    pub fn smoothing_matrix(&self) -> Matrix {
        let mut s = Matrix::zeros(self.d, self.d);
        for (a, &h) in self.bandwidth.iter().enumerate() {
            s.set(a, a, h * h).expect("diagonal index in range");
        }
        s
    }

    /// Kernel normalization constant (2 pi)^(-d/2) |S|^(-1/2).
    fn kernel_norm(&self) -> f64 {
        let two_pi = 2.0 * std::f64::consts::PI;
        two_pi.powf(-(self.d as f64) / 2.0) / self.bandwidth.iter().product::<f64>()
    }

    /// Weighted KDE density at a point.
    pub fn density(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.d {
            return Err(Error::arity("density point length", self.d, z.len()));
        }
        let norm = self.kernel_norm();
        let mut acc = 0.0;
        for j in 0..self.len() {
            let p = self.point(j);
            let mut q = 0.0;
            for a in 0..self.d {
                let t = (z[a] - p[a]) / self.bandwidth[a];
                q += t * t;
            }
            acc += self.weights[j] * (-0.5 * q).exp();
        }
        Ok(acc * norm)
    }

    /// Floored log density; the same floor the evaluation metrics use.
    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        Ok(self.density(z)?.max(DENSITY_FLOOR).ln())
    }

    /// Draws from the KDE mixture: a support point picked by weight plus
    /// kernel noise. Draws are not truncated to the box.
    pub fn sample_batch<R: Rng>(&self, h: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        let pick = WeightedIndex::new(&self.weights)
            .map_err(|e| Error::parameter(format!("KDE weights are not sampleable: {e}")))?;
        Ok((0..h)
            .map(|_| {
                let j = pick.sample(rng);
                let p = self.point(j);
                (0..self.d)
                    .map(|a| {
                        let g: f64 = rng.sample(rand_distr::StandardNormal);
                        p[a] + self.bandwidth[a] * g
                    })
                    .collect()
            })
            .collect())
    }

    /// Density evaluated on the shared uniform grid, rows indexing z1 and
    /// columns z2. The Gaussian kernel separates per axis, so the grid
    /// evaluation is a rank-n_f product of one-axis kernel matrices; one
    /// matmul replaces n^2 * n_f scalar exp calls.
    pub fn density_grid(&self, n_per_axis: usize) -> Result<Matrix> {
        if self.d != 2 {
            return Err(Error::config(format!(
                "grid density rendering covers 2-D domains only, got d={}",
                self.d
            )));
        }
        let axis = grid_axis(n_per_axis)?;
        let n = axis.len();
        let nf = self.len();
        let norm = self.kernel_norm();
        let mut a = Vec::with_capacity(n * nf);
        for &x in &axis {
            for j in 0..nf {
                let t = (x - self.point(j)[0]) / self.bandwidth[0];
                a.push(self.weights[j] * norm * (-0.5 * t * t).exp());
            }
        }
        let mut b = Vec::with_capacity(nf * n);
        for j in 0..nf {
            for &y in &axis {
                let t = (y - self.point(j)[1]) / self.bandwidth[1];
                b.push((-0.5 * t * t).exp());
            }
        }
        Matrix::new(n, nf, a)?.matmul(&Matrix::new(nf, n, b)?)
    }

    /// Highest-density point of the uniform evaluation grid; the first flat
    /// index wins ties.
    pub fn grid_argmax(&self, n_per_axis: usize) -> Result<Vec<f64>> {
        let axis = grid_axis(n_per_axis)?;
        if self.d == 2 {
            let g = self.density_grid(n_per_axis)?;
            let (mut bi, mut bj, mut best) = (0, 0, f64::NEG_INFINITY);
            for i in 0..n_per_axis {
                for j in 0..n_per_axis {
                    let v = g.get(i, j);
                    if v > best {
                        (bi, bj, best) = (i, j, v);
                    }
                }
            }
            return Ok(vec![axis[bi], axis[bj]]);
        }
        let total = n_per_axis
            .checked_pow(self.d as u32)
            .filter(|&t| t <= 100_000_000)
            .ok_or_else(|| Error::parameter("argmax grid too large to enumerate"))?;
        let mut best = (0usize, f64::NEG_INFINITY);
        let mut z = vec![0.0; self.d];
        for t in 0..total {
            let mut rem = t;
            for a in (0..self.d).rev() {
                z[a] = axis[rem % n_per_axis];
                rem /= n_per_axis;
            }
            let v = self.density(&z)?;
            if v > best.1 {
                best = (t, v);
            }
        }
        let mut rem = best.0;
        for a in (0..self.d).rev() {
            z[a] = axis[rem % n_per_axis];
            rem /= n_per_axis;
        }
        Ok(z)
    }

    /// Heatmap export: one `z1,z2,density` row per grid point, z2 fastest.
    pub fn density_grid_csv(&self, n_per_axis: usize) -> Result<String> {
        let axis = grid_axis(n_per_axis)?;
        let g = self.density_grid(n_per_axis)?;
        let mut out = String::from("z1,z2,density\n");
        for i in 0..n_per_axis {
            for j in 0..n_per_axis {
                out.push_str(&format!("{},{},{}\n", axis[i], axis[j], g.get(i, j)));
            }
        }
        Ok(out)
    }

    /// Monte Carlo estimate of the density mass inside the unit box.
    ///
    /// For d = 2 the draws are jitter-stratified: one uniform point per cell
    /// of an s x s partition (s = floor(sqrt(n))) plus iid leftovers. Every
    /// draw is still marginally uniform, so the estimator is unbiased for
    /// the integral; stratification only shrinks its variance.
    pub fn mc_integral<R: Rng>(&self, n_draws: usize, rng: &mut R) -> Result<f64> {
        if n_draws == 0 {
            return Err(Error::parameter("integral estimate needs at least one draw"));
        }
        let mut acc = 0.0;
        let mut z = vec![0.0; self.d];
        let mut left = n_draws;
        if self.d == 2 {
            let s = (n_draws as f64).sqrt().floor() as usize;
            if s >= 1 {
                let w = 1.0 / s as f64;
                for i in 0..s {
                    for j in 0..s {
                        z[0] = (i as f64 + rng.gen_range(0.0..1.0)) * w;
                        z[1] = (j as f64 + rng.gen_range(0.0..1.0)) * w;
                        acc += self.density(&z)?;
                    }
                }
                left -= s * s;
            }
        }
        for _ in 0..left {
            for a in 0..self.d {
                z[a] = rng.gen_range(0.0..1.0);
            }
            acc += self.density(&z)?;
        }
        Ok(acc / n_draws as f64)
    }
}

/// Full reference-posterior construction: sweep, filter to the `n_f` best
/// points, invert floored discrepancies into weights, and fit the kernel
/// bandwidth to the retained cloud.
pub fn build_ground_truth(
    scenario_id: usize,
    m_scaled: &[f64],
    w_scaled: &[f64],
    decoder: &Mlp,
    n_per_axis: usize,
    n_f: usize,
) -> Result<GroundTruthPosterior> {
    let sweep = grid_discrepancies(m_scaled, w_scaled, decoder, n_per_axis)?;
    if n_f == 0 || n_f > sweep.len() {
        return Err(Error::parameter(format!(
            "retained-point count must be in 1..={}, got {n_f}",
            sweep.len()
        )));
    }
    let order = sweep.ascending_indices();
    let d = sweep.dim();
    let mut points = Vec::with_capacity(n_f * d);
    let mut raw_weights = Vec::with_capacity(n_f);
    for &j in order.iter().take(n_f) {
        points.extend_from_slice(sweep.point(j));
        raw_weights.push(1.0 / sweep.delta(j).max(DELTA_FLOOR));
    }

    // Scott's rule per axis over the retained cloud, floored to keep S
    // positive definite for degenerate clouds.
    let scott = (n_f as f64).powf(-1.0 / (d as f64 + 4.0));
    let bandwidth = (0..d)
        .map(|a| {
            let mean = (0..n_f).map(|j| points[j * d + a]).sum::<f64>() / n_f as f64;
            let var = (0..n_f)
                .map(|j| {
                    let t = points[j * d + a] - mean;
                    t * t
                })
                .sum::<f64>()
                / n_f as f64;
            (scott * var.sqrt()).max(BANDWIDTH_FLOOR)
        })
        .collect();
    GroundTruthPosterior::new(scenario_id, d, points, raw_weights, bandwidth)
}
