//! Encoder output heads: routing raw network outputs to posterior parameters.
//!
//! The encoder ends in a linear layer; this module gives each slice of that
//! raw output a meaning and an activation. Mixture weights go through a
//! softmax over `[raw..., 0]` with the last logit pinned to zero, so K weights
//! cost only K-1 raw outputs. Means are squashed into the open unit interval
//! by a sigmoid, scale-like parameters (sigmas, scalings) are made positive
//! by a softplus, rotation angles land in (0, 2pi) via the scaled sigmoid,
//! and copula factor off-diagonals stay unconstrained. The copula factor
//! diagonal is pinned at 1: the correlation matrix is invariant to row
//! rescaling of the factor, so a learned diagonal would be pure redundancy.
//!
//! Raw layout per family (all blocks component-major):
//!   diag gm:  [alpha (K-1) | mu (K*D) | sigma (K*D)]
//!   full gm:  [alpha (K-1) | mu (K*D) | s (K*D) | gamma (K*ngamma)]
//!   copula:   [mu (D) | sigma (D) | l_off (ngamma)]
//! with ngamma = D(D-1)/2 and the copula requiring K = 1.
//!
//! Numeric and taped routing share the same scalar kernels, so both paths
//! produce identical parameter values for identical raw outputs.

use serde::{Deserialize, Serialize};

use crate::distributions::{GaussianCopulaPosterior, GaussianMixture, MixtureCovariance};
use crate::mathcore::{Matrix, Tape, Unary, Var};
use crate::{Error, Result};

/// Posterior family tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PosteriorFamily {
    #[serde(rename = "diag_gm")]
    DiagGm,
    #[serde(rename = "full_gm")]
    FullGm,
    #[serde(rename = "copula")]
    Copula,
}

impl PosteriorFamily {
    pub fn tag(&self) -> &'static str {
        match self {
            PosteriorFamily::DiagGm => "diag_gm",
            PosteriorFamily::FullGm => "full_gm",
            PosteriorFamily::Copula => "copula",
        }
    }

    pub fn from_tag(tag: &str) -> Result<PosteriorFamily> {
        Ok(match tag {
            "diag_gm" => PosteriorFamily::DiagGm,
            "full_gm" => PosteriorFamily::FullGm,
            "copula" => PosteriorFamily::Copula,
            other => return Err(Error::config(format!("unknown posterior family `{other}`"))),
        })
    }
}

/// Shape of the encoder head: family plus component count and dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadLayout {
    pub family: PosteriorFamily,
    pub k: usize,
    pub d: usize,
}

impl HeadLayout {
    pub fn new(family: PosteriorFamily, k: usize, d: usize) -> Result<HeadLayout> {
        if d < 2 {
            return Err(Error::config("head layout requires dimension >= 2"));
        }
        if k == 0 {
            return Err(Error::config("head layout requires k >= 1"));
        }
        if family == PosteriorFamily::Copula && k != 1 {
            return Err(Error::config("the copula family has no mixture components; k must be 1"));
        }
        Ok(HeadLayout { family, k, d })
    }

    /// Number of strict-lower-triangle entries, shared by rotation angles and
    /// copula factor off-diagonals.
    pub fn n_gamma(&self) -> usize {
        self.d * (self.d - 1) / 2
    }

    /// Width of the raw linear output the head consumes. One raw output per
    /// free distribution parameter.
    pub fn raw_width(&self) -> usize {
        match self.family {
            PosteriorFamily::DiagGm => self.k - 1 + 2 * self.k * self.d,
            PosteriorFamily::FullGm => self.k - 1 + 2 * self.k * self.d + self.k * self.n_gamma(),
            PosteriorFamily::Copula => 2 * self.d + self.n_gamma(),
        }
    }

    fn check_width(&self, got: usize) -> Result<()> {
        if got != self.raw_width() {
            return Err(Error::config(format!(
                "head width mismatch for {} (k={}, d={}): expected {} raw outputs, got {got}",
                self.family.tag(),
                self.k,
                self.d,
                self.raw_width()
            )));
        }
        Ok(())
    }

    /// Routes a raw output vector through the head activations.
    pub fn route(&self, raw: &[f64]) -> Result<PosteriorParams> {
        self.check_width(raw.len())?;
        let (k, d) = (self.k, self.d);
        let sigmoid = |x: f64| Unary::Sigmoid.apply(x);
        let softplus = |x: f64| Unary::Softplus.apply(x);
        let angle = |x: f64| Unary::SigmoidScaled2Pi.apply(x);
        let grid = |flat: &[f64], width: usize, f: &dyn Fn(f64) -> f64| -> Vec<Vec<f64>> {
            (0..k)
                .map(|ki| flat[ki * width..(ki + 1) * width].iter().map(|&x| f(x)).collect())
                .collect()
        };
        match self.family {
            PosteriorFamily::DiagGm => {
                let alpha = softmax_with_pinned_zero(&raw[..k - 1]);
                let mu = grid(&raw[k - 1..k - 1 + k * d], d, &sigmoid);
                let sigma = grid(&raw[k - 1 + k * d..], d, &softplus);
                Ok(PosteriorParams::DiagGm { alpha, mu, sigma })
            }
            PosteriorFamily::FullGm => {
                let ng = self.n_gamma();
                let o = k - 1;
                let alpha = softmax_with_pinned_zero(&raw[..o]);
                let mu = grid(&raw[o..o + k * d], d, &sigmoid);
                let s = grid(&raw[o + k * d..o + 2 * k * d], d, &softplus);
                let gamma = grid(&raw[o + 2 * k * d..], ng, &angle);
                Ok(PosteriorParams::FullGm { alpha, mu, s, gamma })
            }
            PosteriorFamily::Copula => {
                let mu: Vec<f64> = raw[..d].iter().map(|&x| sigmoid(x)).collect();
                let sigma: Vec<f64> = raw[d..2 * d].iter().map(|&x| softplus(x)).collect();
                let l_off = raw[2 * d..].to_vec();
                Ok(PosteriorParams::Copula {
                    mu,
                    sigma,
                    l_diag: vec![1.0; d],
                    l_off,
                })
            }
        }
    }

    /// Taped counterpart of [`HeadLayout::route`]; `raw` is a `1 x width` row.
    pub fn route_taped(&self, tape: &mut Tape, raw: Var) -> Result<TapedPosterior> {
        let (rows, width) = tape.shape(raw);
        if rows != 1 {
            return Err(Error::arity("head raw rows", 1, rows));
        }
        self.check_width(width)?;
        let (k, d) = (self.k, self.d);
        let alpha_taped = |tape: &mut Tape| -> Var {
            if k == 1 {
                tape.constant(1, 1, &[1.0])
            } else {
                let logits = tape.slice_cols(raw, 0, k - 1);
                let zero = tape.constant(1, 1, &[0.0]);
                let stacked = tape.hstack(&[logits, zero]);
                tape.softmax_row(stacked)
            }
        };
        let block = |tape: &mut Tape, start: usize, width: usize, u: Option<Unary>| -> Vec<Var> {
            (0..k)
                .map(|ki| {
                    let s = tape.slice_cols(raw, start + ki * width, width);
                    match u {
                        Some(u) => tape.unary(s, u),
                        None => s,
                    }
                })
                .collect()
        };
        match self.family {
            PosteriorFamily::DiagGm => {
                let alpha = alpha_taped(tape);
                let mu = block(tape, k - 1, d, Some(Unary::Sigmoid));
                let sigma = block(tape, k - 1 + k * d, d, Some(Unary::Softplus));
                Ok(TapedPosterior::DiagGm { alpha, mu, sigma, d })
            }
            PosteriorFamily::FullGm => {
                let ng = self.n_gamma();
                let o = k - 1;
                let alpha = alpha_taped(tape);
                let mu = block(tape, o, d, Some(Unary::Sigmoid));
                let s = block(tape, o + k * d, d, Some(Unary::Softplus));
                let gamma = block(tape, o + 2 * k * d, ng, Some(Unary::SigmoidScaled2Pi));
                Ok(TapedPosterior::FullGm { alpha, mu, s, gamma, d })
            }
            PosteriorFamily::Copula => {
                let mu_s = tape.slice_cols(raw, 0, d);
                let mu = tape.unary(mu_s, Unary::Sigmoid);
                let sg_s = tape.slice_cols(raw, d, d);
                let sigma = tape.unary(sg_s, Unary::Softplus);
                let l_off = tape.slice_cols(raw, 2 * d, self.n_gamma());
                Ok(TapedPosterior::Copula { mu, sigma, l_off, d })
            }
        }
    }
}

/// Stable softmax over `[logits..., 0]`: the pinned zero logit supplies the
/// K-th weight. Mirrors the tape's softmax_row arithmetic step for step.
fn softmax_with_pinned_zero(logits: &[f64]) -> Vec<f64> {
    let mut row: Vec<f64> = logits.to_vec();
    row.push(0.0);
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = Unary::Exp.apply(*x - max);
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
    row
}

/// Posterior parameters after head activations, one variant per family.
#[derive(Debug, Clone, PartialEq)]
pub enum PosteriorParams {
    DiagGm {
        alpha: Vec<f64>,
        mu: Vec<Vec<f64>>,
        sigma: Vec<Vec<f64>>,
    },
    FullGm {
        alpha: Vec<f64>,
        mu: Vec<Vec<f64>>,
        s: Vec<Vec<f64>>,
        gamma: Vec<Vec<f64>>,
    },
    Copula {
        mu: Vec<f64>,
        sigma: Vec<f64>,
        l_diag: Vec<f64>,
        l_off: Vec<f64>,
    },
}

impl PosteriorParams {
    pub fn dim(&self) -> usize {
        params_dim(self)
    }

    pub fn k(&self) -> usize {
        match self {
            PosteriorParams::DiagGm { alpha, .. } | PosteriorParams::FullGm { alpha, .. } => {
                alpha.len()
            }
            PosteriorParams::Copula { .. } => 1,
        }
    }

    pub fn family(&self) -> PosteriorFamily {
        match self {
            PosteriorParams::DiagGm { .. } => PosteriorFamily::DiagGm,
            PosteriorParams::FullGm { .. } => PosteriorFamily::FullGm,
            PosteriorParams::Copula { .. } => PosteriorFamily::Copula,
        }
    }

    /// The mixture distribution on the unit hypercube, for the GM families.
    pub fn mixture(&self) -> Result<GaussianMixture> {
        match self {
            PosteriorParams::DiagGm { alpha, mu, sigma } => GaussianMixture::new(
                alpha.clone(),
                mu.clone(),
                MixtureCovariance::Diagonal { sigmas: sigma.clone() },
                0.0,
                1.0,
            ),
            PosteriorParams::FullGm { alpha, mu, s, gamma } => GaussianMixture::new(
                alpha.clone(),
                mu.clone(),
                MixtureCovariance::RotationScaling {
                    scalings: s.clone(),
                    angles: gamma.clone(),
                },
                0.0,
                1.0,
            ),
            PosteriorParams::Copula { .. } => {
                Err(Error::config("copula parameters do not form a mixture"))
            }
        }
    }

    /// The copula posterior, for the copula family. The factor is assembled
    /// from `l_diag` and `l_off` in lexicographic lower-triangle order.
    pub fn copula(&self) -> Result<GaussianCopulaPosterior> {
        match self {
            PosteriorParams::Copula { mu, sigma, l_diag, l_off } => {
                let d = mu.len();
                let mut l = Matrix::zeros(d, d);
                let mut idx = 0;
                for i in 0..d {
                    for j in 0..i {
                        l.set(i, j, l_off[idx])?;
                        idx += 1;
                    }
                    l.set(i, i, l_diag[i])?;
                }
                GaussianCopulaPosterior::new(mu.clone(), sigma.clone(), l)
            }
            _ => Err(Error::config("mixture parameters do not form a copula")),
        }
    }
}

/// Posterior parameters as tape nodes, for assembling differentiable losses.
pub enum TapedPosterior {
    DiagGm {
        /// 1 x K mixture weights.
        alpha: Var,
        /// K rows of 1 x D.
        mu: Vec<Var>,
        sigma: Vec<Var>,
        d: usize,
    },
    FullGm {
        alpha: Var,
        mu: Vec<Var>,
        s: Vec<Var>,
        /// K rows of 1 x ngamma.
        gamma: Vec<Var>,
        d: usize,
    },
    Copula {
        /// 1 x D.
        mu: Var,
        sigma: Var,
        /// 1 x ngamma, lexicographic lower-triangle order.
        l_off: Var,
        d: usize,
    },
}

impl TapedPosterior {
    /// Registers already-activated parameter values on a tape, as leaves
    /// (trainable) or constants. Used for losses evaluated at explicit
    /// parameters rather than behind an encoder. The taped copula carries no
    /// factor diagonal (it is pinned at 1 by the head), so parameters with a
    /// rescaled diagonal are rejected rather than silently renormalized.
    pub fn from_params(
        tape: &mut Tape,
        params: &PosteriorParams,
        trainable: bool,
    ) -> Result<TapedPosterior> {
        let mut reg = |data: &[f64]| {
            if trainable {
                tape.leaf(1, data.len(), data)
            } else {
                tape.constant(1, data.len(), data)
            }
        };
        Ok(match params {
            PosteriorParams::DiagGm { alpha, mu, sigma } => {
                let a = reg(alpha);
                let mu = mu.iter().map(|row| reg(row)).collect();
                let sigma = sigma.iter().map(|row| reg(row)).collect();
                TapedPosterior::DiagGm { alpha: a, mu, sigma, d: params_dim(params) }
            }
            PosteriorParams::FullGm { alpha, mu, s, gamma } => {
                let a = reg(alpha);
                let mu_v = mu.iter().map(|row| reg(row)).collect();
                let s_v = s.iter().map(|row| reg(row)).collect();
                let g_v = gamma.iter().map(|row| reg(row)).collect();
                TapedPosterior::FullGm { alpha: a, mu: mu_v, s: s_v, gamma: g_v, d: params_dim(params) }
            }
            PosteriorParams::Copula { mu, sigma, l_diag, l_off } => {
                if l_diag.iter().any(|&v| v != 1.0) {
                    return Err(Error::config(
                        "taped copula parameters require a unit factor diagonal",
                    ));
                }
                let mu_v = reg(mu);
                let sg_v = reg(sigma);
                let lo_v = reg(l_off);
                TapedPosterior::Copula { mu: mu_v, sigma: sg_v, l_off: lo_v, d: mu.len() }
            }
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            TapedPosterior::DiagGm { d, .. }
            | TapedPosterior::FullGm { d, .. }
            | TapedPosterior::Copula { d, .. } => *d,
        }
    }

    pub fn k(&self) -> usize {
        match self {
            TapedPosterior::DiagGm { mu, .. } | TapedPosterior::FullGm { mu, .. } => mu.len(),
            TapedPosterior::Copula { .. } => 1,
        }
    }
}

fn params_dim(params: &PosteriorParams) -> usize {
    match params {
        PosteriorParams::DiagGm { mu, .. } | PosteriorParams::FullGm { mu, .. } => mu[0].len(),
        PosteriorParams::Copula { mu, .. } => mu.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::TAU;

    #[test]
    fn layout_widths() {
        let diag = HeadLayout::new(PosteriorFamily::DiagGm, 3, 2).unwrap();
        assert_eq!(diag.raw_width(), 2 + 12);
        let full1 = HeadLayout::new(PosteriorFamily::FullGm, 1, 2).unwrap();
        assert_eq!(full1.raw_width(), 5);
        let full2 = HeadLayout::new(PosteriorFamily::FullGm, 2, 2).unwrap();
        assert_eq!(full2.raw_width(), 1 + 8 + 2);
        let cop = HeadLayout::new(PosteriorFamily::Copula, 1, 2).unwrap();
        assert_eq!(cop.raw_width(), 5);
    }

    #[test]
    fn layout_validation() {
        assert!(HeadLayout::new(PosteriorFamily::DiagGm, 0, 2).is_err());
        assert!(HeadLayout::new(PosteriorFamily::DiagGm, 2, 1).is_err());
        assert!(HeadLayout::new(PosteriorFamily::Copula, 2, 2).is_err());
        let layout = HeadLayout::new(PosteriorFamily::DiagGm, 2, 2).unwrap();
        assert!(matches!(layout.route(&[0.0; 3]), Err(Error::Config(_))));
        assert!(matches!(PosteriorFamily::from_tag("gaussian"), Err(Error::Config(_))));
    }

    #[test]
    fn diag_head_contract() {
        let layout = HeadLayout::new(PosteriorFamily::DiagGm, 3, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let raw: Vec<f64> = (0..layout.raw_width()).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let params = layout.route(&raw).unwrap();
            let PosteriorParams::DiagGm { alpha, mu, sigma } = &params else {
                panic!("wrong family")
            };
            assert_eq!(alpha.len(), 3);
            let sum: f64 = alpha.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(alpha.iter().all(|&a| a > 0.0));
            assert!(mu.iter().flatten().all(|&m| m > 0.0 && m < 1.0));
            assert!(sigma.iter().flatten().all(|&s| s > 0.0));
            // Routed parameters must form a valid mixture.
            params.mixture().unwrap();
        }
    }

    #[test]
    fn copula_head_routes_five_raw_outputs() {
        let layout = HeadLayout::new(PosteriorFamily::Copula, 1, 2).unwrap();
        let raw = [0.3, -0.7, 0.1, 1.4, -2.2];
        let params = layout.route(&raw).unwrap();
        let PosteriorParams::Copula { mu, sigma, l_diag, l_off } = &params else {
            panic!("wrong family")
        };
        assert_eq!(mu, &[Unary::Sigmoid.apply(0.3), Unary::Sigmoid.apply(-0.7)]);
        assert_eq!(sigma, &[Unary::Softplus.apply(0.1), Unary::Softplus.apply(1.4)]);
        assert_eq!(l_diag, &[1.0, 1.0]);
        assert_eq!(l_off, &[-2.2]);
        params.copula().unwrap();
    }

    #[test]
    fn full_gm_k1_d2_uses_five_outputs_and_drops_alpha() {
        let layout = HeadLayout::new(PosteriorFamily::FullGm, 1, 2).unwrap();
        assert_eq!(layout.raw_width(), 5);
        let raw = [0.2, -0.4, 0.6, -1.0, 3.0];
        let params = layout.route(&raw).unwrap();
        let PosteriorParams::FullGm { alpha, mu, s, gamma } = &params else {
            panic!("wrong family")
        };
        assert_eq!(alpha, &[1.0]);
        assert_eq!(mu[0], vec![Unary::Sigmoid.apply(0.2), Unary::Sigmoid.apply(-0.4)]);
        assert_eq!(s[0], vec![Unary::Softplus.apply(0.6), Unary::Softplus.apply(-1.0)]);
        let g = gamma[0][0];
        assert!(g > 0.0 && g < TAU);
        assert_eq!(g, Unary::SigmoidScaled2Pi.apply(3.0));
        params.mixture().unwrap();
    }

    #[test]
    fn pinned_zero_softmax_k1_is_degenerate() {
        assert_eq!(softmax_with_pinned_zero(&[]), vec![1.0]);
        let w = softmax_with_pinned_zero(&[1.0, -0.5]);
        assert_eq!(w.len(), 3);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // The pinned logit contributes exp(0) before normalization.
        let e: Vec<f64> = [1.0, -0.5, 0.0].iter().map(|x| (x - 1.0f64).exp()).collect();
        let s: f64 = e.iter().sum();
        for (a, b) in w.iter().zip(&e) {
            assert!((a - b / s).abs() < 1e-15);
        }
    }

    #[test]
    fn taped_route_matches_numeric() {
        let layouts = [
            HeadLayout::new(PosteriorFamily::DiagGm, 3, 2).unwrap(),
            HeadLayout::new(PosteriorFamily::FullGm, 2, 2).unwrap(),
            HeadLayout::new(PosteriorFamily::Copula, 1, 2).unwrap(),
            HeadLayout::new(PosteriorFamily::DiagGm, 1, 2).unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for layout in layouts {
            let raw: Vec<f64> = (0..layout.raw_width()).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let params = layout.route(&raw).unwrap();
            let mut tape = Tape::new();
            let rv = tape.constant(1, raw.len(), &raw);
            let taped = layout.route_taped(&mut tape, rv).unwrap();
            match (&params, &taped) {
                (PosteriorParams::DiagGm { alpha, mu, sigma }, TapedPosterior::DiagGm { alpha: av, mu: mv, sigma: sv, .. }) => {
                    assert_eq!(tape.value(*av), alpha.as_slice());
                    for (k, row) in mu.iter().enumerate() {
                        assert_eq!(tape.value(mv[k]), row.as_slice());
                    }
                    for (k, row) in sigma.iter().enumerate() {
                        assert_eq!(tape.value(sv[k]), row.as_slice());
                    }
                }
                (PosteriorParams::FullGm { alpha, mu, s, gamma }, TapedPosterior::FullGm { alpha: av, mu: mv, s: sv, gamma: gv, .. }) => {
                    assert_eq!(tape.value(*av), alpha.as_slice());
                    for k in 0..mu.len() {
                        assert_eq!(tape.value(mv[k]), mu[k].as_slice());
                        assert_eq!(tape.value(sv[k]), s[k].as_slice());
                        assert_eq!(tape.value(gv[k]), gamma[k].as_slice());
                    }
                }
                (PosteriorParams::Copula { mu, sigma, l_off, .. }, TapedPosterior::Copula { mu: mv, sigma: sv, l_off: lv, .. }) => {
                    assert_eq!(tape.value(*mv), mu.as_slice());
                    assert_eq!(tape.value(*sv), sigma.as_slice());
                    assert_eq!(tape.value(*lv), l_off.as_slice());
                }
                _ => panic!("family mismatch"),
            }
        }
    }

    #[test]
    fn copula_factor_assembly_order() {
        // d = 3 exercises the lexicographic order (1,0), (2,0), (2,1).
        let params = PosteriorParams::Copula {
            mu: vec![0.4, 0.5, 0.6],
            sigma: vec![0.2, 0.3, 0.4],
            l_diag: vec![1.0, 1.0, 1.0],
            l_off: vec![0.5, -0.25, 0.75],
        };
        let post = params.copula().unwrap();
        let l = post.chol();
        assert_eq!(l.get(1, 0), 0.5);
        assert_eq!(l.get(2, 0), -0.25);
        assert_eq!(l.get(2, 1), 0.75);
        assert_eq!(l.get(0, 0), 1.0);
        assert_eq!(l.get(0, 1), 0.0);
    }
}
