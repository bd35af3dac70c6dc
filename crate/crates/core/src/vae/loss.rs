//! The variational loss, built end to end on the gradient tape.
//!
//! The loss for one observation (m, w) is a Monte Carlo average over H
//! posterior draws z_h of
//!
//!   1/2 (m - F(z_h, w))^T Gamma^-1 (m - F(z_h, w)) + ln q(z_h | m, w)
//!
//! with Gamma = diag((beta F)^2) floored elementwise, F the frozen decoder,
//! and q the truncated posterior density. Minimizing it tightens a
//! variational bound on the (flat-prior) posterior, so smaller is better.
//!
//! Everything differentiable is a tape node; randomness enters only through
//! frozen traces. A mixture draw keeps its component index and standard
//! normal vector, so z_h = mu_k + sqrt-factor * eps is an explicit function
//! of the distribution parameters and the density denominator (the truncated
//! mass) is estimated from a frozen set of uniform points. A copula draw
//! keeps its normal vector and replays the full reparameterization, quantile
//! function included, as tape ops. There is no separate numeric
//! implementation to drift out of sync: evaluating the loss without
//! gradients just registers the parameters as constants.
//!
//! The truncated-mass estimate rides on the identity that a Gaussian
//! exponent is a quadratic polynomial: for fixed points u_n the matrix of
//! monomials [u_p u_q | u_p | 1] is constant, and the exponent row is the
//! matmul of a parameter-dependent coefficient row with it. That keeps the
//! per-point work out of the differentiable graph.

use crate::distributions::DENSITY_FLOOR;
use crate::mathcore::{Matrix, Tape, Unary, Var};
use crate::nn::{Mlp, TapedMlp};
use crate::vae::heads::{PosteriorFamily, PosteriorParams, TapedPosterior};
use crate::{Error, Result};
use rand::Rng;
use std::f64::consts::TAU;

/// Default relative observation-noise level.
pub const BETA_DEFAULT: f64 = 0.075;

/// Floor for the per-feature noise variance (beta * F)^2.
pub const GAMMA_FLOOR: f64 = 1e-12;

/// Default number of uniform points for the truncated-mass estimate.
pub const N_MC_DEFAULT: usize = 4096;

/// Default cap on mixture rejection-sampling rounds.
pub const MAX_REJECTION_ROUNDS_DEFAULT: usize = 1000;

/// Heteroscedastic observation noise: per-feature standard deviation
/// proportional to the predicted feature itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    beta: f64,
}

impl NoiseModel {
    pub fn new(beta: f64) -> Result<NoiseModel> {
        if !beta.is_finite() || beta <= 0.0 {
            return Err(Error::parameter(format!(
                "noise level beta must be finite and positive, got {beta}"
            )));
        }
        Ok(NoiseModel { beta })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel { beta: BETA_DEFAULT }
    }
}

/// Frozen randomness for one posterior draw.
#[derive(Debug, Clone, PartialEq)]
pub enum Trace {
    /// Mixture draw: accepted component index and its standard normal vector.
    Gm { component: usize, eps: Vec<f64> },
    /// Copula draw: the standard normal vector behind the reparameterization.
    Copula { eps: Vec<f64> },
}

/// Draws `h` posterior samples and keeps only their frozen randomness.
/// Mixture families rejection-sample (the component pick and acceptance are
/// not differentiated through); the copula needs no rejection.
pub fn draw_traces<R: Rng>(
    params: &PosteriorParams,
    h: usize,
    max_rounds: usize,
    rng: &mut R,
) -> Result<Vec<Trace>> {
    match params.family() {
        PosteriorFamily::DiagGm | PosteriorFamily::FullGm => {
            let gm = params.mixture()?;
            Ok(gm
                .rejection_sample_traced(h, max_rounds, rng)?
                .into_iter()
                .map(|d| Trace::Gm { component: d.component, eps: d.eps })
                .collect())
        }
        PosteriorFamily::Copula => {
            let post = params.copula()?;
            Ok(post
                .sample_traced(h, rng)?
                .into_iter()
                .map(|d| Trace::Copula { eps: d.eps })
                .collect())
        }
    }
}

/// Draws `n_mc` uniform points on the unit hypercube, row per point, in the
/// same stream order the mixture's own normalization estimate uses, so a
/// cloned generator reproduces its exact point set.
pub fn draw_mc_uniforms<R: Rng>(n_mc: usize, d: usize, rng: &mut R) -> Result<Matrix> {
    if n_mc == 0 {
        return Err(Error::parameter("mc normalization requires n_mc >= 1"));
    }
    let mut m = Matrix::zeros(n_mc, d);
    for i in 0..n_mc {
        for j in 0..d {
            m.set(i, j, rng.gen_range(0.0..1.0))?;
        }
    }
    Ok(m)
}

/// The assembled loss and its two summands, as tape nodes.
pub struct ElboTerms {
    /// data + logq, the quantity to minimize.
    pub loss: Var,
    /// Mean weighted squared residual term.
    pub data: Var,
    /// Mean truncated log-density of the draws.
    pub logq: Var,
}

/// Builds the loss on `tape` for one observation. `post` and `decoder` must
/// already live on the tape; `traces` supplies the frozen randomness and
/// `mc_uniforms` the frozen points for the mixture-mass estimate (required
/// for the mixture families, ignored by the copula).
pub fn elbo_taped(
    tape: &mut Tape,
    post: &TapedPosterior,
    decoder: &TapedMlp,
    m_scaled: &[f64],
    w_scaled: &[f64],
    noise: &NoiseModel,
    traces: &[Trace],
    mc_uniforms: Option<&Matrix>,
) -> Result<ElboTerms> {
    if traces.is_empty() {
        return Err(Error::parameter("elbo requires at least one trace"));
    }
    let m_const = tape.constant(1, m_scaled.len(), m_scaled);
    let w_const = tape.constant(1, w_scaled.len(), w_scaled);
    let is_gm = !matches!(post, TapedPosterior::Copula { .. });
    let ln_c = if is_gm {
        let u = mc_uniforms.ok_or_else(|| {
            Error::parameter("mixture elbo requires Monte Carlo normalization points")
        })?;
        Some(taped_gm_ln_constant(tape, post, u)?)
    } else {
        None
    };
    let mut data_acc: Option<Var> = None;
    let mut logq_acc: Option<Var> = None;
    for trace in traces {
        let (z, ln_q_part) = match (post, trace) {
            (TapedPosterior::Copula { .. }, Trace::Copula { eps }) => {
                let s = taped_copula_sample(tape, post, eps)?;
                (s.z, s.logq)
            }
            (_, Trace::Gm { component, eps }) if is_gm => {
                let z = taped_gm_z(tape, post, *component, eps)?;
                let lp = taped_gm_ln_pdf(tape, post, z)?;
                (z, lp)
            }
            _ => return Err(Error::parameter("trace kind does not match posterior family")),
        };
        let x = tape.hstack(&[z, w_const]);
        let f = decoder.forward(tape, x)?;
        let r = tape.sub(m_const, f);
        let r2 = tape.unary(r, Unary::Square);
        let sd = tape.scale(f, noise.beta());
        let var = tape.unary(sd, Unary::Square);
        let var = tape.unary(var, Unary::FloorAt(GAMMA_FLOOR));
        let ratio = tape.div(r2, var);
        let total = tape.sum(ratio);
        let term = tape.scale(total, 0.5);
        data_acc = Some(match data_acc {
            Some(a) => tape.add(a, term),
            None => term,
        });
        logq_acc = Some(match logq_acc {
            Some(a) => tape.add(a, ln_q_part),
            None => ln_q_part,
        });
    }
    let h_inv = 1.0 / traces.len() as f64;
    let data = tape.scale(data_acc.expect("nonempty traces"), h_inv);
    let mut logq = tape.scale(logq_acc.expect("nonempty traces"), h_inv);
    if let Some(c) = ln_c {
        logq = tape.sub(logq, c);
    }
    let loss = tape.add(data, logq);
    Ok(ElboTerms { loss, data, logq })
}

/// Loss and summand values for one observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboValue {
    pub loss: f64,
    pub data: f64,
    pub logq: f64,
}

/// Evaluates the loss at explicit posterior parameters, no gradients kept.
/// Same tape construction as training, with everything registered constant.
pub fn elbo_terms_value(
    params: &PosteriorParams,
    decoder: &Mlp,
    m_scaled: &[f64],
    w_scaled: &[f64],
    noise: &NoiseModel,
    traces: &[Trace],
    mc_uniforms: Option<&Matrix>,
) -> Result<ElboValue> {
    let mut tape = Tape::new();
    let post = TapedPosterior::from_params(&mut tape, params, false)?;
    let dec = decoder.register(&mut tape, false)?;
    let terms = elbo_taped(&mut tape, &post, &dec, m_scaled, w_scaled, noise, traces, mc_uniforms)?;
    let out = ElboValue {
        loss: tape.value(terms.loss)[0],
        data: tape.value(terms.data)[0],
        logq: tape.value(terms.logq)[0],
    };
    if !out.loss.is_finite() {
        return Err(Error::NonFinite { op: "elbo loss".into() });
    }
    Ok(out)
}

/// Draws fresh randomness and evaluates the loss: traces first, then (for
/// the mixture families) the uniform normalization points, from the same
/// generator.
#[allow(clippy::too_many_arguments)]
pub fn elbo_loss<R: Rng>(
    params: &PosteriorParams,
    decoder: &Mlp,
    m_scaled: &[f64],
    w_scaled: &[f64],
    noise: &NoiseModel,
    h: usize,
    n_mc: usize,
    max_rounds: usize,
    rng: &mut R,
) -> Result<f64> {
    if h == 0 {
        return Err(Error::parameter("elbo requires h >= 1"));
    }
    let traces = draw_traces(params, h, max_rounds, rng)?;
    let uniforms = match params.family() {
        PosteriorFamily::Copula => None,
        _ => Some(draw_mc_uniforms(n_mc, params.dim(), rng)?),
    };
    let v = elbo_terms_value(params, decoder, m_scaled, w_scaled, noise, &traces, uniforms.as_ref())?;
    Ok(v.loss)
}

/// z = mu_k + sqrt-factor_k * eps as tape ops, component and eps frozen.
fn taped_gm_z(tape: &mut Tape, post: &TapedPosterior, component: usize, eps: &[f64]) -> Result<Var> {
    match post {
        TapedPosterior::DiagGm { mu, sigma, d, .. } => {
            if eps.len() != *d {
                return Err(Error::arity("trace eps length", *d, eps.len()));
            }
            if component >= mu.len() {
                return Err(Error::parameter("trace component out of range"));
            }
            let e = tape.constant(1, *d, eps);
            let se = tape.mul(sigma[component], e);
            Ok(tape.add(mu[component], se))
        }
        TapedPosterior::FullGm { mu, s, gamma, d, .. } => {
            if *d != 2 {
                return Err(Error::config("taped rotated mixtures support d = 2 only"));
            }
            if eps.len() != 2 {
                return Err(Error::arity("trace eps length", 2, eps.len()));
            }
            if component >= mu.len() {
                return Err(Error::parameter("trace component out of range"));
            }
            // z = mu + R(gamma) diag(s) eps with R = [[c, -s], [s, c]].
            let g = gamma[component];
            let co = tape.unary(g, Unary::Cos);
            let sn = tape.unary(g, Unary::Sin);
            let s1 = tape.slice_cols(s[component], 0, 1);
            let s2 = tape.slice_cols(s[component], 1, 1);
            let e1 = tape.constant(1, 1, &eps[..1]);
            let e2 = tape.constant(1, 1, &eps[1..]);
            let a = tape.mul(s1, e1);
            let b = tape.mul(s2, e2);
            let ca = tape.mul(co, a);
            let sb = tape.mul(sn, b);
            let dz1 = tape.sub(ca, sb);
            let sa = tape.mul(sn, a);
            let cb = tape.mul(co, b);
            let dz2 = tape.add(sa, cb);
            let m1 = tape.slice_cols(mu[component], 0, 1);
            let m2 = tape.slice_cols(mu[component], 1, 1);
            let z1 = tape.add(m1, dz1);
            let z2 = tape.add(m2, dz2);
            Ok(tape.hstack(&[z1, z2]))
        }
        TapedPosterior::Copula { .. } => {
            Err(Error::parameter("mixture trace applied to copula posterior"))
        }
    }
}

/// (2 pi)^(-d/2) / prod(scl) as a tape scalar.
fn taped_gauss_norm(tape: &mut Tape, scl: Var, d: usize) -> Var {
    let inv = tape.unary(scl, Unary::Recip);
    let mut prod = tape.slice_cols(inv, 0, 1);
    for i in 1..d {
        let s = tape.slice_cols(inv, i, 1);
        prod = tape.mul(prod, s);
    }
    tape.scale(prod, TAU.powf(-0.5 * d as f64))
}

/// ln of the untruncated mixture density at a taped point `z` (1 x d).
fn taped_gm_ln_pdf(tape: &mut Tape, post: &TapedPosterior, z: Var) -> Result<Var> {
    let mut acc: Option<Var> = None;
    match post {
        TapedPosterior::DiagGm { alpha, mu, sigma, d } => {
            for k in 0..mu.len() {
                let y = tape.sub(z, mu[k]);
                let t = tape.div(y, sigma[k]);
                let t2 = tape.unary(t, Unary::Square);
                let q = tape.sum(t2);
                let qn = tape.scale(q, -0.5);
                let e = tape.unary(qn, Unary::Exp);
                let norm = taped_gauss_norm(tape, sigma[k], *d);
                let ak = tape.slice_cols(*alpha, k, 1);
                let an = tape.mul(ak, norm);
                let comp = tape.mul(an, e);
                acc = Some(match acc {
                    Some(a) => tape.add(a, comp),
                    None => comp,
                });
            }
        }
        TapedPosterior::FullGm { alpha, mu, s, gamma, d } => {
            if *d != 2 {
                return Err(Error::config("taped rotated mixtures support d = 2 only"));
            }
            for k in 0..mu.len() {
                // t = diag(s)^-1 R^T (z - mu); quad = |t|^2.
                let y = tape.sub(z, mu[k]);
                let y1 = tape.slice_cols(y, 0, 1);
                let y2 = tape.slice_cols(y, 1, 1);
                let g = gamma[k];
                let co = tape.unary(g, Unary::Cos);
                let sn = tape.unary(g, Unary::Sin);
                let cy1 = tape.mul(co, y1);
                let sy2 = tape.mul(sn, y2);
                let u1 = tape.add(cy1, sy2);
                let cy2 = tape.mul(co, y2);
                let sy1 = tape.mul(sn, y1);
                let u2 = tape.sub(cy2, sy1);
                let s1 = tape.slice_cols(s[k], 0, 1);
                let s2 = tape.slice_cols(s[k], 1, 1);
                let t1 = tape.div(u1, s1);
                let t2 = tape.div(u2, s2);
                let t1s = tape.unary(t1, Unary::Square);
                let t2s = tape.unary(t2, Unary::Square);
                let q = tape.add(t1s, t2s);
                let qn = tape.scale(q, -0.5);
                let e = tape.unary(qn, Unary::Exp);
                let norm = taped_gauss_norm(tape, s[k], *d);
                let ak = tape.slice_cols(*alpha, k, 1);
                let an = tape.mul(ak, norm);
                let comp = tape.mul(an, e);
                acc = Some(match acc {
                    Some(a) => tape.add(a, comp),
                    None => comp,
                });
            }
        }
        TapedPosterior::Copula { .. } => {
            return Err(Error::parameter("mixture density requested from copula posterior"));
        }
    }
    let p = acc.expect("k >= 1");
    let fl = tape.unary(p, Unary::FloorAt(DENSITY_FLOOR));
    Ok(tape.unary(fl, Unary::Ln))
}

/// ln of the Monte Carlo estimate of the mixture mass on the unit hypercube,
/// over the frozen points in `uniforms` (row per point). The Gaussian
/// exponent at each point is a quadratic in the point coordinates, so per
/// component it is one coefficient row times a constant monomial matrix.
fn taped_gm_ln_constant(tape: &mut Tape, post: &TapedPosterior, uniforms: &Matrix) -> Result<Var> {
    let d = post.dim();
    if uniforms.cols() != d {
        return Err(Error::arity("mc uniform dimension", d, uniforms.cols()));
    }
    let n = uniforms.rows();
    if n == 0 {
        return Err(Error::parameter("mc normalization requires at least one point"));
    }
    // Monomial matrix: rows [u_p u_q (p <= q, lex) | u_p | 1], one column per point.
    let f_count = d * (d + 1) / 2 + d + 1;
    let mut feat = vec![0.0; f_count * n];
    for pt in 0..n {
        let mut fi = 0;
        for p in 0..d {
            for q in p..d {
                feat[fi * n + pt] = uniforms.get(pt, p) * uniforms.get(pt, q);
                fi += 1;
            }
        }
        for p in 0..d {
            feat[fi * n + pt] = uniforms.get(pt, p);
            fi += 1;
        }
        feat[fi * n + pt] = 1.0;
    }
    let mt = tape.constant(f_count, n, &feat);
    let k = post.k();
    let mut acc: Option<Var> = None;
    for ki in 0..k {
        // Coefficient row for the exponent u^T A u - 2 (A mu)^T u + mu^T A mu,
        // in the same feature order as `mt`.
        let (entries, norm, alpha) = match post {
            TapedPosterior::DiagGm { alpha, mu, sigma, .. } => {
                let inv = tape.unary(sigma[ki], Unary::Recip);
                let inv_var = tape.unary(inv, Unary::Square);
                let mut entries: Vec<Var> = Vec::with_capacity(f_count);
                for p in 0..d {
                    for q in p..d {
                        if p == q {
                            entries.push(tape.slice_cols(inv_var, p, 1));
                        } else {
                            entries.push(tape.constant(1, 1, &[0.0]));
                        }
                    }
                }
                let mut amu: Vec<Var> = Vec::with_capacity(d);
                for p in 0..d {
                    let mp = tape.slice_cols(mu[ki], p, 1);
                    let ap = tape.slice_cols(inv_var, p, 1);
                    amu.push(tape.mul(mp, ap));
                }
                for &a in &amu {
                    entries.push(tape.scale(a, -2.0));
                }
                let mut quad: Option<Var> = None;
                for p in 0..d {
                    let mp = tape.slice_cols(mu[ki], p, 1);
                    let t = tape.mul(mp, amu[p]);
                    quad = Some(match quad {
                        Some(a) => tape.add(a, t),
                        None => t,
                    });
                }
                entries.push(quad.expect("d >= 1"));
                let norm = taped_gauss_norm(tape, sigma[ki], d);
                (entries, norm, *alpha)
            }
            TapedPosterior::FullGm { alpha, mu, s, gamma, .. } => {
                if d != 2 {
                    return Err(Error::config("taped rotated mixtures support d = 2 only"));
                }
                // A = R diag(s^-2) R^T, spelled out for d = 2.
                let g = gamma[ki];
                let co = tape.unary(g, Unary::Cos);
                let sn = tape.unary(g, Unary::Sin);
                let s1 = tape.slice_cols(s[ki], 0, 1);
                let s2 = tape.slice_cols(s[ki], 1, 1);
                let r1 = tape.unary(s1, Unary::Recip);
                let r2 = tape.unary(s2, Unary::Recip);
                let i1 = tape.unary(r1, Unary::Square);
                let i2 = tape.unary(r2, Unary::Square);
                let c2 = tape.unary(co, Unary::Square);
                let sn2 = tape.unary(sn, Unary::Square);
                let c2i1 = tape.mul(c2, i1);
                let s2i2 = tape.mul(sn2, i2);
                let a11 = tape.add(c2i1, s2i2);
                let s2i1 = tape.mul(sn2, i1);
                let c2i2 = tape.mul(c2, i2);
                let a22 = tape.add(s2i1, c2i2);
                let cs = tape.mul(co, sn);
                let idiff = tape.sub(i1, i2);
                let a12 = tape.mul(cs, idiff);
                let m1 = tape.slice_cols(mu[ki], 0, 1);
                let m2 = tape.slice_cols(mu[ki], 1, 1);
                let a11m1 = tape.mul(a11, m1);
                let a12m2 = tape.mul(a12, m2);
                let amu1 = tape.add(a11m1, a12m2);
                let a12m1 = tape.mul(a12, m1);
                let a22m2 = tape.mul(a22, m2);
                let amu2 = tape.add(a12m1, a22m2);
                let m1a1 = tape.mul(m1, amu1);
                let m2a2 = tape.mul(m2, amu2);
                let quad = tape.add(m1a1, m2a2);
                let a12x2 = tape.scale(a12, 2.0);
                let amu1n = tape.scale(amu1, -2.0);
                let amu2n = tape.scale(amu2, -2.0);
                let entries = vec![a11, a12x2, a22, amu1n, amu2n, quad];
                let norm = taped_gauss_norm(tape, s[ki], d);
                (entries, norm, *alpha)
            }
            TapedPosterior::Copula { .. } => {
                return Err(Error::parameter("mixture mass requested from copula posterior"));
            }
        };
        let c_row = tape.hstack(&entries);
        let q = tape.matmul(c_row, mt);
        let qn = tape.scale(q, -0.5);
        let e = tape.unary(qn, Unary::Exp);
        let ssum = tape.sum(e);
        let ak = tape.slice_cols(alpha, ki, 1);
        let an = tape.mul(ak, norm);
        let comp = tape.mul(an, ssum);
        acc = Some(match acc {
            Some(a) => tape.add(a, comp),
            None => comp,
        });
    }
    // Unit-volume domain: the estimate is the plain average.
    let c_hat = tape.scale(acc.expect("k >= 1"), 1.0 / n as f64);
    let fl = tape.unary(c_hat, Unary::FloorAt(DENSITY_FLOOR));
    Ok(tape.unary(fl, Unary::Ln))
}

struct TapedCopulaSample {
    z: Var,
    logq: Var,
}

/// Replays the copula reparameterization for one frozen normal vector and
/// accumulates its truncated log-density, all as tape ops.
///
/// The factor diagonal is pinned at 1, so row i of the normalized factor is
/// [l_i* , 1] / sqrt(1 + sum l_i*^2) and v = Lhat eps. Because the marginal
/// means sit strictly inside the unit interval, the lower standardized bound
/// is negative and the quantile can stay in cdf space: t = Phi^-1(Phi(a) +
/// u (Phi(b) - Phi(a))) never runs out of floating-point range. The copula
/// log-density collapses to -(|eps|^2 - |v|^2)/2 - sum ln Lhat_ii since the
/// whitened vector Lhat^-1 v is eps itself.
fn taped_copula_sample(tape: &mut Tape, post: &TapedPosterior, eps: &[f64]) -> Result<TapedCopulaSample> {
    let TapedPosterior::Copula { mu, sigma, l_off, d } = post else {
        return Err(Error::parameter("copula trace applied to mixture posterior"));
    };
    let d = *d;
    if eps.len() != d {
        return Err(Error::arity("trace eps length", d, eps.len()));
    }
    let mu_vals = tape.value(*mu).to_vec();
    if mu_vals.iter().any(|&m| !(m > 0.0 && m < 1.0)) {
        return Err(Error::domain(
            "copula reparameterization requires marginal means strictly inside the unit interval",
        ));
    }
    let mut row_offs: Vec<Vec<Var>> = Vec::with_capacity(d);
    let mut inv_norms: Vec<Var> = Vec::with_capacity(d);
    let mut idx = 0;
    for i in 0..d {
        let mut row = Vec::with_capacity(i);
        let mut sq: Option<Var> = None;
        for _ in 0..i {
            let l = tape.slice_cols(*l_off, idx, 1);
            idx += 1;
            let l2 = tape.unary(l, Unary::Square);
            sq = Some(match sq {
                Some(a) => tape.add(a, l2),
                None => l2,
            });
            row.push(l);
        }
        let inv = match sq {
            None => tape.constant(1, 1, &[1.0]),
            Some(sq) => {
                let n2 = tape.add_const(sq, 1.0);
                let nrm = tape.unary(n2, Unary::Sqrt);
                tape.unary(nrm, Unary::Recip)
            }
        };
        inv_norms.push(inv);
        row_offs.push(row);
    }
    let mut vs = Vec::with_capacity(d);
    for i in 0..d {
        let mut acc = tape.constant(1, 1, &eps[i..i + 1]);
        for (j, &l) in row_offs[i].iter().enumerate() {
            let ec = tape.constant(1, 1, &eps[j..j + 1]);
            let le = tape.mul(l, ec);
            acc = tape.add(acc, le);
        }
        vs.push(tape.mul(inv_norms[i], acc));
    }
    let mut zs = Vec::with_capacity(d);
    let mut logf_acc: Option<Var> = None;
    let mut vsq_acc: Option<Var> = None;
    for (i, &v) in vs.iter().enumerate() {
        let v2 = tape.unary(v, Unary::Square);
        vsq_acc = Some(match vsq_acc {
            Some(a) => tape.add(a, v2),
            None => v2,
        });
        let u = tape.unary(v, Unary::NormalCdf);
        let mu_i = tape.slice_cols(*mu, i, 1);
        let sg_i = tape.slice_cols(*sigma, i, 1);
        let nmu = tape.unary(mu_i, Unary::Neg);
        let a = tape.div(nmu, sg_i);
        let omm = tape.add_const(nmu, 1.0);
        let b = tape.div(omm, sg_i);
        let fa = tape.unary(a, Unary::NormalCdf);
        let fb = tape.unary(b, Unary::NormalCdf);
        let mass = tape.sub(fb, fa);
        let um = tape.mul(u, mass);
        let p = tape.add(fa, um);
        let t = tape.unary(p, Unary::NormalQuantile);
        let st = tape.mul(sg_i, t);
        let z_i = tape.add(mu_i, st);
        zs.push(z_i);
        // ln of the truncated marginal pdf at z_i.
        let t2 = tape.unary(t, Unary::Square);
        let lnf = tape.scale(t2, -0.5);
        let lnf = tape.add_const(lnf, -0.5 * TAU.ln());
        let lnsg = tape.unary(sg_i, Unary::Ln);
        let lnf = tape.sub(lnf, lnsg);
        let massf = tape.unary(mass, Unary::FloorAt(DENSITY_FLOOR));
        let lnmass = tape.unary(massf, Unary::Ln);
        let lnf = tape.sub(lnf, lnmass);
        logf_acc = Some(match logf_acc {
            Some(acc) => tape.add(acc, lnf),
            None => lnf,
        });
    }
    let esq: f64 = eps.iter().map(|e| e * e).sum();
    let halfv = tape.scale(vsq_acc.expect("d >= 1"), 0.5);
    let mut lnc = tape.add_const(halfv, -0.5 * esq);
    for &inv in &inv_norms {
        let li = tape.unary(inv, Unary::Ln);
        lnc = tape.sub(lnc, li);
    }
    let logq = tape.add(lnc, logf_acc.expect("d >= 1"));
    let z = tape.hstack(&zs);
    Ok(TapedCopulaSample { z, logq })
}
