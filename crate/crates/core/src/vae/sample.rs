//! Drawing from a trained amortized posterior.

use rand::Rng;

use crate::vae::heads::PosteriorFamily;
use crate::vae::train::TrainedVae;
use crate::Result;

/// One posterior draw with its truncated log-density.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraw {
    pub z: Vec<f64>,
    pub logq: f64,
}

/// Encodes one observation and draws `h` posterior samples.
///
/// For the mixture families the generator is consumed in a fixed order:
/// first the `config.n_mc` uniform points of the shared normalization
/// estimate, then the rejection-sampling stream. All draws of one call share
/// that single normalization estimate. The copula needs neither.
pub fn sample_posterior<R: Rng>(
    vae: &TrainedVae,
    m_scaled: &[f64],
    w_scaled: &[f64],
    h: usize,
    rng: &mut R,
) -> Result<Vec<PosteriorDraw>> {
    let params = vae.encode(m_scaled, w_scaled)?;
    match params.family() {
        PosteriorFamily::DiagGm | PosteriorFamily::FullGm => {
            let gm = params.mixture()?;
            let c = gm.normalization_constant(vae.config.n_mc, rng)?;
            gm.rejection_sample_traced(h, vae.config.max_rejection_rounds, rng)?
                .into_iter()
                .map(|d| {
                    Ok(PosteriorDraw {
                        logq: gm.truncated_logpdf_with_constant(&d.z, c)?,
                        z: d.z,
                    })
                })
                .collect()
        }
        PosteriorFamily::Copula => {
            let post = params.copula()?;
            post.sample_traced(h, rng)?
                .into_iter()
                .map(|d| {
                    Ok(PosteriorDraw {
                        logq: post.joint_logpdf(&d.z)?,
                        z: d.z,
                    })
                })
                .collect()
        }
    }
}

/// Log density of the trained posterior at arbitrary in-domain points.
///
/// The mixture families consume `config.n_mc` uniforms from `rng` for the
/// shared truncation-mass estimate, exactly as [`sample_posterior`] does;
/// the copula evaluates in closed form and leaves the generator untouched.
/// Seeding `rng` identically to a sampling call therefore reproduces the
/// same density normalization as that call's `logq` values.
pub fn posterior_log_density<R: Rng>(
    vae: &TrainedVae,
    m_scaled: &[f64],
    w_scaled: &[f64],
    points: &[Vec<f64>],
    rng: &mut R,
) -> Result<Vec<f64>> {
    let params = vae.encode(m_scaled, w_scaled)?;
    match params.family() {
        PosteriorFamily::DiagGm | PosteriorFamily::FullGm => {
            let gm = params.mixture()?;
            let c = gm.normalization_constant(vae.config.n_mc, rng)?;
            points
                .iter()
                .map(|z| gm.truncated_logpdf_with_constant(z, c))
                .collect()
        }
        PosteriorFamily::Copula => {
            let post = params.copula()?;
            points.iter().map(|z| post.joint_logpdf(z)).collect()
        }
    }
}
