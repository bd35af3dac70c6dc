//! Comparing trained posterior families against the grid-search reference.
//!
//! Each family is scored by the average log likelihood of its own posterior
//! draws,
//!
//!   LL = 1/(N H) sum_i sum_h ln q(z_i^h | m_i, w_i),
//!
//! reported twice: once under the drawing model q itself and once under the
//! reference KDE density (the model-comparison variant). Fit and parsimony
//! are condensed into the per-n-normalized criteria
//!
//!   BIC = -2 LL / n + p ln(n) / n,    AIC = -2 LL / n + 2 p / n,
//!
//! with n the reference-cloud size and p the closed-form parameter count of
//! the family. A repetition protocol (R subsets of n_r scenarios, H draws
//! each) captures sampling variability for violin-style summaries.
//!
//! All randomness is derived from one master seed with per-(repetition,
//! scenario) streams, so scores do not depend on worker count or order.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::oracle::GroundTruthPosterior;
use crate::simulator::{Dataset, Split};
use crate::vae::{sample_posterior, PosteriorFamily, TrainedVae};
use crate::{derive_seed, derive_seed2, Error, Result};

/// Seed salts for the independent evaluation streams.
pub const SALT_EVAL_TEST: u64 = 0x4556_4154;
pub const SALT_EVAL_REP: u64 = 0x4556_4152;
pub const SALT_EVAL_PICK: u64 = 0x4556_4150;
pub const SALT_EVAL_SELF: u64 = 0x4556_4153;

/// Report schema tag.
pub const EVAL_FORMAT: &str = "copvae-eval-v1";

/// Parameter-count caveat attached to every report.
pub const PARAM_COUNT_NOTE: &str = "param_count uses the closed-form per-family \
formulas (diag_gm K(2D+1)-1, full_gm K(1+D+D(D+1)/2)-1, copula 2D+D(D-1)/2); \
informal tallies quoting full_gm K=2 at 10 or K=10 at 50 parameters disagree \
with the formulas (11 and 59) and are not used here";

/// Free parameters of one posterior family.
///
/// `k` is ignored for the copula, which has no mixture components. The
/// family argument is an enum, so the unknown-family failure mode is ruled
/// out at the type level; only the numeric preconditions can fail.
pub fn param_count(family: PosteriorFamily, k: usize, d: usize) -> Result<usize> {
    if k == 0 {
        return Err(Error::parameter("component count k must be >= 1"));
    }
    if d < 2 {
        return Err(Error::parameter("latent dimension d must be >= 2"));
    }
    Ok(match family {
        PosteriorFamily::DiagGm => k * (2 * d + 1) - 1,
        PosteriorFamily::FullGm => k * (1 + d + d * (d + 1) / 2) - 1,
        PosteriorFamily::Copula => 2 * d + d * (d - 1) / 2,
    })
}

/// Per-n-normalized information criteria, returned as (BIC, AIC).
pub fn information_criteria(ll: f64, n: usize, p: usize) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::parameter("information criteria need n >= 1"));
    }
    let nf = n as f64;
    let fit = -2.0 * ll / nf;
    Ok((fit + p as f64 * nf.ln() / nf, fit + 2.0 * p as f64 / nf))
}

/// One scenario's pre-scaled evaluation inputs.
#[derive(Debug, Clone)]
pub struct EvalObs {
    pub id: usize,
    pub m_scaled: Vec<f64>,
    pub w_scaled: [f64; 3],
}

/// Collects the scaled observations of one dataset split, in dataset order.
pub fn eval_observations(ds: &Dataset, split: Split) -> Result<Vec<EvalObs>> {
    ds.split(split)
        .map(|sc| {
            Ok(EvalObs {
                id: sc.id,
                m_scaled: ds.scaled_features(sc)?,
                w_scaled: sc.env.scaled(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioLoglik {
    pub id: usize,
    /// Mean log density of the draws under the drawing model itself.
    pub ll_q: f64,
    /// Mean log reference-KDE density of the same draws.
    pub ll_gt: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestLoglik {
    pub mean_ll_q: f64,
    pub mean_ll_gt: f64,
    pub per_scenario: Vec<ScenarioLoglik>,
}

/// Mean test log likelihood over all observations, `h` posterior draws per
/// scenario. Requires a reference posterior for every scenario id.
pub fn test_loglik(
    vae: &TrainedVae,
    obs: &[EvalObs],
    gts: &BTreeMap<usize, GroundTruthPosterior>,
    h: usize,
    master_seed: u64,
) -> Result<TestLoglik> {
    if h == 0 {
        return Err(Error::parameter("log likelihood needs h >= 1 draws"));
    }
    if obs.is_empty() {
        return Err(Error::parameter("log likelihood needs at least one scenario"));
    }
    let stream = derive_seed(master_seed, SALT_EVAL_TEST);
    let per_scenario: Vec<ScenarioLoglik> = obs
        .par_iter()
        .map(|o| scenario_loglik(vae, o, gts, h, derive_seed2(stream, 0, o.id as u64)))
        .collect::<Result<Vec<_>>>()?;
    let n = per_scenario.len() as f64;
    Ok(TestLoglik {
        mean_ll_q: per_scenario.iter().map(|s| s.ll_q).sum::<f64>() / n,
        mean_ll_gt: per_scenario.iter().map(|s| s.ll_gt).sum::<f64>() / n,
        per_scenario,
    })
}

fn scenario_loglik(
    vae: &TrainedVae,
    o: &EvalObs,
    gts: &BTreeMap<usize, GroundTruthPosterior>,
    h: usize,
    seed: u64,
) -> Result<ScenarioLoglik> {
    let gt = gts
        .get(&o.id)
        .ok_or_else(|| Error::MissingArtifact(format!("ground truth for scenario {}", o.id)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = sample_posterior(vae, &o.m_scaled, &o.w_scaled, h, &mut rng)?;
    let mut sum_q = 0.0;
    let mut sum_gt = 0.0;
    for d in &draws {
        sum_q += d.logq;
        sum_gt += gt.log_density(&d.z)?;
    }
    Ok(ScenarioLoglik {
        id: o.id,
        ll_q: sum_q / h as f64,
        ll_gt: sum_gt / h as f64,
    })
}

/// Plain arithmetic mean; NaN on empty input.
pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Distribution summary for violin-style rendering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub q05: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub q95: f64,
}

/// Linear-interpolation quantiles of an unsorted sample.
pub fn quantiles(values: &[f64]) -> Result<Quantiles> {
    if values.is_empty() {
        return Err(Error::parameter("quantiles need at least one value"));
    }
    let mut s = values.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).expect("quantile inputs must not be NaN"));
    let at = |p: f64| {
        let pos = p * (s.len() - 1) as f64;
        let lo = pos.floor() as usize;
        if lo + 1 >= s.len() {
            s[s.len() - 1]
        } else {
            s[lo] + (pos - lo as f64) * (s[lo + 1] - s[lo])
        }
    };
    Ok(Quantiles {
        q05: at(0.05),
        q25: at(0.25),
        q50: at(0.50),
        q75: at(0.75),
        q95: at(0.95),
    })
}

/// Per-repetition log likelihoods of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionResult {
    pub ll_q: Vec<f64>,
    pub ll_gt: Vec<f64>,
    pub quantiles_q: Quantiles,
    pub quantiles_gt: Quantiles,
}

/// Sampling-variability protocol: `r` repetitions, each drawing `n_r`
/// scenarios without replacement and `h` posterior samples per scenario,
/// recording the mean log likelihood per repetition.
pub fn repetition_protocol(
    vae: &TrainedVae,
    obs: &[EvalObs],
    gts: &BTreeMap<usize, GroundTruthPosterior>,
    r: usize,
    n_r: usize,
    h: usize,
    master_seed: u64,
) -> Result<RepetitionResult> {
    if r == 0 {
        return Err(Error::parameter("repetition protocol needs r >= 1"));
    }
    if h == 0 {
        return Err(Error::parameter("repetition protocol needs h >= 1 draws"));
    }
    if n_r == 0 || n_r > obs.len() {
        return Err(Error::parameter(format!(
            "repetition subset size must be in 1..={}, got {n_r}",
            obs.len()
        )));
    }
    let pick_stream = derive_seed(master_seed, SALT_EVAL_PICK);
    let draw_stream = derive_seed(master_seed, SALT_EVAL_REP);
    let mut ll_q = Vec::with_capacity(r);
    let mut ll_gt = Vec::with_capacity(r);
    for rep in 0..r {
        let mut pick_rng =
            ChaCha8Rng::seed_from_u64(derive_seed2(pick_stream, rep as u64, 0));
        let chosen = rand::seq::index::sample(&mut pick_rng, obs.len(), n_r).into_vec();
        let sums: Vec<(f64, f64)> = chosen
            .par_iter()
            .map(|&i| {
                let o = &obs[i];
                let s = scenario_loglik(
                    vae,
                    o,
                    gts,
                    h,
                    derive_seed2(draw_stream, rep as u64, o.id as u64),
                )?;
                Ok((s.ll_q, s.ll_gt))
            })
            .collect::<Result<Vec<_>>>()?;
        ll_q.push(sums.iter().map(|s| s.0).sum::<f64>() / n_r as f64);
        ll_gt.push(sums.iter().map(|s| s.1).sum::<f64>() / n_r as f64);
    }
    Ok(RepetitionResult {
        quantiles_q: quantiles(&ll_q)?,
        quantiles_gt: quantiles(&ll_gt)?,
        ll_q,
        ll_gt,
    })
}

/// Mean log density of the reference KDE on its own draws, averaged over
/// scenarios. By the cross-entropy inequality this upper-bounds (up to Monte
/// Carlo error) the reference-density score any other sampler can reach in
/// expectation, which makes it a sanity ceiling for trained models.
pub fn gt_self_loglik(
    gts: &BTreeMap<usize, GroundTruthPosterior>,
    h: usize,
    master_seed: u64,
) -> Result<f64> {
    if h == 0 {
        return Err(Error::parameter("self log likelihood needs h >= 1 draws"));
    }
    if gts.is_empty() {
        return Err(Error::parameter("self log likelihood needs at least one scenario"));
    }
    let stream = derive_seed(master_seed, SALT_EVAL_SELF);
    let per: Vec<f64> = gts
        .iter()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|(&id, gt)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed2(stream, 0, id as u64));
            let draws = gt.sample_batch(h, &mut rng)?;
            let mut sum = 0.0;
            for z in &draws {
                sum += gt.log_density(z)?;
            }
            Ok(sum / h as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(&per))
}

/// Stable column label for one trained model.
pub fn model_label(family: PosteriorFamily, k: usize) -> String {
    match family {
        PosteriorFamily::Copula => "copula".to_string(),
        _ => format!("{}_k{k}", family.tag()),
    }
}

/// All metrics of one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub label: String,
    pub family: String,
    pub k: usize,
    pub d: usize,
    pub param_count: usize,
    pub ll_test_q: f64,
    pub ll_test_gt: f64,
    pub bic: f64,
    pub aic: f64,
    /// Optimizer wall time; volatile, excluded from reproducibility
    /// comparisons.
    pub train_seconds: f64,
    pub repetition: RepetitionResult,
}

/// Computes every metric of one model. The information criteria read the
/// under-model log likelihood with `ic_n` (the reference-cloud size) as n.
#[allow(clippy::too_many_arguments)]
pub fn model_report(
    vae: &TrainedVae,
    obs: &[EvalObs],
    gts: &BTreeMap<usize, GroundTruthPosterior>,
    h: usize,
    ic_n: usize,
    r: usize,
    n_r: usize,
    master_seed: u64,
    train_seconds: f64,
) -> Result<ModelReport> {
    let tl = test_loglik(vae, obs, gts, h, master_seed)?;
    let repetition = repetition_protocol(vae, obs, gts, r, n_r, h, master_seed)?;
    let pc = param_count(vae.layout.family, vae.layout.k, vae.layout.d)?;
    let (bic, aic) = information_criteria(tl.mean_ll_q, ic_n, pc)?;
    Ok(ModelReport {
        label: model_label(vae.layout.family, vae.layout.k),
        family: vae.layout.family.tag().to_string(),
        k: vae.layout.k,
        d: vae.layout.d,
        param_count: pc,
        ll_test_q: tl.mean_ll_q,
        ll_test_gt: tl.mean_ll_gt,
        bic,
        aic,
        train_seconds,
        repetition,
    })
}

/// Full comparison report over all trained families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub config_hash: String,
    pub d: usize,
    pub n_test: usize,
    pub grid_per_axis: usize,
    /// Reference-cloud size; also the n inside BIC/AIC.
    pub n_f: usize,
    pub h: usize,
    pub r: usize,
    pub n_r: usize,
    pub notes: Vec<String>,
    pub models: Vec<ModelReport>,
}

impl EvalReport {
    pub fn to_json_string(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json_str(s: &str) -> Result<EvalReport> {
        let report: EvalReport = serde_json::from_str(s)?;
        if report.format != EVAL_FORMAT {
            return Err(Error::Incompatible(format!(
                "expected report format {EVAL_FORMAT:?}, found {:?}",
                report.format
            )));
        }
        Ok(report)
    }

    /// Zeroes the wall-clock fields, leaving only reproducible content;
    /// used by byte-level output comparisons.
    pub fn zero_timing(&mut self) {
        for m in &mut self.models {
            m.train_seconds = 0.0;
        }
    }

    /// Model-by-metric table: one row per trained family, one column per
    /// metric. `train_seconds` is the only volatile column.
    pub fn to_comparison_csv(&self) -> String {
        let mut out =
            String::from("model,params,ll_q,ll_gt,rep_ll_gt_mean,bic,aic,train_seconds\n");
        for m in &self.models {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                m.label,
                m.param_count,
                m.ll_test_q,
                m.ll_test_gt,
                mean(&m.repetition.ll_gt),
                m.bic,
                m.aic,
                m.train_seconds
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Init, LayerSpec, LossCurve, Mlp, MlpSpec};
    use crate::oracle::build_ground_truth;
    use crate::vae::testfix;
    use crate::vae::{HeadLayout, TrainingSummary, VaeTrainConfig};
    use std::sync::OnceLock;

    /// Test-split observations plus reference posteriors for the shared
    /// fixture dataset (61-point grid, 300-point clouds).
    fn fixture() -> &'static (Vec<EvalObs>, BTreeMap<usize, GroundTruthPosterior>) {
        static FIX: OnceLock<(Vec<EvalObs>, BTreeMap<usize, GroundTruthPosterior>)> =
            OnceLock::new();
        FIX.get_or_init(|| {
            let (ds, decoder) = testfix::dataset_and_decoder();
            let obs = eval_observations(ds, Split::Test).unwrap();
            let gts = obs
                .iter()
                .map(|o| {
                    let gt = build_ground_truth(
                        o.id,
                        &o.m_scaled,
                        &o.w_scaled,
                        decoder,
                        61,
                        300,
                    )
                    .unwrap();
                    (o.id, gt)
                })
                .collect();
            (obs, gts)
        })
    }

    /// Encoder with zero weights and a fixed bias: the same copula posterior
    /// for every observation. Lets tests pin posterior shape exactly.
    fn manual_copula_vae(mu: [f64; 2], sigma: [f64; 2], n_features: usize) -> TrainedVae {
        let spec = MlpSpec::new(
            n_features + 3,
            vec![LayerSpec::new(5, Activation::Linear, Init::GlorotUniform)],
        )
        .unwrap();
        let mut flat = vec![0.0; spec.param_count()];
        let bias_at = (n_features + 3) * 5;
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let inv_softplus = |y: f64| (y.exp() - 1.0).ln();
        flat[bias_at] = logit(mu[0]);
        flat[bias_at + 1] = logit(mu[1]);
        flat[bias_at + 2] = inv_softplus(sigma[0]);
        flat[bias_at + 3] = inv_softplus(sigma[1]);
        flat[bias_at + 4] = 0.0;
        TrainedVae {
            encoder: Mlp::from_flat(spec, &flat, true).unwrap(),
            layout: HeadLayout::new(PosteriorFamily::Copula, 1, 2).unwrap(),
            decoder_fingerprint: "manual".into(),
            config: VaeTrainConfig::new(PosteriorFamily::Copula, 1, vec![], 1),
            summary: TrainingSummary {
                epochs_run: 0,
                best_val_loss: 0.0,
                aborted: None,
            },
            curve: LossCurve::default(),
        }
    }

    #[test]
    fn param_count_reproduces_pinned_table() {
        // K = 5 mixtures across dimensions.
        for (d, expect) in [(2, 24), (3, 34), (5, 54), (10, 104)] {
            assert_eq!(param_count(PosteriorFamily::DiagGm, 5, d).unwrap(), expect);
        }
        for (d, expect) in [(2, 29), (3, 49), (5, 104), (10, 329)] {
            assert_eq!(param_count(PosteriorFamily::FullGm, 5, d).unwrap(), expect);
        }
        for (d, expect) in [(2, 5), (3, 9), (5, 20), (10, 65)] {
            assert_eq!(param_count(PosteriorFamily::Copula, 1, d).unwrap(), expect);
        }
        // k is irrelevant for the copula.
        assert_eq!(
            param_count(PosteriorFamily::Copula, 7, 4).unwrap(),
            param_count(PosteriorFamily::Copula, 1, 4).unwrap()
        );
        assert!(param_count(PosteriorFamily::DiagGm, 0, 2).is_err());
        assert!(param_count(PosteriorFamily::DiagGm, 1, 1).is_err());
    }

    #[test]
    fn param_count_matches_encoder_head_width() {
        for family in [PosteriorFamily::DiagGm, PosteriorFamily::FullGm] {
            for k in 1..=6 {
                for d in 2..=6 {
                    let layout = HeadLayout::new(family, k, d).unwrap();
                    assert_eq!(layout.raw_width(), param_count(family, k, d).unwrap());
                }
            }
        }
        for d in 2..=6 {
            let layout = HeadLayout::new(PosteriorFamily::Copula, 1, d).unwrap();
            assert_eq!(
                layout.raw_width(),
                param_count(PosteriorFamily::Copula, 1, d).unwrap()
            );
        }
    }

    #[test]
    fn information_criteria_hand_checked() {
        assert_eq!(information_criteria(0.0, 1, 0).unwrap(), (0.0, 0.0));
        let (bic, aic) = information_criteria(-100.0, 100, 5).unwrap();
        assert!((bic - 2.2302585092994046).abs() <= 1e-9);
        assert!((aic - 2.1).abs() <= 1e-9);
        // More parameters at fixed fit always cost more.
        let mut last = information_criteria(-50.0, 200, 0).unwrap();
        for p in 1..=10 {
            let cur = information_criteria(-50.0, 200, p).unwrap();
            assert!(cur.0 > last.0 && cur.1 > last.1);
            last = cur;
        }
        assert!(information_criteria(1.0, 0, 1).is_err());
    }

    #[test]
    fn bic_minus_aic_identity_on_sweep() {
        for &n in &[1usize, 2, 10, 100, 6000] {
            for &p in &[0usize, 1, 5, 29, 104] {
                for &ll in &[-250.0, -1.4, 0.0, 3.2] {
                    let (bic, aic) = information_criteria(ll, n, p).unwrap();
                    let expect = p as f64 * ((n as f64).ln() - 2.0) / n as f64;
                    assert!(
                        (bic - aic - expect).abs() <= 1e-9 * expect.abs().max(1.0),
                        "n={n} p={p} ll={ll}"
                    );
                }
            }
        }
    }

    #[test]
    fn quantile_interpolation_small_cases() {
        let q = quantiles(&[5.0, 1.0, 4.0, 2.0, 3.0]).unwrap();
        assert!((q.q50 - 3.0).abs() < 1e-15);
        assert!((q.q25 - 2.0).abs() < 1e-15);
        assert!((q.q05 - 1.2).abs() < 1e-12);
        assert!((q.q95 - 4.8).abs() < 1e-12);
        let q = quantiles(&[2.5]).unwrap();
        assert_eq!((q.q05, q.q50, q.q95), (2.5, 2.5, 2.5));
        assert!(quantiles(&[]).is_err());
    }

    #[test]
    fn missing_ground_truth_is_reported() {
        let (obs, _) = fixture();
        let (ds, _) = testfix::dataset_and_decoder();
        let vae = manual_copula_vae([0.4, 0.5], [0.2, 0.2], ds.n_features());
        let empty = BTreeMap::new();
        match test_loglik(&vae, obs, &empty, 3, 5) {
            Err(Error::MissingArtifact(msg)) => assert!(msg.contains("scenario")),
            other => panic!("expected missing-artifact error, got {other:?}"),
        }
    }

    #[test]
    fn tight_posterior_scores_positive_ll() {
        // A continuous density may exceed 1, so a sharply peaked posterior
        // must be allowed a positive mean log likelihood of its own draws.
        let (ds, _) = testfix::dataset_and_decoder();
        let (obs, _) = fixture();
        let vae = manual_copula_vae([0.5, 0.5], [0.01, 0.01], ds.n_features());
        let mut gts = BTreeMap::new();
        for o in obs {
            gts.insert(
                o.id,
                GroundTruthPosterior::new(o.id, 2, vec![0.5, 0.5], vec![1.0], vec![0.2, 0.2])
                    .unwrap(),
            );
        }
        let tl = test_loglik(&vae, obs, &gts, 64, 11).unwrap();
        assert!(tl.mean_ll_q > 0.0, "tight posterior LL {}", tl.mean_ll_q);
        assert!(tl.mean_ll_gt.is_finite());
        assert_eq!(tl.per_scenario.len(), obs.len());
    }

    #[test]
    fn uniform_like_posterior_scores_zero_ll() {
        // A truncated-Gaussian marginal with scale far above the domain
        // width is uniform on [0,1] to O(sigma^-2), and a zero off-diagonal
        // factor makes the dependence term exactly 1, so every draw has
        // log density ~ 0 and the mean log likelihood must sit at 0.
        let (ds, _) = testfix::dataset_and_decoder();
        let (obs, _) = fixture();
        let vae = manual_copula_vae([0.5, 0.5], [40.0, 40.0], ds.n_features());
        let mut gts = BTreeMap::new();
        for o in obs {
            gts.insert(
                o.id,
                GroundTruthPosterior::new(o.id, 2, vec![0.5, 0.5], vec![1.0], vec![0.3, 0.3])
                    .unwrap(),
            );
        }
        let tl = test_loglik(&vae, obs, &gts, 200, 21).unwrap();
        assert!(tl.mean_ll_q.abs() < 1e-3, "uniform LL {}", tl.mean_ll_q);
    }

    #[test]
    fn test_loglik_matches_brute_force_loop() {
        let (obs, gts) = fixture();
        let vae = testfix::trained(PosteriorFamily::DiagGm, 1, 41);
        let h = 16;
        let seed = 77;
        let tl = test_loglik(&vae, obs, &gts, h, seed).unwrap();

        // Independent accumulation: regenerate every stream, walk the flat
        // double sum back to front, apply the density floor explicitly.
        let stream = derive_seed(seed, SALT_EVAL_TEST);
        let mut terms_q = Vec::new();
        let mut terms_gt = Vec::new();
        for o in obs {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed2(stream, 0, o.id as u64));
            let draws = sample_posterior(&vae, &o.m_scaled, &o.w_scaled, h, &mut rng).unwrap();
            let gt = &gts[&o.id];
            for d in draws {
                terms_q.push(d.logq);
                terms_gt.push(gt.density(&d.z).unwrap().max(1e-300).ln());
            }
        }
        let n = (obs.len() * h) as f64;
        let ll_q: f64 = terms_q.iter().rev().sum::<f64>() / n;
        let ll_gt: f64 = terms_gt.iter().rev().sum::<f64>() / n;
        assert!((tl.mean_ll_q - ll_q).abs() <= 1e-12 * ll_q.abs().max(1.0));
        assert!((tl.mean_ll_gt - ll_gt).abs() <= 1e-12 * ll_gt.abs().max(1.0));
    }

    #[test]
    fn degenerate_repetition_recovers_full_pass() {
        // r = 1 with the whole test split and a posterior matched to the
        // reference cloud: the protocol must agree with test_loglik up to
        // Monte Carlo error.
        let (ds, decoder) = testfix::dataset_and_decoder();
        let w = [0.45, 0.5, 0.33];
        let zstar = [0.45, 0.5];
        let mut x = zstar.to_vec();
        x.extend_from_slice(&w);
        let m = decoder.forward(&x).unwrap();
        let mut obs = Vec::new();
        let mut gts = BTreeMap::new();
        for id in 0..4 {
            obs.push(EvalObs { id, m_scaled: m.clone(), w_scaled: w });
            gts.insert(id, build_ground_truth(id, &m, &w, decoder, 61, 300).unwrap());
        }
        // The two passes use independent seed streams, so the comparison is
        // between two Monte Carlo estimates of the same expectation. A
        // sampler concentrated inside the reference's high-density region
        // keeps the per-draw variance of the log density small, which makes
        // the 0.05 window many standard errors wide at this draw count.
        let sigma = [0.06, 0.06];
        let vae = manual_copula_vae(zstar, sigma, ds.n_features());
        let h = 10_000;
        let tl = test_loglik(&vae, &obs, &gts, h, 3).unwrap();
        let rep = repetition_protocol(&vae, &obs, &gts, 1, obs.len(), h, 3).unwrap();
        assert_eq!(rep.ll_gt.len(), 1);
        assert!(
            (rep.ll_gt[0] - tl.mean_ll_gt).abs() < 0.05,
            "gt variant drifted: {} vs {}",
            rep.ll_gt[0],
            tl.mean_ll_gt
        );
        assert!(
            (rep.ll_q[0] - tl.mean_ll_q).abs() < 0.05,
            "q variant drifted: {} vs {}",
            rep.ll_q[0],
            tl.mean_ll_q
        );
    }

    #[test]
    fn repetition_shapes_and_determinism() {
        let (obs, gts) = fixture();
        let vae = testfix::trained(PosteriorFamily::Copula, 1, 42);
        let rep = repetition_protocol(&vae, obs, &gts, 4, 3, 20, 9).unwrap();
        assert_eq!(rep.ll_q.len(), 4);
        assert_eq!(rep.ll_gt.len(), 4);
        assert!(rep.ll_q.iter().chain(&rep.ll_gt).all(|v| v.is_finite()));
        let q = &rep.quantiles_gt;
        assert!(q.q05 <= q.q25 && q.q25 <= q.q50 && q.q50 <= q.q75 && q.q75 <= q.q95);
        let again = repetition_protocol(&vae, obs, &gts, 4, 3, 20, 9).unwrap();
        assert_eq!(rep, again);
        let other = repetition_protocol(&vae, obs, &gts, 4, 3, 20, 10).unwrap();
        assert_ne!(rep.ll_gt, other.ll_gt);
        assert!(repetition_protocol(&vae, obs, &gts, 0, 3, 20, 9).is_err());
        assert!(repetition_protocol(&vae, obs, &gts, 4, obs.len() + 1, 20, 9).is_err());
    }

    #[test]
    fn reference_scores_dominate_trained_models() {
        let (obs, gts) = fixture();
        let ceiling = gt_self_loglik(&gts, 400, 13).unwrap();
        for (family, k) in [
            (PosteriorFamily::DiagGm, 1),
            (PosteriorFamily::Copula, 1),
        ] {
            let vae = testfix::trained(family, k, 19);
            let tl = test_loglik(&vae, obs, &gts, 400, 13).unwrap();
            assert!(
                tl.mean_ll_gt <= ceiling + 0.1,
                "{} beat the reference ceiling: {} vs {ceiling}",
                model_label(family, k),
                tl.mean_ll_gt
            );
        }
    }

    #[test]
    fn report_round_trip_and_csv_layout() {
        let (obs, gts) = fixture();
        let vae_a = testfix::trained(PosteriorFamily::DiagGm, 1, 23);
        let vae_b = testfix::trained(PosteriorFamily::Copula, 1, 23);
        let mk = |vae, secs| model_report(vae, obs, &gts, 8, 300, 3, 2, 5, secs).unwrap();
        let report = EvalReport {
            format: EVAL_FORMAT.into(),
            config_hash: "deadbeef".into(),
            d: 2,
            n_test: obs.len(),
            grid_per_axis: 61,
            n_f: 300,
            h: 8,
            r: 3,
            n_r: 2,
            notes: vec![PARAM_COUNT_NOTE.to_string()],
            models: vec![mk(&vae_a, 1.25), mk(&vae_b, 2.5)],
        };
        let json = report.to_json_string().unwrap();
        let back = EvalReport::from_json_str(&json).unwrap();
        assert_eq!(report, back);
        assert_eq!(back.to_json_string().unwrap(), json);
        let broken = json.replace(EVAL_FORMAT, "other-format");
        assert!(EvalReport::from_json_str(&broken).is_err());

        let csv = report.to_comparison_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "model,params,ll_q,ll_gt,rep_ll_gt_mean,bic,aic,train_seconds");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("diag_gm_k1,4,"));
        assert!(lines[1].ends_with(",1.25"));
        assert!(lines[2].starts_with("copula,5,"));
        assert!(lines[2].ends_with(",2.5"));

        // Reports that differ only in wall time normalize to identical
        // bytes once timing is zeroed.
        let mut r1 = report.clone();
        let mut r2 = report.clone();
        r2.models[0].train_seconds = 99.0;
        assert_ne!(r1.to_json_string().unwrap(), r2.to_json_string().unwrap());
        r1.zero_timing();
        r2.zero_timing();
        assert_eq!(r1.to_json_string().unwrap(), r2.to_json_string().unwrap());
    }

    #[test]
    fn bic_and_ll_flow_into_model_report() {
        let (obs, gts) = fixture();
        let vae = testfix::trained(PosteriorFamily::FullGm, 2, 29);
        let rep = model_report(&vae, obs, &gts, 8, 300, 2, 3, 5, 0.0).unwrap();
        assert_eq!(rep.label, "full_gm_k2");
        assert_eq!(rep.param_count, 11);
        assert_eq!(rep.repetition.ll_gt.len(), 2);
        let (bic, aic) = information_criteria(rep.ll_test_q, 300, 11).unwrap();
        assert_eq!((rep.bic, rep.aic), (bic, aic));
    }
}
