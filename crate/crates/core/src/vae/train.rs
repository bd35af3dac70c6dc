//! Encoder training against a frozen decoder.
//!
//! Each scenario contributes one loss term built by [`super::loss`]; a batch
//! step averages the per-scenario encoder gradients and applies one Adam
//! update. All randomness is derived from the config seed: the encoder init,
//! the per-epoch shuffle, one stream per (epoch, scenario) for training
//! draws, and one fixed stream per scenario for validation draws. Keeping
//! the validation noise fixed across epochs makes the early-stopping signal
//! a function of the parameters alone instead of resampled noise.
//!
//! Scenario gradients inside a batch are computed in bounded parallel
//! chunks and reduced in index order, so results do not depend on the
//! worker count. A non-finite loss or a failed posterior draw after the
//! first completed epoch aborts training and returns the last completed
//! epoch's parameters; the same failure during the first epoch is an error
//! because no trained checkpoint exists yet.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::mathcore::Tape;
use crate::nn::{
    adam_step, AdamState, Activation, EarlyStopper, Init, LayerSpec, LossCurve, LossPoint, Mlp,
    MlpSpec,
};
use crate::simulator::{Dataset, Split};
use crate::vae::heads::{HeadLayout, PosteriorFamily, PosteriorParams};
use crate::vae::loss::{
    draw_mc_uniforms, draw_traces, elbo_taped, elbo_terms_value, NoiseModel,
    MAX_REJECTION_ROUNDS_DEFAULT, N_MC_DEFAULT,
};
use crate::{derive_seed, derive_seed2, Error, Result};

/// Seed salts for the independent random streams of encoder training.
pub const SALT_VAE_INIT: u64 = 0x5641_4549;
pub const SALT_VAE_SHUFFLE: u64 = 0x5641_4553;
pub const SALT_VAE_EPOCH: u64 = 0x5641_4545;
pub const SALT_VAE_VAL: u64 = 0x5641_4556;

/// Scenarios per parallel chunk; bounds peak gradient memory at
/// `PAR_CHUNK * param_count` floats regardless of batch size.
const PAR_CHUNK: usize = 32;

/// Everything that defines one encoder training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeTrainConfig {
    pub family: PosteriorFamily,
    /// Mixture components (must be 1 for the copula).
    pub k: usize,
    /// Hidden layers; the linear head is appended automatically.
    pub hidden: Vec<LayerSpec>,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    /// Posterior draws per scenario during training.
    pub h_train: usize,
    /// Posterior draws per scenario during validation.
    pub h_val: usize,
    /// Uniform points for the mixture-mass estimate.
    pub n_mc: usize,
    pub beta: f64,
    pub max_rejection_rounds: usize,
    pub seed: u64,
}

impl VaeTrainConfig {
    /// Config with moderate defaults; callers override fields as needed.
    pub fn new(family: PosteriorFamily, k: usize, hidden: Vec<LayerSpec>, seed: u64) -> Self {
        VaeTrainConfig {
            family,
            k,
            hidden,
            lr: 1e-3,
            batch_size: 256,
            max_epochs: 400,
            patience: 100,
            min_delta: EarlyStopper::DEFAULT_MIN_DELTA,
            h_train: 1,
            h_val: 1,
            n_mc: N_MC_DEFAULT,
            beta: super::BETA_DEFAULT,
            max_rejection_rounds: MAX_REJECTION_ROUNDS_DEFAULT,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k must be >= 1"));
        }
        if self.family == PosteriorFamily::Copula && self.k != 1 {
            return Err(Error::config("the copula family requires k = 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("learning rate must be finite and positive"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::config("batch size and max epochs must be >= 1"));
        }
        if self.h_train == 0 || self.h_val == 0 {
            return Err(Error::config("h_train and h_val must be >= 1"));
        }
        if self.n_mc == 0 || self.max_rejection_rounds == 0 {
            return Err(Error::config("n_mc and max_rejection_rounds must be >= 1"));
        }
        NoiseModel::new(self.beta)?;
        EarlyStopper::new(self.min_delta, self.patience)?;
        Ok(())
    }
}

/// Outcome metadata for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    /// Completed epochs.
    pub epochs_run: usize,
    /// Lowest validation loss over completed epochs.
    pub best_val_loss: f64,
    /// Why training stopped early with a restored checkpoint, if it did.
    pub aborted: Option<String>,
}

/// A trained encoder bundled with everything needed to use and audit it.
#[derive(Debug, Clone)]
pub struct TrainedVae {
    pub encoder: Mlp,
    pub layout: HeadLayout,
    /// Parameter fingerprint of the decoder trained against; posterior
    /// evaluation must use the same decoder.
    pub decoder_fingerprint: String,
    pub config: VaeTrainConfig,
    pub summary: TrainingSummary,
    pub curve: LossCurve,
}

impl TrainedVae {
    /// Posterior parameters for one observation (scaled features + scaled
    /// environment).
    pub fn encode(&self, m_scaled: &[f64], w_scaled: &[f64]) -> Result<PosteriorParams> {
        let mut x = Vec::with_capacity(m_scaled.len() + w_scaled.len());
        x.extend_from_slice(m_scaled);
        x.extend_from_slice(w_scaled);
        let raw = self.encoder.forward(&x)?;
        self.layout.route(&raw)
    }
}

/// One scenario's inputs, pre-scaled.
struct TrainObs {
    id: usize,
    m: Vec<f64>,
    w: [f64; 3],
}

/// Loss and flat encoder gradient for one scenario, with all randomness
/// drawn from `seed`: traces first, then the mixture normalization points.
#[allow(clippy::too_many_arguments)]
fn scenario_grad(
    encoder: &Mlp,
    decoder: &Mlp,
    layout: &HeadLayout,
    noise: &NoiseModel,
    obs: &TrainObs,
    h: usize,
    n_mc: usize,
    max_rounds: usize,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = obs.m.clone();
    x.extend_from_slice(&obs.w);
    let raw = encoder.forward(&x)?;
    let params = layout.route(&raw)?;
    let traces = draw_traces(&params, h, max_rounds, &mut rng)?;
    let uniforms = match layout.family {
        PosteriorFamily::Copula => None,
        _ => Some(draw_mc_uniforms(n_mc, layout.d, &mut rng)?),
    };
    let mut tape = Tape::new();
    let enc_t = encoder.register(&mut tape, true)?;
    let xv = tape.constant(1, x.len(), &x);
    let raw_v = enc_t.forward(&mut tape, xv)?;
    let post = layout.route_taped(&mut tape, raw_v)?;
    let dec_t = decoder.register(&mut tape, false)?;
    let terms = elbo_taped(
        &mut tape,
        &post,
        &dec_t,
        &obs.m,
        &obs.w,
        noise,
        &traces,
        uniforms.as_ref(),
    )?;
    let loss = tape.value(terms.loss)[0];
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: format!("elbo loss (scenario {})", obs.id) });
    }
    let grads = tape.backward(terms.loss)?;
    let flat = enc_t.flat_gradients(&grads)?;
    Ok((loss, flat))
}

/// Validation loss of one scenario under its fixed noise stream.
#[allow(clippy::too_many_arguments)]
fn scenario_val_loss(
    encoder: &Mlp,
    decoder: &Mlp,
    layout: &HeadLayout,
    noise: &NoiseModel,
    obs: &TrainObs,
    h: usize,
    n_mc: usize,
    max_rounds: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = obs.m.clone();
    x.extend_from_slice(&obs.w);
    let raw = encoder.forward(&x)?;
    let params = layout.route(&raw)?;
    let traces = draw_traces(&params, h, max_rounds, &mut rng)?;
    let uniforms = match layout.family {
        PosteriorFamily::Copula => None,
        _ => Some(draw_mc_uniforms(n_mc, layout.d, &mut rng)?),
    };
    let v = elbo_terms_value(&params, decoder, &obs.m, &obs.w, noise, &traces, uniforms.as_ref())?;
    Ok(v.loss)
}

/// Trains the posterior encoder on the train split of `ds` against the
/// frozen `decoder`.
///
/// On normal completion (early stop or max epochs) the returned encoder is
/// the best-validation checkpoint. If a loss turns non-finite or a draw
/// fails after the first completed epoch, training aborts, the encoder
/// reverts to the last completed epoch, and the reason lands in
/// `summary.aborted`.
pub fn train_encoder(ds: &Dataset, decoder: &Mlp, cfg: &VaeTrainConfig) -> Result<TrainedVae> {
    cfg.validate()?;
    if !decoder.is_frozen() {
        return Err(Error::Incompatible(
            "encoder training requires a frozen (pretrained) decoder".into(),
        ));
    }
    let n_feat = ds.n_features();
    if decoder.input_dim() < 5 {
        return Err(Error::Incompatible(format!(
            "decoder input width {} cannot split into damage + 3 environment variables",
            decoder.input_dim()
        )));
    }
    let d = decoder.input_dim() - 3;
    if decoder.output_dim() != n_feat {
        return Err(Error::Incompatible(format!(
            "decoder outputs {} features but the dataset has {n_feat}",
            decoder.output_dim()
        )));
    }
    let layout = HeadLayout::new(cfg.family, cfg.k, d)?;
    let noise = NoiseModel::new(cfg.beta)?;

    let mut layers = cfg.hidden.clone();
    layers.push(LayerSpec::new(layout.raw_width(), Activation::Linear, Init::GlorotUniform));
    let spec = MlpSpec::new(n_feat + 3, layers)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SALT_VAE_INIT));
    let mut encoder = Mlp::init(spec, &mut init_rng)?;
    let mut adam = AdamState::new(cfg.lr, encoder.param_count());

    let collect = |split| -> Result<Vec<TrainObs>> {
        ds.split(split)
            .map(|sc| {
                Ok(TrainObs { id: sc.id, m: ds.scaled_features(sc)?, w: sc.env.scaled() })
            })
            .collect()
    };
    let train = collect(Split::Train)?;
    let val = collect(Split::Val)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Training(
            "encoder training requires nonempty train and val splits".into(),
        ));
    }

    let decoder_fingerprint = decoder.param_fingerprint();
    let shuffle_salt = derive_seed(cfg.seed, SALT_VAE_SHUFFLE);
    let epoch_salt = derive_seed(cfg.seed, SALT_VAE_EPOCH);
    let val_salt = derive_seed(cfg.seed, SALT_VAE_VAL);

    let run_val = |encoder: &Mlp| -> Result<f64> {
        let mut total = 0.0;
        for chunk in val.chunks(PAR_CHUNK) {
            let outs: Vec<Result<f64>> = chunk
                .par_iter()
                .map(|obs| {
                    scenario_val_loss(
                        encoder,
                        decoder,
                        &layout,
                        &noise,
                        obs,
                        cfg.h_val,
                        cfg.n_mc,
                        cfg.max_rejection_rounds,
                        derive_seed2(val_salt, 0, obs.id as u64),
                    )
                })
                .collect();
            for out in outs {
                total += out?;
            }
        }
        Ok(total / val.len() as f64)
    };

    let mut stopper = EarlyStopper::new(cfg.min_delta, cfg.patience)?;
    let mut curve = LossCurve::default();
    let mut best_val = f64::INFINITY;
    let mut best_params = encoder.flat_params();
    let mut last_good = encoder.flat_params();
    let mut summary = TrainingSummary { epochs_run: 0, best_val_loss: f64::INFINITY, aborted: None };

    'epochs: for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(shuffle_salt, epoch as u64));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad_acc = vec![0.0; encoder.param_count()];
            let mut batch_loss = 0.0;
            for chunk in batch.chunks(PAR_CHUNK) {
                let outs: Vec<Result<(f64, Vec<f64>)>> = chunk
                    .par_iter()
                    .map(|&i| {
                        let obs = &train[i];
                        scenario_grad(
                            &encoder,
                            decoder,
                            &layout,
                            &noise,
                            obs,
                            cfg.h_train,
                            cfg.n_mc,
                            cfg.max_rejection_rounds,
                            derive_seed2(epoch_salt, epoch as u64, obs.id as u64),
                        )
                    })
                    .collect();
                for out in outs {
                    match out {
                        Ok((l, g)) => {
                            batch_loss += l;
                            for (a, b) in grad_acc.iter_mut().zip(&g) {
                                *a += b;
                            }
                        }
                        Err(e) => {
                            if epoch == 0 {
                                return Err(Error::Training(format!(
                                    "first epoch failed, no checkpoint to restore: {e}"
                                )));
                            }
                            summary.aborted = Some(format!("epoch {epoch}: {e}"));
                            break 'epochs;
                        }
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for g in grad_acc.iter_mut() {
                *g *= inv;
            }
            adam_step(&mut encoder, &mut adam, &grad_acc)?;
            epoch_loss += batch_loss;
        }

        let val_loss = match run_val(&encoder) {
            Ok(v) => v,
            Err(e) => {
                if epoch == 0 {
                    return Err(Error::Training(format!(
                        "first epoch failed, no checkpoint to restore: {e}"
                    )));
                }
                summary.aborted = Some(format!("epoch {epoch} validation: {e}"));
                break 'epochs;
            }
        };

        curve.0.push(LossPoint {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            val_loss,
        });
        summary.epochs_run = epoch + 1;
        last_good = encoder.flat_params();
        if val_loss < best_val {
            best_val = val_loss;
            best_params = encoder.flat_params();
        }
        if stopper.observe(val_loss) {
            break;
        }
    }

    if summary.epochs_run == 0 {
        // Unreachable: epoch-0 failures return above and a successful epoch 0
        // sets epochs_run. Kept as a guard against future reorderings.
        return Err(Error::Training("no epoch completed".into()));
    }
    let restore = if summary.aborted.is_some() { &last_good } else { &best_params };
    encoder.set_flat_params(restore)?;
    summary.best_val_loss = best_val;

    Ok(TrainedVae {
        encoder,
        layout,
        decoder_fingerprint,
        config: cfg.clone(),
        summary,
        curve,
    })
}
