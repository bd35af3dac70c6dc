//! Amortized variational posteriors over damage, trained against the frozen
//! surrogate.
//!
//! An encoder network maps scaled motion features and environment to the
//! parameters of a chosen posterior family on the unit square; the loss in
//! [`loss`] scores reconstruction through the decoder against the spread of
//! the posterior. Heads, loss, training loop, posterior sampling, and model
//! serialization each live in their own submodule.

mod heads;
mod io;
mod loss;
mod sample;
mod train;


pub use heads::{HeadLayout, PosteriorFamily, PosteriorParams, TapedPosterior};
pub use io::{vae_from_json_str, vae_from_value, vae_to_json_string, vae_to_value, VAE_FORMAT};
pub use sample::{posterior_log_density, sample_posterior, PosteriorDraw};
pub use loss::{
    draw_mc_uniforms, draw_traces, elbo_loss, elbo_taped, elbo_terms_value, ElboTerms, ElboValue,
    NoiseModel, Trace, BETA_DEFAULT, GAMMA_FLOOR, MAX_REJECTION_ROUNDS_DEFAULT, N_MC_DEFAULT,
};
pub use train::{
    train_encoder, TrainedVae, TrainingSummary, VaeTrainConfig, SALT_VAE_EPOCH, SALT_VAE_INIT,
    SALT_VAE_SHUFFLE, SALT_VAE_VAL,
};
