//! Feed-forward networks, Adam, early stopping, and the pretrained motion
//! surrogate.
//!
//! [`Mlp`] evaluates identically with and without gradient tracking, so the
//! surrogate trained by [`pretrain_decoder`] can be frozen once and then used
//! both inside taped losses (gradients flow through it to its inputs) and in
//! plain batched inference. Model files round-trip bit-exactly through
//! [`mlp_to_json_string`] / [`mlp_from_json_str`].

mod adam;
pub(crate) mod io;
mod mlp;
mod train;

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use io::{mlp_from_json_str, mlp_from_value, mlp_to_json_string, mlp_to_value, MODEL_FORMAT};
pub use mlp::{Activation, Init, LayerSpec, Mlp, MlpSpec, TapedMlp};
pub use train::{
    decoder_regression, fit_regression, mse, pretrain_decoder, EarlyStopper, LossCurve, LossPoint,
    Regression, TrainOptions,
};
