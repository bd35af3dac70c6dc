//! Trained-posterior serialization: head layout, run config, summary, and
//! the encoder network in one JSON document.
//!
//! The loss curve is not part of the model document; it is its own CSV
//! artifact. Loading rebuilds the layout and cross-checks it against both
//! the stored config and the encoder's output width, so a model file whose
//! pieces disagree is rejected instead of producing a silently misrouted
//! posterior.

use serde_json::{json, Map, Value};

use crate::nn::io::{field, obj, str_field, usize_field};
use crate::nn::{mlp_from_value, mlp_to_value, LossCurve};
use crate::vae::heads::{HeadLayout, PosteriorFamily};
use crate::vae::train::{TrainedVae, TrainingSummary, VaeTrainConfig};
use crate::{Error, Result};

/// Format tag of the trained-posterior document.
pub const VAE_FORMAT: &str = "copvae-vae-v1";

pub fn vae_to_value(vae: &TrainedVae) -> Result<Value> {
    Ok(json!({
        "format": VAE_FORMAT,
        "family": vae.layout.family.tag(),
        "k": vae.layout.k,
        "d": vae.layout.d,
        "decoder_fingerprint": vae.decoder_fingerprint,
        "config": serde_json::to_value(&vae.config)?,
        "summary": serde_json::to_value(&vae.summary)?,
        "encoder": mlp_to_value(&vae.encoder),
    }))
}

pub fn vae_to_json_string(vae: &TrainedVae) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&vae_to_value(vae)?)?;
    s.push('\n');
    Ok(s)
}

fn obj_field<'a>(m: &'a Map<String, Value>, key: &str) -> Result<&'a Value> {
    let v = field(m, key)?;
    if !v.is_object() {
        return Err(Error::Incompatible(format!("model file: `{key}` is not an object")));
    }
    Ok(v)
}

pub fn vae_from_value(v: &Value) -> Result<TrainedVae> {
    let m = obj(v, "model")?;
    let format = str_field(m, "format")?;
    if format != VAE_FORMAT {
        return Err(Error::Incompatible(format!(
            "unknown model format `{format}`, expected `{VAE_FORMAT}`"
        )));
    }
    let family = PosteriorFamily::from_tag(str_field(m, "family")?)
        .map_err(|e| Error::Incompatible(format!("model file: {e}")))?;
    let k = usize_field(m, "k")?;
    let d = usize_field(m, "d")?;
    let layout = HeadLayout::new(family, k, d)
        .map_err(|e| Error::Incompatible(format!("model file: {e}")))?;
    let decoder_fingerprint = str_field(m, "decoder_fingerprint")?.to_string();
    let config: VaeTrainConfig = serde_json::from_value(obj_field(m, "config")?.clone())?;
    let summary: TrainingSummary = serde_json::from_value(obj_field(m, "summary")?.clone())?;
    if config.family != layout.family || config.k != layout.k {
        return Err(Error::Incompatible(
            "model file: config family/k disagree with the head layout".into(),
        ));
    }
    let encoder = mlp_from_value(field(m, "encoder")?)?;
    if encoder.output_dim() != layout.raw_width() {
        return Err(Error::Incompatible(format!(
            "model file: encoder output width {} does not feed a {} head of width {}",
            encoder.output_dim(),
            layout.family.tag(),
            layout.raw_width()
        )));
    }
    Ok(TrainedVae {
        encoder,
        layout,
        decoder_fingerprint,
        config,
        summary,
        curve: LossCurve::default(),
    })
}

pub fn vae_from_json_str(s: &str) -> Result<TrainedVae> {
    vae_from_value(&serde_json::from_str(s)?)
}
