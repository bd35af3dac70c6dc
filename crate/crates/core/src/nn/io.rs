//! Model file format.
//!
//! A network serializes to JSON: the architecture as plain fields, the
//! parameters as one base64 blob per layer holding the little-endian bytes of
//! the f64 weights (row-major) followed by the biases. Two FNV fingerprints
//! travel with the file: one of the architecture, one of the parameter bytes.
//! Loading recomputes both and rejects any mismatch, so a truncated or
//! bit-flipped file fails loudly instead of producing a silently different
//! network.

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde_json::{json, Map, Value};

use crate::{Error, Result};
use crate::nn::{Activation, Init, LayerSpec, Mlp, MlpSpec};

pub const MODEL_FORMAT: &str = "copvae-mlp-v1";

/// Serializes a network to a JSON value (embeddable in larger documents).
pub fn mlp_to_value(mlp: &Mlp) -> Value {
    let spec = mlp.spec();
    let flat = mlp.flat_params();
    let mut layers = Vec::with_capacity(spec.layers.len());
    let mut ofs = 0;
    let mut fan_in = spec.input_dim;
    for layer in &spec.layers {
        let count = fan_in * layer.width + layer.width;
        let mut bytes = Vec::with_capacity(count * 8);
        for p in &flat[ofs..ofs + count] {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        layers.push(json!({
            "width": layer.width,
            "activation": layer.activation.tag(),
            "init": layer.init.tag(),
            "blob": BASE64.encode(bytes),
        }));
        ofs += count;
        fan_in = layer.width;
    }
    json!({
        "format": MODEL_FORMAT,
        "input_dim": spec.input_dim,
        "frozen": mlp.is_frozen(),
        "spec_fnv": spec.fingerprint(),
        "params_fnv": mlp.param_fingerprint(),
        "layers": layers,
    })
}

pub fn mlp_to_json_string(mlp: &Mlp) -> String {
    let mut s = serde_json::to_string_pretty(&mlp_to_value(mlp)).expect("static structure");
    s.push('\n');
    s
}

pub(crate) fn obj<'a>(v: &'a Value, what: &str) -> Result<&'a Map<String, Value>> {
    v.as_object()
        .ok_or_else(|| Error::Incompatible(format!("model file: {what} is not an object")))
}

pub(crate) fn field<'a>(m: &'a Map<String, Value>, key: &str) -> Result<&'a Value> {
    m.get(key)
        .ok_or_else(|| Error::Incompatible(format!("model file: missing field `{key}`")))
}

pub(crate) fn usize_field(m: &Map<String, Value>, key: &str) -> Result<usize> {
    field(m, key)?
        .as_u64()
        .map(|v| v as usize)
        .ok_or_else(|| Error::Incompatible(format!("model file: `{key}` is not an integer")))
}

pub(crate) fn str_field<'a>(m: &'a Map<String, Value>, key: &str) -> Result<&'a str> {
    field(m, key)?
        .as_str()
        .ok_or_else(|| Error::Incompatible(format!("model file: `{key}` is not a string")))
}

/// Reconstructs a network from a JSON value, verifying both fingerprints.
pub fn mlp_from_value(v: &Value) -> Result<Mlp> {
    let root = obj(v, "root")?;
    let format = str_field(root, "format")?;
    if format != MODEL_FORMAT {
        return Err(Error::Incompatible(format!(
            "model file format `{format}`, expected `{MODEL_FORMAT}`"
        )));
    }
    let input_dim = usize_field(root, "input_dim")?;
    let frozen = field(root, "frozen")?
        .as_bool()
        .ok_or_else(|| Error::Incompatible("model file: `frozen` is not a bool".into()))?;
    let layers_json = field(root, "layers")?
        .as_array()
        .ok_or_else(|| Error::Incompatible("model file: `layers` is not an array".into()))?;

    let mut layer_specs = Vec::with_capacity(layers_json.len());
    let mut blobs = Vec::with_capacity(layers_json.len());
    for lv in layers_json {
        let lm = obj(lv, "layer")?;
        layer_specs.push(LayerSpec::new(
            usize_field(lm, "width")?,
            Activation::from_tag(str_field(lm, "activation")?)?,
            Init::from_tag(str_field(lm, "init")?)?,
        ));
        blobs.push(str_field(lm, "blob")?);
    }
    let spec = MlpSpec::new(input_dim, layer_specs)?;

    let stored_spec_fnv = str_field(root, "spec_fnv")?;
    if spec.fingerprint() != stored_spec_fnv {
        return Err(Error::Incompatible(format!(
            "model file architecture fingerprint {stored_spec_fnv} does not match {}",
            spec.fingerprint()
        )));
    }

    let mut flat = Vec::with_capacity(spec.param_count());
    let mut fan_in = spec.input_dim;
    for (layer, blob) in spec.layers.iter().zip(&blobs) {
        let bytes = BASE64
            .decode(blob)
            .map_err(|e| Error::Incompatible(format!("model file: bad blob encoding: {e}")))?;
        let count = fan_in * layer.width + layer.width;
        if bytes.len() != count * 8 {
            return Err(Error::Incompatible(format!(
                "model file: blob holds {} bytes, expected {}",
                bytes.len(),
                count * 8
            )));
        }
        for chunk in bytes.chunks_exact(8) {
            flat.push(f64::from_le_bytes(chunk.try_into().expect("chunk of 8")));
        }
        fan_in = layer.width;
    }

    let mlp = Mlp::from_flat(spec, &flat, frozen)?;
    let stored_params_fnv = str_field(root, "params_fnv")?;
    if mlp.param_fingerprint() != stored_params_fnv {
        return Err(Error::Incompatible(format!(
            "model file parameter fingerprint {stored_params_fnv} does not match {}",
            mlp.param_fingerprint()
        )));
    }
    Ok(mlp)
}

pub fn mlp_from_json_str(s: &str) -> Result<Mlp> {
    let v: Value = serde_json::from_str(s)?;
    mlp_from_value(&v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_mlp(frozen: bool) -> Mlp {
        let spec = MlpSpec::new(
            4,
            vec![
                LayerSpec::new(6, Activation::Relu, Init::HeUniform),
                LayerSpec::new(5, Activation::ScaledSigmoid2Pi, Init::GlorotUniform),
                LayerSpec::new(3, Activation::Softmax, Init::GlorotUniform),
            ],
        )
        .unwrap();
        let mut mlp = Mlp::init(spec, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
        if frozen {
            mlp.freeze();
        }
        mlp
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for frozen in [false, true] {
            let mlp = sample_mlp(frozen);
            let text = mlp_to_json_string(&mlp);
            let loaded = mlp_from_json_str(&text).unwrap();
            assert_eq!(loaded.spec(), mlp.spec());
            assert_eq!(loaded.is_frozen(), frozen);
            let bits = |m: &Mlp| m.flat_params().iter().map(|p| p.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&loaded), bits(&mlp));
            // Serializing the loaded copy reproduces the file byte for byte.
            assert_eq!(mlp_to_json_string(&loaded), text);
        }
    }

    #[test]
    fn flipped_parameter_byte_is_detected() {
        let mlp = sample_mlp(false);
        let mut v = mlp_to_value(&mlp);
        let blob = v["layers"][0]["blob"].as_str().unwrap();
        let mut bytes = BASE64.decode(blob).unwrap();
        bytes[3] ^= 0x40;
        v["layers"][0]["blob"] = Value::String(BASE64.encode(bytes));
        match mlp_from_value(&v) {
            Err(Error::Incompatible(msg)) => assert!(msg.contains("parameter fingerprint")),
            other => panic!("expected fingerprint mismatch, got {other:?}"),
        }
    }

    #[test]
    fn truncated_blob_is_detected() {
        let mlp = sample_mlp(false);
        let mut v = mlp_to_value(&mlp);
        let blob = v["layers"][1]["blob"].as_str().unwrap();
        let bytes = BASE64.decode(blob).unwrap();
        v["layers"][1]["blob"] = Value::String(BASE64.encode(&bytes[..bytes.len() - 8]));
        match mlp_from_value(&v) {
            Err(Error::Incompatible(msg)) => assert!(msg.contains("bytes")),
            other => panic!("expected length mismatch, got {other:?}"),
        }
    }

    #[test]
    fn tampered_architecture_is_detected() {
        let mlp = sample_mlp(false);
        let mut v = mlp_to_value(&mlp);
        v["layers"][0]["activation"] = Value::String("tanh".into());
        match mlp_from_value(&v) {
            Err(Error::Incompatible(msg)) => assert!(msg.contains("architecture fingerprint")),
            other => panic!("expected fingerprint mismatch, got {other:?}"),
        }
    }

    #[test]
    fn unknown_format_and_missing_fields_are_rejected() {
        let mlp = sample_mlp(false);
        let mut v = mlp_to_value(&mlp);
        v["format"] = Value::String("other-format".into());
        assert!(matches!(mlp_from_value(&v), Err(Error::Incompatible(_))));

        let mut v = mlp_to_value(&mlp);
        v.as_object_mut().unwrap().remove("params_fnv");
        match mlp_from_value(&v) {
            Err(Error::Incompatible(msg)) => assert!(msg.contains("params_fnv")),
            other => panic!("expected missing-field error, got {other:?}"),
        }

        assert!(matches!(mlp_from_json_str("not json"), Err(Error::Json(_))));
    }
}
