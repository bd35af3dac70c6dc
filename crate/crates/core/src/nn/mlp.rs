//! Dense feed-forward networks.
//!
//! A network is a stack of affine layers, each tagged with an activation and
//! the initializer its weights were drawn from. Weights are stored as
//! `fan_in x fan_out` matrices so a batch forward pass is a plain right
//! multiplication `X W + b` with no transposes anywhere, and the flattened
//! parameter order (per layer: weight rows, then biases) is shared by the
//! optimizer, the gradient extraction, and the model file format.
//!
//! The same scalar kernels back both evaluation paths: the numeric forward
//! pass applies [`Unary::apply`] elementwise and the taped pass records the
//! corresponding [`Unary`] node, so a network evaluates bit-identically with
//! and without gradient tracking.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};
use crate::mathcore::{Gradients, Matrix, Tape, Unary, Var};

/// Activation tag attached to a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    #[serde(rename = "relu")]
    Relu,
    #[serde(rename = "tanh")]
    Tanh,
    #[serde(rename = "sigmoid")]
    Sigmoid,
    /// `2*pi*sigmoid(x)`; used for angle-valued output heads.
    #[serde(rename = "scaled_sigmoid_2pi")]
    ScaledSigmoid2Pi,
    #[serde(rename = "softplus")]
    Softplus,
    /// Row-wise softmax; only valid on the final (output) layer.
    #[serde(rename = "softmax")]
    Softmax,
    #[serde(rename = "linear")]
    Linear,
}

impl Activation {
    pub fn tag(&self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::ScaledSigmoid2Pi => "scaled_sigmoid_2pi",
            Activation::Softplus => "softplus",
            Activation::Softmax => "softmax",
            Activation::Linear => "linear",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Activation> {
        Ok(match tag {
            "relu" => Activation::Relu,
            "tanh" => Activation::Tanh,
            "sigmoid" => Activation::Sigmoid,
            "scaled_sigmoid_2pi" => Activation::ScaledSigmoid2Pi,
            "softplus" => Activation::Softplus,
            "softmax" => Activation::Softmax,
            "linear" => Activation::Linear,
            other => return Err(Error::config(format!("unknown activation tag `{other}`"))),
        })
    }

    /// The elementwise tape op implementing this activation, if it is
    /// pointwise (softmax and linear are not).
    fn unary(&self) -> Option<Unary> {
        match self {
            Activation::Relu => Some(Unary::Relu),
            Activation::Tanh => Some(Unary::Tanh),
            Activation::Sigmoid => Some(Unary::Sigmoid),
            Activation::ScaledSigmoid2Pi => Some(Unary::SigmoidScaled2Pi),
            Activation::Softplus => Some(Unary::Softplus),
            Activation::Softmax | Activation::Linear => None,
        }
    }

    /// Scalar value of a pointwise activation.
    ///
    /// Panics on softmax, which has no scalar form; callers route softmax
    /// through [`Activation::apply_rows`].
    pub fn apply_scalar(&self, x: f64) -> f64 {
        match self.unary() {
            Some(u) => u.apply(x),
            None => match self {
                Activation::Linear => x,
                _ => unreachable!("softmax has no scalar form"),
            },
        }
    }

    /// Applies the activation row-wise in place over an `n x m` buffer.
    fn apply_rows(&self, data: &mut [f64], cols: usize) {
        match self {
            Activation::Linear => {}
            Activation::Softmax => {
                for row in data.chunks_mut(cols) {
                    softmax_in_place(row);
                }
            }
            _ => {
                let u = self.unary().expect("pointwise activation");
                for x in data.iter_mut() {
                    *x = u.apply(*x);
                }
            }
        }
    }
}

/// Row softmax with the max subtracted for stability. Mirrors the tape's
/// `softmax_row` exactly, including multiplying by a reciprocal rather than
/// dividing, so numeric and taped outputs agree to the last bit.
fn softmax_in_place(row: &mut [f64]) {
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
}

/// Weight initializer tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Init {
    /// `U(-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out)))`.
    #[serde(rename = "glorot_uniform")]
    GlorotUniform,
    /// `U(-sqrt(6/fan_in), +sqrt(6/fan_in))`; variance `2/fan_in`.
    #[serde(rename = "he_uniform")]
    HeUniform,
}

impl Init {
    pub fn tag(&self) -> &'static str {
        match self {
            Init::GlorotUniform => "glorot_uniform",
            Init::HeUniform => "he_uniform",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Init> {
        Ok(match tag {
            "glorot_uniform" => Init::GlorotUniform,
            "he_uniform" => Init::HeUniform,
            other => return Err(Error::config(format!("unknown initializer tag `{other}`"))),
        })
    }

    pub fn bound(&self, fan_in: usize, fan_out: usize) -> f64 {
        match self {
            Init::GlorotUniform => (6.0 / (fan_in + fan_out) as f64).sqrt(),
            Init::HeUniform => (6.0 / fan_in as f64).sqrt(),
        }
    }
}

/// One affine layer: output width plus its activation and initializer tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
    pub init: Init,
}

impl LayerSpec {
    pub fn new(width: usize, activation: Activation, init: Init) -> LayerSpec {
        LayerSpec {
            width,
            activation,
            init,
        }
    }
}

/// Architecture of an [`Mlp`]: input width and the full layer stack,
/// hidden layers first, output layer last.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
}

impl MlpSpec {
    pub fn new(input_dim: usize, layers: Vec<LayerSpec>) -> Result<MlpSpec> {
        if input_dim == 0 {
            return Err(Error::config("network input width must be >= 1"));
        }
        if layers.is_empty() {
            return Err(Error::config("network needs at least one layer"));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.width == 0 {
                return Err(Error::config(format!("layer {i} has width 0")));
            }
            // Softmax couples the whole row, so it only makes sense where the
            // row is a designated output head, never inside the stack.
            if layer.activation == Activation::Softmax && i + 1 != layers.len() {
                return Err(Error::config(format!(
                    "softmax on hidden layer {i}; softmax is restricted to the output layer"
                )));
            }
        }
        Ok(MlpSpec { input_dim, layers })
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("validated nonempty").width
    }

    /// Total number of weights and biases.
    pub fn param_count(&self) -> usize {
        let mut fan_in = self.input_dim;
        let mut n = 0;
        for layer in &self.layers {
            n += fan_in * layer.width + layer.width;
            fan_in = layer.width;
        }
        n
    }

    /// `fan_in` of layer `l`.
    fn fan_in(&self, l: usize) -> usize {
        if l == 0 {
            self.input_dim
        } else {
            self.layers[l - 1].width
        }
    }

    /// Canonical text encoding used for the compatibility fingerprint.
    pub fn canonical_string(&self) -> String {
        let mut s = format!("in={}", self.input_dim);
        for layer in &self.layers {
            s.push_str(&format!(
                ";w={},act={},init={}",
                layer.width,
                layer.activation.tag(),
                layer.init.tag()
            ));
        }
        s
    }

    /// Stable 16-hex-digit architecture fingerprint.
    pub fn fingerprint(&self) -> String {
        crate::fingerprint(self.canonical_string().as_bytes())
    }
}

/// A dense feed-forward network with concrete weights.
#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    /// Per layer, `fan_in x fan_out`.
    weights: Vec<Matrix>,
    /// Per layer, length `fan_out`.
    biases: Vec<Vec<f64>>,
    frozen: bool,
}

impl Mlp {
    /// Draws fresh weights layer by layer in row-major order (reproducible
    /// for a given rng state); biases start at zero.
    pub fn init<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Mlp> {
        let mut weights = Vec::with_capacity(spec.layers.len());
        let mut biases = Vec::with_capacity(spec.layers.len());
        for (l, layer) in spec.layers.iter().enumerate() {
            let fan_in = spec.fan_in(l);
            let bound = layer.init.bound(fan_in, layer.width);
            let data: Vec<f64> = (0..fan_in * layer.width)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            weights.push(Matrix::new(fan_in, layer.width, data)?);
            biases.push(vec![0.0; layer.width]);
        }
        Ok(Mlp {
            spec,
            weights,
            biases,
            frozen: false,
        })
    }

    /// Rebuilds a network from flattened parameters (layer-major, weight rows
    /// before biases), e.g. when loading a model file.
    pub fn from_flat(spec: MlpSpec, flat: &[f64], frozen: bool) -> Result<Mlp> {
        if flat.len() != spec.param_count() {
            return Err(Error::arity(
                "network parameters",
                spec.param_count(),
                flat.len(),
            ));
        }
        let mut weights = Vec::with_capacity(spec.layers.len());
        let mut biases = Vec::with_capacity(spec.layers.len());
        let mut ofs = 0;
        for (l, layer) in spec.layers.iter().enumerate() {
            let fan_in = spec.fan_in(l);
            let nw = fan_in * layer.width;
            weights.push(Matrix::new(fan_in, layer.width, flat[ofs..ofs + nw].to_vec())?);
            ofs += nw;
            biases.push(flat[ofs..ofs + layer.width].to_vec());
            ofs += layer.width;
        }
        Ok(Mlp {
            spec,
            weights,
            biases,
            frozen,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    /// Marks the network immutable; any later parameter update is a contract
    /// violation and fails with a training error.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Flattened parameters in optimizer order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            flat.extend_from_slice(w.data());
            flat.extend_from_slice(b);
        }
        flat
    }

    /// Overwrites all parameters. Fails on a frozen network.
    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if self.frozen {
            return Err(Error::Training(
                "attempted parameter update on a frozen network".into(),
            ));
        }
        if flat.len() != self.param_count() {
            return Err(Error::arity(
                "network parameters",
                self.param_count(),
                flat.len(),
            ));
        }
        let mut ofs = 0;
        for l in 0..self.spec.layers.len() {
            let (r, c) = (self.weights[l].rows(), self.weights[l].cols());
            self.weights[l] = Matrix::new(r, c, flat[ofs..ofs + r * c].to_vec())?;
            ofs += r * c;
            self.biases[l].copy_from_slice(&flat[ofs..ofs + c]);
            ofs += c;
        }
        Ok(())
    }

    /// FNV fingerprint of the little-endian parameter bytes; two networks
    /// share it iff their parameters agree bit for bit.
    pub fn param_fingerprint(&self) -> String {
        let mut bytes = Vec::with_capacity(self.param_count() * 8);
        for p in self.flat_params() {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        crate::fingerprint(&bytes)
    }

    /// Forward pass over a batch, one sample per row.
    pub fn forward_batch(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.spec.input_dim {
            return Err(Error::arity(
                "network input width",
                self.spec.input_dim,
                x.cols(),
            ));
        }
        let n = x.rows();
        let mut h = x.clone();
        for (layer, (w, b)) in self.spec.layers.iter().zip(self.weights.iter().zip(&self.biases)) {
            let mut z = h.matmul(w)?;
            let m = layer.width;
            let zd = z.data().to_vec();
            let mut buf = zd;
            for i in 0..n {
                for j in 0..m {
                    buf[i * m + j] += b[j];
                }
            }
            layer.activation.apply_rows(&mut buf, m);
            z = Matrix::new(n, m, buf)?;
            h = z;
        }
        Ok(h)
    }

    /// Forward pass for a single input vector.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.spec.input_dim {
            return Err(Error::arity(
                "network input width",
                self.spec.input_dim,
                x.len(),
            ));
        }
        let out = self.forward_batch(&Matrix::new(1, x.len(), x.to_vec())?)?;
        Ok(out.data().to_vec())
    }

    /// Registers the parameters on `tape` and returns a handle for taped
    /// forward passes. `trainable` decides whether gradients flow to the
    /// parameters; inputs keep their own gradient tracking either way, so a
    /// frozen network still propagates gradients through itself.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Result<TapedMlp> {
        if trainable && self.frozen {
            return Err(Error::Training(
                "attempted to register a frozen network as trainable".into(),
            ));
        }
        let mut layers = Vec::with_capacity(self.spec.layers.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            let (wv, bv) = if trainable {
                (tape.leaf_matrix(w), tape.leaf(1, b.len(), b))
            } else {
                (tape.constant_matrix(w), tape.constant(1, b.len(), b))
            };
            layers.push(TapedLayer {
                w: wv,
                b: bv,
                fan_in: w.rows(),
                fan_out: w.cols(),
            });
        }
        Ok(TapedMlp {
            layers,
            activations: self.spec.layers.iter().map(|l| l.activation).collect(),
            input_dim: self.spec.input_dim,
            trainable,
        })
    }
}

struct TapedLayer {
    w: Var,
    b: Var,
    fan_in: usize,
    fan_out: usize,
}

/// An [`Mlp`] whose parameters live on a [`Tape`].
pub struct TapedMlp {
    layers: Vec<TapedLayer>,
    activations: Vec<Activation>,
    input_dim: usize,
    trainable: bool,
}

impl TapedMlp {
    /// Taped forward pass; `x` is `n x input_dim`. A softmax output layer is
    /// only supported for single-row inputs (softmax couples a whole row and
    /// the tape primitive works on one row).
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (n, c) = tape.shape(x);
        if c != self.input_dim {
            return Err(Error::arity("network input width", self.input_dim, c));
        }
        let mut h = x;
        for (layer, act) in self.layers.iter().zip(&self.activations) {
            let z = tape.matmul(h, layer.w);
            let z = tape.add_row(z, layer.b);
            h = match act {
                Activation::Linear => z,
                Activation::Softmax => {
                    if n != 1 {
                        return Err(Error::arity("softmax batch rows", 1, n));
                    }
                    tape.softmax_row(z)
                }
                _ => tape.unary(z, act.unary().expect("pointwise activation")),
            };
        }
        Ok(h)
    }

    /// Extracts the parameter gradients in flat optimizer order. A parameter
    /// block the loss never touched contributes zeros.
    pub fn flat_gradients(&self, g: &Gradients) -> Result<Vec<f64>> {
        if !self.trainable {
            return Err(Error::Training(
                "gradients requested from a network registered as constant".into(),
            ));
        }
        let total: usize = self
            .layers
            .iter()
            .map(|l| l.fan_in * l.fan_out + l.fan_out)
            .sum();
        let mut flat = Vec::with_capacity(total);
        for layer in &self.layers {
            match g.wrt(layer.w) {
                Some(gw) => flat.extend_from_slice(gw),
                None => flat.extend(std::iter::repeat(0.0).take(layer.fan_in * layer.fan_out)),
            }
            match g.wrt(layer.b) {
                Some(gb) => flat.extend_from_slice(gb),
                None => flat.extend(std::iter::repeat(0.0).take(layer.fan_out)),
            }
        }
        Ok(flat)
    }
}
