//! Regression training: minibatch Adam with early stopping.
//!
//! The engine fits an [`Mlp`] to input/target pairs by elementwise mean
//! squared error. Batches are reshuffled every epoch from a seed derived from
//! the master seed and the epoch index, so a training curve is reproducible
//! bit for bit regardless of how the caller schedules work. The returned
//! network is the checkpoint with the lowest validation loss, not the last
//! iterate.
//!
//! [`pretrain_decoder`] specializes the engine to the motion surrogate: it
//! maps `[z, w_scaled]` to the scaled feature vector on the train split,
//! early-stops on the validation split, and freezes the result.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::derive_seed2;
use crate::{Error, Result};
use crate::mathcore::{Matrix, Tape, Unary};
use crate::nn::{adam_step, AdamState, Mlp, MlpSpec};
use crate::simulator::Dataset;

const SALT_NN_INIT: u64 = 0x4e49;
const SALT_NN_SHUFFLE: u64 = 0x4e53;

/// Stops training once the monitored value has gone `patience` consecutive
/// epochs without improving by at least `min_delta`.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    min_delta: f64,
    patience: usize,
    best: f64,
    since: usize,
}

impl EarlyStopper {
    pub const DEFAULT_MIN_DELTA: f64 = 1e-3;

    pub fn new(min_delta: f64, patience: usize) -> Result<EarlyStopper> {
        if !(min_delta >= 0.0) {
            return Err(Error::parameter("early stopping min_delta must be >= 0"));
        }
        if patience == 0 {
            return Err(Error::parameter("early stopping patience must be >= 1"));
        }
        Ok(EarlyStopper {
            min_delta,
            patience,
            best: f64::INFINITY,
            since: 0,
        })
    }

    /// Feeds one epoch value; returns true when training should stop now.
    /// An improvement of exactly `min_delta` counts as an improvement.
    pub fn observe(&mut self, value: f64) -> bool {
        if self.best - value >= self.min_delta {
            self.best = value;
            self.since = 0;
        } else {
            self.since += 1;
        }
        self.since >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn epochs_since_improvement(&self) -> usize {
        self.since
    }
}

/// Hyperparameters of one regression fit.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub seed: u64,
}

impl TrainOptions {
    pub fn new(lr: f64, batch_size: usize, max_epochs: usize, patience: usize, seed: u64) -> Self {
        TrainOptions {
            lr,
            batch_size,
            max_epochs,
            patience,
            min_delta: EarlyStopper::DEFAULT_MIN_DELTA,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning rate must be positive and finite"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be >= 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be >= 1"));
        }
        Ok(())
    }
}

/// Train/validation design matrices, one sample per row.
#[derive(Debug, Clone)]
pub struct Regression {
    train_inputs: Matrix,
    train_targets: Matrix,
    val_inputs: Matrix,
    val_targets: Matrix,
}

impl Regression {
    pub fn new(
        train_inputs: Matrix,
        train_targets: Matrix,
        val_inputs: Matrix,
        val_targets: Matrix,
    ) -> Result<Regression> {
        if train_inputs.rows() == 0 || val_inputs.rows() == 0 {
            return Err(Error::parameter("train and validation sets must be nonempty"));
        }
        if train_inputs.rows() != train_targets.rows() {
            return Err(Error::arity(
                "train target rows",
                train_inputs.rows(),
                train_targets.rows(),
            ));
        }
        if val_inputs.rows() != val_targets.rows() {
            return Err(Error::arity(
                "validation target rows",
                val_inputs.rows(),
                val_targets.rows(),
            ));
        }
        if val_inputs.cols() != train_inputs.cols() {
            return Err(Error::arity(
                "validation input width",
                train_inputs.cols(),
                val_inputs.cols(),
            ));
        }
        if val_targets.cols() != train_targets.cols() {
            return Err(Error::arity(
                "validation target width",
                train_targets.cols(),
                val_targets.cols(),
            ));
        }
        Ok(Regression {
            train_inputs,
            train_targets,
            val_inputs,
            val_targets,
        })
    }

    pub fn n_train(&self) -> usize {
        self.train_inputs.rows()
    }

    pub fn n_val(&self) -> usize {
        self.val_inputs.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.train_inputs.cols()
    }

    pub fn target_dim(&self) -> usize {
        self.train_targets.cols()
    }
}

/// One epoch on the loss curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPoint {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Per-epoch train/validation losses in epoch order.
#[derive(Debug, Clone, Default)]
pub struct LossCurve(pub Vec<LossPoint>);

impl LossCurve {
    pub fn points(&self) -> &[LossPoint] {
        &self.0
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for p in &self.0 {
            out.push_str(&format!("{},{},{}\n", p.epoch, p.train_loss, p.val_loss));
        }
        out
    }
}

/// Elementwise mean squared error of the network's predictions.
pub fn mse(mlp: &Mlp, inputs: &Matrix, targets: &Matrix) -> Result<f64> {
    let out = mlp.forward_batch(inputs)?;
    if out.cols() != targets.cols() {
        return Err(Error::arity("target width", out.cols(), targets.cols()));
    }
    let sse: f64 = out
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(sse / (targets.rows() * targets.cols()) as f64)
}

fn gather_rows(m: &Matrix, idx: &[usize]) -> Matrix {
    let mut data = Vec::with_capacity(idx.len() * m.cols());
    for &i in idx {
        data.extend_from_slice(m.row(i));
    }
    Matrix::new(idx.len(), m.cols(), data).expect("rows of a finite matrix")
}

/// Fits `spec` to `data` by minibatch Adam on the elementwise MSE.
///
/// Initialization, shuffling, and therefore the whole trajectory are
/// determined by `opts.seed`. Returns the lowest-validation-loss checkpoint
/// together with the full loss curve. A non-finite loss aborts with a
/// training error identifying the epoch.
pub fn fit_regression(
    data: &Regression,
    spec: &MlpSpec,
    opts: &TrainOptions,
) -> Result<(Mlp, LossCurve)> {
    opts.validate()?;
    if spec.input_dim != data.input_dim() {
        return Err(Error::arity("network input width", data.input_dim(), spec.input_dim));
    }
    if spec.output_dim() != data.target_dim() {
        return Err(Error::arity(
            "network output width",
            data.target_dim(),
            spec.output_dim(),
        ));
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed2(opts.seed, SALT_NN_INIT, 0));
    let mut mlp = Mlp::init(spec.clone(), &mut init_rng)?;
    let mut adam = AdamState::new(opts.lr, mlp.param_count());
    let mut stopper = EarlyStopper::new(opts.min_delta, opts.patience)?;

    let n = data.n_train();
    let out_dim = data.target_dim();
    let mut best_val = f64::INFINITY;
    let mut best_params = mlp.flat_params();
    let mut curve = LossCurve::default();

    for epoch in 0..opts.max_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed2(opts.seed, SALT_NN_SHUFFLE, epoch as u64));
        order.shuffle(&mut shuffle_rng);

        let mut sse = 0.0;
        for (b, chunk) in order.chunks(opts.batch_size).enumerate() {
            let xb = gather_rows(&data.train_inputs, chunk);
            let yb = gather_rows(&data.train_targets, chunk);
            let mut tape = Tape::new();
            let taped = mlp.register(&mut tape, true)?;
            let xv = tape.constant_matrix(&xb);
            let yv = tape.constant_matrix(&yb);
            let out = taped.forward(&mut tape, xv)?;
            let diff = tape.sub(out, yv);
            let sq = tape.unary(diff, Unary::Square);
            let total = tape.sum(sq);
            let denom = (chunk.len() * out_dim) as f64;
            let loss = tape.scale(total, 1.0 / denom);
            let loss_value = tape.scalar_value(loss);
            if !loss_value.is_finite() || tape.poisoned().is_some() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch}, batch {b}"
                )));
            }
            let grads = tape.backward(loss)?;
            let flat = taped.flat_gradients(&grads)?;
            adam_step(&mut mlp, &mut adam, &flat)?;
            sse += loss_value * denom;
        }
        let train_loss = sse / (n * out_dim) as f64;
        let val_loss = mse(&mlp, &data.val_inputs, &data.val_targets)?;
        if !val_loss.is_finite() {
            return Err(Error::Training(format!(
                "non-finite validation loss at epoch {epoch}"
            )));
        }
        curve.0.push(LossPoint {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_params = mlp.flat_params();
        }
        if stopper.observe(val_loss) {
            break;
        }
    }

    mlp.set_flat_params(&best_params)?;
    Ok((mlp, curve))
}

/// Assembles the decoder regression problem from a dataset: inputs are
/// `[z1, z2, hs', tp', wv']` with the environment scaled by its physical
/// ranges, targets are the min-max scaled feature vectors.
pub fn decoder_regression(ds: &Dataset) -> Result<Regression> {
    let build = |split| -> Result<(Matrix, Matrix)> {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut rows = 0;
        for sc in ds.split(split) {
            let w = sc.env.scaled();
            xs.extend_from_slice(&[sc.damage.z1(), sc.damage.z2(), w[0], w[1], w[2]]);
            ys.extend_from_slice(&ds.scaled_features(sc)?);
            rows += 1;
        }
        Ok((
            Matrix::new(rows, 5, xs)?,
            Matrix::new(rows, ds.n_features(), ys)?,
        ))
    };
    let (train_x, train_y) = build(crate::simulator::Split::Train)?;
    let (val_x, val_y) = build(crate::simulator::Split::Val)?;
    Regression::new(train_x, train_y, val_x, val_y)
}

/// Pretrains the motion surrogate on a dataset and freezes it.
pub fn pretrain_decoder(
    ds: &Dataset,
    spec: &MlpSpec,
    opts: &TrainOptions,
) -> Result<(Mlp, LossCurve)> {
    let data = decoder_regression(ds)?;
    let (mut mlp, curve) = fit_regression(&data, spec, opts)?;
    mlp.freeze();
    Ok((mlp, curve))
}
