//! Adam optimizer.
//!
//! Standard update with bias correction: with g the gradient,
//!
//! ```text
//! m <- b1 m + (1 - b1) g          m_hat = m / (1 - b1^t)
//! v <- b2 v + (1 - b2) g^2        v_hat = v / (1 - b2^t)
//! theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)
//! ```
//!
//! so the very first step reduces to `theta -= lr * g / (|g| + eps)`.

use crate::{Error, Result};
use crate::nn::Mlp;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer state: step counter plus first and second moment vectors shaped
/// like the flattened parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(lr: f64, n_params: usize) -> AdamState {
        AdamState {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// One in-place update of `params` from `grads`.
    pub fn apply(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::arity("adam parameters", self.m.len(), params.len()));
        }
        if grads.len() != self.m.len() {
            return Err(Error::arity("adam gradients", self.m.len(), grads.len()));
        }
        self.step += 1;
        let t = self.step as i32;
        let mc = 1.0 - self.beta1.powi(t);
        let vc = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / mc;
            let v_hat = self.v[i] / vc;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// One optimizer step on a network's parameters. Fails on a frozen network
/// before touching any state.
pub fn adam_step(mlp: &mut Mlp, state: &mut AdamState, grads: &[f64]) -> Result<()> {
    if mlp.is_frozen() {
        return Err(Error::Training(
            "attempted an optimizer step on a frozen network".into(),
        ));
    }
    let mut params = mlp.flat_params();
    state.apply(&mut params, grads)?;
    mlp.set_flat_params(&params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Init, LayerSpec, MlpSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut state = AdamState::new(0.1, 3);
        let mut params = vec![1.0, -2.0, 0.5];
        state.apply(&mut params, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(params, vec![1.0, -2.0, 0.5]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // With zero moments, bias correction collapses the first update to
        // -lr * g / (|g| + eps) exactly.
        let lr = 0.01;
        let grads = [0.3, -2.0, 1e-4];
        let mut params = [1.0, 1.0, 1.0];
        let mut state = AdamState::new(lr, 3);
        state.apply(&mut params, &grads).unwrap();
        for (i, &g) in grads.iter().enumerate() {
            let expected = 1.0 - lr * g / (g.abs() + ADAM_EPS);
            assert!(
                (params[i] - expected).abs() < 1e-15,
                "param {i}: {} vs {expected}",
                params[i]
            );
        }
    }

    #[test]
    fn quadratic_converges_and_matches_scalar_recurrence() {
        // f(theta) = |theta|^2, grad = 2 theta, from (1, 1) with lr = 0.1.
        // Both coordinates follow the same scalar recurrence, which is run
        // here independently as the reference.
        let lr = 0.1;
        let mut params = vec![1.0, 1.0];
        let mut state = AdamState::new(lr, 2);
        for _ in 0..200 {
            let grads: Vec<f64> = params.iter().map(|&p| 2.0 * p).collect();
            state.apply(&mut params, &grads).unwrap();
        }

        let (mut theta, mut m, mut v) = (1.0_f64, 0.0_f64, 0.0_f64);
        for t in 1..=200 {
            let g = 2.0 * theta;
            m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g;
            v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m / (1.0 - ADAM_BETA1.powi(t));
            let v_hat = v / (1.0 - ADAM_BETA2.powi(t));
            theta -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }

        for &p in &params {
            assert!((p - theta).abs() < 1e-12, "{p} vs scalar {theta}");
        }
        let norm = (params[0] * params[0] + params[1] * params[1]).sqrt();
        assert!(norm < 1e-2, "|theta| = {norm}");
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let mut state = AdamState::new(0.1, 3);
        let mut params = vec![0.0; 3];
        assert!(matches!(
            state.apply(&mut params, &[1.0, 2.0]),
            Err(Error::Arity { .. })
        ));
        let mut short = vec![0.0; 2];
        assert!(matches!(
            state.apply(&mut short, &[1.0, 2.0, 3.0]),
            Err(Error::Arity { .. })
        ));
    }

    #[test]
    fn frozen_network_rejects_optimizer_step() {
        let spec = MlpSpec::new(
            2,
            vec![LayerSpec::new(2, Activation::Linear, Init::GlorotUniform)],
        )
        .unwrap();
        let mut mlp = Mlp::init(spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let n = mlp.param_count();
        let mut state = AdamState::new(0.01, n);
        let grads = vec![0.1; n];
        adam_step(&mut mlp, &mut state, &grads).unwrap();
        assert_eq!(state.step_count(), 1);
        mlp.freeze();
        assert!(matches!(
            adam_step(&mut mlp, &mut state, &grads),
            Err(Error::Training(_))
        ));
        // The failed attempt must not have advanced the optimizer state.
        assert_eq!(state.step_count(), 1);
    }
}
