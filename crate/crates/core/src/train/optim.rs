//! RMSprop with momentum, and the step-halving learning-rate schedule.
//!
//! The composition rule is velocity-on-preconditioned-gradient:
//!
//! ```text
//! r <- rho * r + (1 - rho) * g^2
//! v <- momentum * v + lr * g / sqrt(r + eps)
//! theta <- theta - v
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{NetworkGradients, NetworkGraph};
use crate::scalar::Scalar;

use super::TrainConfig;

/// Fixed optimizer hyper-parameters (everything except the learning rate).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmspropHyper {
    /// Squared-gradient decay rho.
    pub decay: f64,
    /// Denominator guard epsilon.
    pub epsilon: f64,
    /// Velocity retention factor.
    pub momentum: f64,
}

impl RmspropHyper {
    pub fn from_config(config: &TrainConfig) -> Self {
        RmspropHyper {
            decay: config.rmsprop_decay,
            epsilon: config.rmsprop_epsilon,
            momentum: config.momentum,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::InvalidConfig(format!("rmsprop decay must lie in (0, 1), got {}", self.decay)));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::InvalidConfig(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!("rmsprop epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Per-parameter accumulators plus schedule position, shaped exactly like the
/// network's parameter banks (index 0 = weights, 1 = bias, 2 = slopes, per
/// node in plan order).
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    /// Squared-gradient accumulator, one flat array per parameter array.
    pub r: Vec<Vec<T>>,
    /// Velocity, same layout as `r`.
    pub v: Vec<Vec<T>>,
    /// Last completed 1-based epoch (0 before training starts).
    pub epoch: usize,
    /// Learning rate most recently applied (0 before training starts).
    pub lr: f64,
}

impl<T: Scalar> OptimizerState<T> {
    /// Fresh state for a network: all accumulators zero.
    pub fn zeros(net: &NetworkGraph<T>) -> Self {
        let mut r = Vec::new();
        for bank in &net.banks {
            r.push(vec![T::zero(); bank.weights.len()]);
            r.push(vec![T::zero(); bank.bias.len()]);
            r.push(vec![T::zero(); bank.prelu.as_ref().map_or(0, Vec::len)]);
        }
        let v = r.clone();
        OptimizerState { r, v, epoch: 0, lr: 0.0 }
    }

    fn matches(&self, net: &NetworkGraph<T>) -> bool {
        self.r.len() == 3 * net.banks.len()
            && self.v.len() == self.r.len()
            && net.banks.iter().enumerate().all(|(i, bank)| {
                self.r[3 * i].len() == bank.weights.len()
                    && self.r[3 * i + 1].len() == bank.bias.len()
                    && self.r[3 * i + 2].len() == bank.prelu.as_ref().map_or(0, Vec::len)
            })
    }
}

/// Learning rate in force during `epoch` (1-based): the initial rate before
/// `lr_halving_start_epoch`, then halved at the start of that epoch and again
/// after every further `lr_halving_period` epochs.
pub fn lr_at_epoch(config: &TrainConfig, epoch: usize) -> f64 {
    assert!(epoch >= 1, "epochs are 1-based");
    let start = config.lr_halving_start_epoch;
    if epoch < start {
        return config.initial_lr;
    }
    let halvings = (epoch - start) / config.lr_halving_period + 1;
    config.initial_lr * (0.5f64).powi(halvings as i32)
}

/// One elementwise update over a single parameter array. The whole array is
/// rejected before any element is touched if the gradient is non-finite, so a
/// failed step never leaves partial updates behind.
pub fn rmsprop_update<T: Scalar>(
    theta: &mut [T],
    grad: &[T],
    r: &mut [T],
    v: &mut [T],
    hyper: &RmspropHyper,
    lr: f64,
) -> Result<()> {
    if theta.len() != grad.len() || theta.len() != r.len() || theta.len() != v.len() {
        return Err(Error::ShapeMismatch(format!(
            "optimizer arrays disagree: theta {}, grad {}, r {}, v {}",
            theta.len(),
            grad.len(),
            r.len(),
            v.len()
        )));
    }
    if let Some(pos) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient element {pos} is not finite; step aborted")));
    }
    let rho = T::of_f64(hyper.decay);
    let one_minus_rho = T::of_f64(1.0 - hyper.decay);
    let eps = T::of_f64(hyper.epsilon);
    let mu = T::of_f64(hyper.momentum);
    let lr_t = T::of_f64(lr);
    for i in 0..theta.len() {
        let g = grad[i];
        r[i] = rho * r[i] + one_minus_rho * g * g;
        v[i] = mu * v[i] + lr_t * g / (r[i] + eps).sqrt();
        theta[i] = theta[i] - v[i];
    }
    Ok(())
}

/// One optimization step over every parameter in the network.
///
/// Validates all gradients finite before mutating anything (a non-finite
/// gradient aborts the whole step), then updates weights, biases, and PReLU
/// slopes bank by bank.
pub fn rmsprop_step<T: Scalar>(
    state: &mut OptimizerState<T>,
    net: &mut NetworkGraph<T>,
    grads: &NetworkGradients<T>,
    hyper: &RmspropHyper,
    lr: f64,
) -> Result<()> {
    if grads.banks.len() != net.banks.len() {
        return Err(Error::ShapeMismatch(format!(
            "gradients cover {} banks but the network has {}",
            grads.banks.len(),
            net.banks.len()
        )));
    }
    if !state.matches(net) {
        return Err(Error::ShapeMismatch("optimizer state does not match the network layout".into()));
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite("non-finite gradient; step aborted".into()));
    }
    for (i, (bank, g)) in net.banks.iter_mut().zip(&grads.banks).enumerate() {
        rmsprop_update(&mut bank.weights, &g.weights, &mut state.r[3 * i], &mut state.v[3 * i], hyper, lr)?;
        rmsprop_update(&mut bank.bias, &g.bias, &mut state.r[3 * i + 1], &mut state.v[3 * i + 1], hyper, lr)?;
        match (&mut bank.prelu, &g.prelu) {
            (Some(slopes), Some(gs)) => {
                rmsprop_update(slopes, gs, &mut state.r[3 * i + 2], &mut state.v[3 * i + 2], hyper, lr)?
            }
            (None, None) => {}
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "bank {i}: slope gradients present iff the bank has slopes"
                )))
            }
        }
        state.lr = lr;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn default_hyper() -> RmspropHyper {
        RmspropHyper { decay: 0.9, epsilon: 1e-6, momentum: 0.6 }
    }

    fn config_with_schedule() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn schedule_matches_the_closed_form_pins() {
        let c = config_with_schedule();
        assert_eq!(lr_at_epoch(&c, 1), 0.001);
        assert_eq!(lr_at_epoch(&c, 9), 0.001);
        assert_eq!(lr_at_epoch(&c, 10), 0.0005);
        assert_eq!(lr_at_epoch(&c, 14), 0.0005);
        assert_eq!(lr_at_epoch(&c, 15), 0.00025);
        assert_eq!(lr_at_epoch(&c, 20), 0.000125);
        assert_eq!(lr_at_epoch(&c, 25), 0.0000625);
        assert_eq!(lr_at_epoch(&c, 30), 0.00003125);
    }

    #[test]
    fn schedule_closed_form_over_thirty_epochs() {
        let c = config_with_schedule();
        for epoch in 1..=30usize {
            let expect = if epoch < c.lr_halving_start_epoch {
                c.initial_lr
            } else {
                let h = (epoch - c.lr_halving_start_epoch) / c.lr_halving_period + 1;
                c.initial_lr / (1u64 << h) as f64
            };
            assert_eq!(lr_at_epoch(&c, epoch), expect, "epoch {epoch}");
        }
    }

    #[test]
    fn scalar_hand_oracle() {
        // theta = 1, g = 1, r = 0, v = 0, rho = 0.9, eps = 1e-6, lr = 0.001,
        // momentum = 0.6  ->  r = 0.1, v = 0.001/sqrt(0.100001),
        // theta ~= 0.996838
        let hyper = default_hyper();
        let mut theta = [1.0f64];
        let mut r = [0.0f64];
        let mut v = [0.0f64];
        rmsprop_update(&mut theta, &[1.0], &mut r, &mut v, &hyper, 0.001).unwrap();
        assert!((r[0] - 0.1).abs() < 1e-15);
        let v_expect = 0.001 / 0.100001f64.sqrt();
        assert!((v[0] - v_expect).abs() < 1e-15);
        assert!((theta[0] - (1.0 - v_expect)).abs() < 1e-15);
        assert!((theta[0] - 0.996838).abs() < 1e-6);
    }

    #[test]
    fn randomized_scalar_cases_match_a_reference_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let hyper = RmspropHyper {
                decay: rng.gen_range(0.5..0.999),
                epsilon: rng.gen_range(1e-8..1e-4),
                momentum: rng.gen_range(0.0..0.95),
            };
            let lr = rng.gen_range(1e-5..1e-2);
            let theta0: f64 = rng.gen_range(-2.0..2.0);
            let g: f64 = rng.gen_range(-3.0..3.0);
            let r0: f64 = rng.gen_range(0.0..1.0);
            let v0: f64 = rng.gen_range(-0.1..0.1);

            let mut theta = [theta0];
            let mut r = [r0];
            let mut v = [v0];
            rmsprop_update(&mut theta, &[g], &mut r, &mut v, &hyper, lr).unwrap();

            let r_ref = hyper.decay * r0 + (1.0 - hyper.decay) * g * g;
            let v_ref = hyper.momentum * v0 + lr * g / (r_ref + hyper.epsilon).sqrt();
            let t_ref = theta0 - v_ref;
            assert!((r[0] - r_ref).abs() <= 1e-12);
            assert!((v[0] - v_ref).abs() <= 1e-12);
            assert!((theta[0] - t_ref).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_gradient_with_zero_velocity_is_a_fixed_point() {
        let hyper = default_hyper();
        let mut theta = [0.25f64, -1.5, 3.0];
        let before = theta;
        let mut r = [0.0; 3];
        let mut v = [0.0; 3];
        rmsprop_update(&mut theta, &[0.0; 3], &mut r, &mut v, &hyper, 0.001).unwrap();
        assert_eq!(theta, before);
    }

    #[test]
    fn momentum_compounds_identical_gradients() {
        // Two consecutive identical-gradient steps: the second displacement
        // exceeds the first while momentum > 0 and r growth is dominated.
        let hyper = default_hyper();
        let mut theta = [1.0f64];
        let mut r = [0.0f64];
        let mut v = [0.0f64];
        rmsprop_update(&mut theta, &[1.0], &mut r, &mut v, &hyper, 0.001).unwrap();
        let d1 = (1.0 - theta[0]).abs();
        let t1 = theta[0];
        rmsprop_update(&mut theta, &[1.0], &mut r, &mut v, &hyper, 0.001).unwrap();
        let d2 = (t1 - theta[0]).abs();
        assert!(d2 > d1, "second step {d2} should exceed first {d1}");
    }

    #[test]
    fn non_finite_gradient_aborts_without_touching_state() {
        let hyper = default_hyper();
        let mut theta = [1.0f64, 2.0];
        let mut r = [0.5f64, 0.5];
        let mut v = [0.1f64, 0.1];
        let err = rmsprop_update(&mut theta, &[1.0, f64::NAN], &mut r, &mut v, &hyper, 0.001).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(theta, [1.0, 2.0]);
        assert_eq!(r, [0.5, 0.5]);
        assert_eq!(v, [0.1, 0.1]);
    }

    #[test]
    fn network_step_moves_every_parameter_group() {
        use crate::graph::{ArchitectureSpec, FusionMode, Phase};
        use crate::tensor::{Shape5, VolumeTensor};

        let spec = ArchitectureSpec {
            fusion_mode: FusionMode::HyperDense,
            num_modalities: 2,
            conv_kernels: vec![2, 2],
            fc_kernels: vec![3],
            num_classes: 2,
            permutation_rule: Default::default(),
            dropout_rate: 0.0,
        };
        let mut net = NetworkGraph::<f64>::build(&spec, 5).unwrap();
        let mut state = OptimizerState::zeros(&net);
        let shape = Shape5::new(1, 1, 7, 7, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs: Vec<_> = (0..2)
            .map(|_| {
                let data = (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                VolumeTensor::from_vec(shape, data).unwrap()
            })
            .collect();
        let labels = crate::label::LabelBatch::new(1, [3, 3, 3], vec![1u8; 27]).unwrap();

        let before = net.banks.clone();
        let (_, grads) = net.backward(&inputs, &labels, Phase::Train, 0).unwrap();
        rmsprop_step(&mut state, &mut net, &grads, &default_hyper(), 0.01).unwrap();

        for (b, a) in before.iter().zip(&net.banks) {
            assert_ne!(b.weights, a.weights);
        }
        assert_eq!(state.lr, 0.01);
        assert!(state.r.iter().flatten().all(|x| *x >= 0.0));
    }
}
