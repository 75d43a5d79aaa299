//! SGD with classic momentum and decoupled-sign weight decay folded into the
//! gradient: `v ← momentum·v + g + wd·θ`, `θ ← θ − lr·v`.

use crate::autodiff::Parameter;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Momentum SGD over a fixed group of parameters.
///
/// Velocity buffers are keyed by position in the parameter slice passed to
/// [`Sgd::step`], so callers must keep the group order stable across steps.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        // lr = 0 is allowed: no-learning control runs depend on it
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::config(format!(
                "learning rate must be non-negative, got {lr}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        if !(weight_decay.is_finite() && weight_decay >= 0.0) {
            return Err(Error::config(format!(
                "weight decay must be non-negative, got {weight_decay}"
            )));
        }
        Ok(Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    /// One update over the group, consuming each parameter's current gradient.
    pub fn step(&mut self, params: &mut [&mut Parameter]) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params
                .iter()
                .map(|p| Tensor::zeros(p.value().shape()))
                .collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::contract(
                "optimizer was initialized with a different parameter group size",
            ));
        }
        for (p, vel) in params.iter_mut().zip(self.velocity.iter_mut()) {
            if !p.requires_grad() {
                return Err(Error::contract(
                    "frozen parameter handed to the optimizer",
                ));
            }
            if vel.shape() != p.value().shape() {
                return Err(Error::contract(
                    "parameter shape changed between optimizer steps",
                ));
            }
            let n = p.value().len();
            let mut delta = vec![0.0; n];
            for i in 0..n {
                let g = p.grad().data()[i] + self.weight_decay * p.value().data()[i];
                let v = self.momentum * vel.data()[i] + g;
                vel.data_mut()[i] = v;
                delta[i] = -self.lr * v;
            }
            p.apply_delta(&delta);
            if !p.value().all_finite() {
                return Err(Error::NonFinite { op: "sgd_step" });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two steps on a single weight with a constant unit gradient:
    /// momentum 0.9, lr 0.01, no decay.
    #[test]
    fn momentum_accumulates_across_steps() {
        let mut p = Parameter::trainable(Tensor::scalar(1.0));
        let mut opt = Sgd::new(0.01, 0.9, 0.0).unwrap();

        set_grad(&mut p, 1.0);
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.value().data()[0] - 0.99).abs() < 1e-15);

        set_grad(&mut p, 1.0);
        opt.step(&mut [&mut p]).unwrap();
        // second velocity = 0.9·1 + 1 = 1.9, so θ = 0.99 − 0.019
        assert!((p.value().data()[0] - 0.971).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_pulls_toward_zero_without_gradient() {
        let mut p = Parameter::trainable(Tensor::scalar(2.0));
        let mut opt = Sgd::new(0.1, 0.0, 0.5).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        // g = 0 + 0.5·2 = 1, θ = 2 − 0.1·1
        assert!((p.value().data()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn frozen_parameter_is_rejected() {
        let mut p = Parameter::frozen(Tensor::scalar(1.0));
        let mut opt = Sgd::new(0.01, 0.9, 0.0).unwrap();
        assert!(opt.step(&mut [&mut p]).is_err());
    }

    #[test]
    fn invalid_hyperparameters_are_config_errors() {
        assert!(Sgd::new(-0.01, 0.9, 0.0).is_err());
        assert!(Sgd::new(0.01, 1.0, 0.0).is_err());
        assert!(Sgd::new(0.01, 0.9, -1.0).is_err());
        // zero lr is a valid no-learning control
        assert!(Sgd::new(0.0, 0.9, 0.0).is_ok());
    }

    fn set_grad(p: &mut Parameter, g: f64) {
        // route through the tape so the accumulator path is the real one
        use crate::autodiff::Tape;
        let mut t = Tape::new();
        let v = t.param(p);
        let s = t.scale(v, g).unwrap();
        let loss = t.sum(s).unwrap();
        let grads = t.backward(loss).unwrap();
        p.take_grad(&grads, v).unwrap();
    }
}
