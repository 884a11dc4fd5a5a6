//! SGD with classical momentum and (coupled) weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// Momentum SGD. The velocity buffers are lazily sized on the first step and
/// keyed by parameter order, which must stay stable across steps.
pub struct Sgd<S = f64> {
    config: OptimizerConfig,
    velocity: Vec<Tensor<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            velocity: Vec::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Overrides the learning rate (step decay schedules).
    pub fn set_learning_rate(&mut self, lr: f64) -> Result<()> {
        if !lr.is_finite() || lr <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        self.config.learning_rate = lr;
        Ok(())
    }

    pub fn velocity(&self) -> &[Tensor<S>] {
        &self.velocity
    }

    /// One update: `v <- momentum*v + (g + wd*p)`, `p <- p - lr*v`.
    /// Gradients are consumed (zeroed) by the step; a missing gradient is a
    /// contract violation.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<S>],
        grads: &mut [Option<Tensor<S>>],
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} params with {} grads",
                params.len(),
                grads.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = params
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer state holds {} buffers for {} params",
                self.velocity.len(),
                params.len()
            )));
        }
        let lr = S::from_f64_lossy(self.config.learning_rate);
        let mu = S::from_f64_lossy(self.config.momentum);
        let wd = S::from_f64_lossy(self.config.weight_decay);
        for ((param, grad_slot), vel) in params
            .iter_mut()
            .zip(grads.iter_mut())
            .zip(&mut self.velocity)
        {
            let grad = grad_slot
                .take()
                .ok_or_else(|| Error::Contract("missing gradient in optimizer step".into()))?;
            if grad.shape() != param.shape() {
                return Err(Error::Shape(format!(
                    "gradient shape {:?} vs param shape {:?}",
                    grad.shape(),
                    param.shape()
                )));
            }
            for ((p, &g), v) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(vel.data_mut())
            {
                let g = g + wd * *p;
                *v = mu * *v + g;
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sgd(lr: f64, momentum: f64) -> Sgd<f64> {
        Sgd::new(OptimizerConfig {
            learning_rate: lr,
            momentum,
            weight_decay: 0.0,
        })
        .unwrap()
    }

    #[test]
    fn plain_step() {
        let mut p = Tensor::scalar(1.0);
        let mut grads = vec![Some(Tensor::scalar(1.0))];
        sgd(0.1, 0.0).step(&mut [&mut p], &mut grads).unwrap();
        assert_eq!(p.data(), &[0.9]);
        assert!(grads[0].is_none(), "grad consumed");
    }

    #[test]
    fn zero_grad_leaves_param_unchanged() {
        let mut p = Tensor::scalar(0.75);
        let mut grads = vec![Some(Tensor::scalar(0.0))];
        sgd(0.1, 0.0).step(&mut [&mut p], &mut grads).unwrap();
        assert_eq!(p.data(), &[0.75]);
    }

    #[test]
    fn momentum_hand_iteration() {
        // lr 0.1, momentum 0.9, constant grad 1, p0 = 0 -> -0.1 then -0.29
        let mut opt = sgd(0.1, 0.9);
        let mut p = Tensor::scalar(0.0);
        let mut grads = vec![Some(Tensor::scalar(1.0))];
        opt.step(&mut [&mut p], &mut grads).unwrap();
        assert!((p.data()[0] - -0.1).abs() < 1e-15);
        grads[0] = Some(Tensor::scalar(1.0));
        opt.step(&mut [&mut p], &mut grads).unwrap();
        assert!((p.data()[0] - -0.29).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut p = Tensor::scalar(1.0);
        let mut grads: Vec<Option<Tensor<f64>>> = vec![None];
        assert!(matches!(
            sgd(0.1, 0.0).step(&mut [&mut p], &mut grads),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(Sgd::<f64>::new(OptimizerConfig {
            learning_rate: 0.0,
            momentum: 0.0,
            weight_decay: 0.0
        })
        .is_err());
        assert!(Sgd::<f64>::new(OptimizerConfig {
            learning_rate: 0.1,
            momentum: 1.0,
            weight_decay: 0.0
        })
        .is_err());
        assert!(Sgd::<f64>::new(OptimizerConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: -1.0
        })
        .is_err());
    }
}
