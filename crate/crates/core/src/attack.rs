//! FGSM adversarial examples and the accuracy-vs-ε evaluation protocol.
//!
//! The attack takes the loss gradient with respect to the *raw* `[0,1]` image:
//! normalization is part of the recorded graph, so the chain rule carries the
//! gradient back through it and ε stays comparable across models. The
//! perturbed image is clipped back into the valid range. Through the binary
//! feature branch the gradient uses the same straight-through estimator as
//! training, making the attack white-box for the full inference graph.

use serde::{Deserialize, Serialize};

use crate::data::{DatasetView, Normalizer};
use crate::error::{Error, Result};
use crate::model::{predictions, FusedModel};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Perturbation budget in raw image scale (`8/255` etc.).
    pub epsilon: f64,
    pub clip_min: f64,
    pub clip_max: f64,
}

impl AttackConfig {
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            clip_min: 0.0,
            clip_max: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!(
                "epsilon must be in [0,1], got {}",
                self.epsilon
            )));
        }
        if self.clip_min >= self.clip_max
            || !self.clip_min.is_finite()
            || !self.clip_max.is_finite()
        {
            return Err(Error::Config(format!(
                "clip range [{}, {}] is empty",
                self.clip_min, self.clip_max
            )));
        }
        Ok(())
    }
}

/// One point of an accuracy-vs-ε curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub model_id: String,
    pub epsilon: f64,
    pub accuracy: f64,
    pub samples: usize,
}

/// Accuracy records over a sweep of attack intensities.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub records: Vec<AttackRecord>,
}

fn sign<S: Scalar>(v: S) -> S {
    if v > S::zero() {
        S::one()
    } else if v < S::zero() {
        -S::one()
    } else {
        S::zero() // sign(0) = 0 keeps epsilon = 0 an exact no-op
    }
}

/// One-step FGSM: `clip(x + eps * sign(grad_x loss))` in raw image space.
pub fn fgsm(
    model: &FusedModel,
    norm: &Normalizer,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    if x.data()
        .iter()
        .any(|&v| v < cfg.clip_min || v > cfg.clip_max)
    {
        return Err(Error::Config(format!(
            "input pixels must lie in [{}, {}]",
            cfg.clip_min, cfg.clip_max
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let xn = tape.normalize(xv, &norm.mean, &norm.std)?;
    let (logits, _) = model.forward_on(&mut tape, xn, false)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    tape.backward(loss)?;
    let grad = tape
        .take_grad(xv)
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let mut adv = x.clone();
    for (a, &g) in adv.data_mut().iter_mut().zip(grad.data()) {
        *a = (*a + cfg.epsilon * sign(g)).clamp(cfg.clip_min, cfg.clip_max);
    }
    Ok(adv)
}

/// Accuracy of `model` on FGSM examples generated from `data` at every ε in
/// `epsilons` (which must be nonnegative and ascending). At ε = 0 this
/// reproduces the clean accuracy exactly.
pub fn attack_sweep(
    model: &FusedModel,
    model_id: &str,
    norm: &Normalizer,
    data: &DatasetView<'_>,
    epsilons: &[f64],
    batch_size: usize,
) -> Result<AttackReport> {
    if epsilons.is_empty() {
        return Err(Error::Config("epsilon list must be nonempty".into()));
    }
    if epsilons.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("epsilon list must be ascending".into()));
    }
    if data.is_empty() {
        return Err(Error::Config(
            "attack sweep needs a nonempty dataset".into(),
        ));
    }
    let mut report = AttackReport::default();
    for &epsilon in epsilons {
        let cfg = AttackConfig::new(epsilon);
        cfg.validate()?;
        let mut correct = 0usize;
        let positions: Vec<usize> = (0..data.len()).collect();
        for chunk in positions.chunks(batch_size.max(1)) {
            let (x, labels) = data.gather(chunk);
            let adv = fgsm(model, norm, &x, &labels, &cfg)?;
            let logits = model.logits(&norm.apply(&adv)?)?;
            for (pred, label) in predictions(&logits)?.into_iter().zip(&labels) {
                if pred == *label {
                    correct += 1;
                }
            }
        }
        report.records.push(AttackRecord {
            model_id: model_id.to_string(),
            epsilon,
            accuracy: correct as f64 / data.len() as f64,
            samples: data.len(),
        });
    }
    Ok(report)
}

/// The ε schedule of the reference evaluation protocol, in `/255` units.
pub fn default_epsilons() -> Vec<f64> {
    [0.1, 0.5, 1.0, 2.0, 3.0, 5.0, 8.0]
        .iter()
        .map(|v| v / 255.0)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, BackboneConfig, ModelConfig};

    /// 3-pixel "image", no conv blocks: a plain linear model.
    fn linear_model() -> FusedModel {
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                blocks: vec![],
                fc_widths: vec![],
                input_shape: (3, 1, 1),
                classes: 2,
            },
            sbfm: None,
        };
        build_model(&cfg, 9).unwrap()
    }

    fn set_weights(model: &mut FusedModel, w: [f64; 3]) {
        let mut params = model.params_mut();
        // fc0.weight is [3, 2]; bias zero. logits = (0, w.x)
        let wdata = params[0].data_mut();
        for (i, &wi) in w.iter().enumerate() {
            wdata[i * 2] = 0.0;
            wdata[i * 2 + 1] = wi;
        }
        for v in params[1].data_mut().iter_mut() {
            *v = 0.0;
        }
    }

    #[test]
    fn epsilon_zero_is_identity() {
        let mut model = linear_model();
        set_weights(&mut model, [0.4, -1.2, 2.0]);
        let x = Tensor::new(vec![1, 3, 1, 1], vec![0.2, 0.8, 0.5]).unwrap();
        let adv = fgsm(
            &model,
            &Normalizer::identity(3),
            &x,
            &[1],
            &AttackConfig::new(0.0),
        )
        .unwrap();
        assert!(adv.bits_eq(&x));
    }

    #[test]
    fn zero_gradient_means_no_perturbation() {
        let mut model = linear_model();
        set_weights(&mut model, [0.0, 0.0, 0.0]);
        let x = Tensor::new(vec![1, 3, 1, 1], vec![0.3, 0.6, 0.9]).unwrap();
        let adv = fgsm(
            &model,
            &Normalizer::identity(3),
            &x,
            &[0],
            &AttackConfig::new(8.0 / 255.0),
        )
        .unwrap();
        assert!(adv.bits_eq(&x), "sign(0) = 0 must leave pixels untouched");
    }

    #[test]
    fn logistic_toy_matches_closed_form() {
        // logits (0, w.x) with softmax CE on label y is the logistic loss:
        // dL/dx = w * (p - y) with p = sigmoid(w.x). FGSM must step by
        // eps * sign(w * (p - y)), clipped to [0,1].
        let w = [0.7, -1.1, 0.3];
        let mut model = linear_model();
        set_weights(&mut model, w);
        let xs = [0.3, 0.6, 0.9];
        let eps = 8.0 / 255.0;
        for &label in &[0usize, 1usize] {
            let x = Tensor::new(vec![1, 3, 1, 1], xs.to_vec()).unwrap();
            let adv = fgsm(
                &model,
                &Normalizer::identity(3),
                &x,
                &[label],
                &AttackConfig::new(eps),
            )
            .unwrap();
            let z: f64 = w.iter().zip(&xs).map(|(wi, xi)| wi * xi).sum();
            let p = 1.0 / (1.0 + (-z).exp());
            for i in 0..3 {
                let g = w[i] * (p - label as f64);
                let want = (xs[i] + eps * g.signum()).clamp(0.0, 1.0);
                assert!(
                    (adv.data()[i] - want).abs() < 1e-12,
                    "pixel {i} label {label}: got {}, want {want}",
                    adv.data()[i]
                );
            }
        }
    }

    #[test]
    fn perturbation_bound_and_range_hold() {
        let mut model = linear_model();
        set_weights(&mut model, [2.0, -3.0, 1.0]);
        let eps = 8.0 / 255.0;
        let x = Tensor::new(vec![2, 3, 1, 1], vec![0.0, 0.5, 1.0, 0.01, 0.99, 0.5]).unwrap();
        let adv = fgsm(
            &model,
            &Normalizer::identity(3),
            &x,
            &[1, 0],
            &AttackConfig::new(eps),
        )
        .unwrap();
        for (a, b) in adv.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= eps + 1e-12);
            assert!((0.0..=1.0).contains(a));
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(AttackConfig::new(-0.1).validate().is_err());
        assert!(AttackConfig::new(1.5).validate().is_err());
        let bad = AttackConfig {
            epsilon: 0.1,
            clip_min: 1.0,
            clip_max: 0.0,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn default_epsilon_schedule_has_seven_points() {
        let eps = default_epsilons();
        assert_eq!(eps.len(), 7);
        assert!((eps[6] - 8.0 / 255.0).abs() < 1e-15);
        assert!(eps.windows(2).all(|w| w[0] < w[1]));
    }
}
