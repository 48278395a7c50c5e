//! SGD with momentum, L2 weight decay and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use super::Model;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_threshold: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.0002,
            clip_threshold: 10000.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if !(self.clip_threshold > 0.0) {
            return Err(Error::Config(format!(
                "clip_threshold must be positive, got {}",
                self.clip_threshold
            )));
        }
        Ok(())
    }

    pub fn with_learning_rate(self, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..self
        }
    }
}

/// One update of every trainable parameter:
///
/// ```text
/// g = grad + weight_decay * value     (then clipped by global norm over all g)
/// m = momentum * m + g
/// value = value - lr * m
/// ```
///
/// Frozen parameters are not touched. A non-finite gradient aborts the step
/// before anything is modified.
pub fn sgd_step(model: &mut Model, config: &OptimizerConfig) -> Result<()> {
    let mut params = model.params_mut();
    params.retain(|p| p.trainable);

    if let Some(bad) = params.iter().find(|p| !p.gradient.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite gradient in parameter of shape {:?}",
            bad.value.shape()
        )));
    }

    let decayed: Vec<Vec<f64>> = params
        .iter()
        .map(|p| {
            p.gradient
                .data()
                .iter()
                .zip(p.value.data())
                .map(|(g, v)| g + config.weight_decay * v)
                .collect()
        })
        .collect();
    let norm = decayed
        .iter()
        .flatten()
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if !norm.is_finite() {
        return Err(Error::Numerical("gradient norm overflowed".into()));
    }
    let scale = if norm > config.clip_threshold {
        config.clip_threshold / norm
    } else {
        1.0
    };

    for (p, g) in params.iter_mut().zip(&decayed) {
        let m = p.momentum.data_mut();
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = config.momentum * *mi + scale * gi;
        }
        let m = p.momentum.data().to_vec();
        for (v, mi) in p.value.data_mut().iter_mut().zip(&m) {
            *v -= config.learning_rate * mi;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Dense;
    use crate::Tensor;

    fn scalar_model(value: f64, grad: f64) -> Model {
        let mut head = Dense::zeros(1, 1);
        head.weight.value.data_mut()[0] = value;
        head.weight.gradient.data_mut()[0] = grad;
        head.bias.trainable = false;
        Model::from_parts(vec![], head, vec![1])
    }

    #[test]
    fn plain_step_matches_hand_update() {
        let mut model = scalar_model(1.0, 0.5);
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            clip_threshold: 10000.0,
        };
        sgd_step(&mut model, &cfg).unwrap();
        assert!((model.classifier().weight.value.data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_leaves_values() {
        let mut model = scalar_model(1.0, 123.0);
        let cfg = OptimizerConfig::default().with_learning_rate(0.0);
        let before = model.state();
        sgd_step(&mut model, &cfg).unwrap();
        assert_eq!(model.state(), before);
    }

    #[test]
    fn momentum_accumulates() {
        let mut model = scalar_model(0.0, 1.0);
        let cfg = OptimizerConfig {
            learning_rate: 1.0,
            momentum: 0.5,
            weight_decay: 0.0,
            clip_threshold: 10000.0,
        };
        sgd_step(&mut model, &cfg).unwrap(); // m = 1, v = -1
        sgd_step(&mut model, &cfg).unwrap(); // m = 1.5, v = -2.5
        assert_eq!(model.classifier().weight.value.data()[0], -2.5);
    }

    #[test]
    fn weight_decay_and_clipping() {
        let mut model = scalar_model(2.0, 3.0);
        let cfg = OptimizerConfig {
            learning_rate: 1.0,
            momentum: 0.0,
            weight_decay: 0.5,
            clip_threshold: 1.0,
        };
        // g = 3 + 0.5 * 2 = 4, clipped to norm 1 -> v = 2 - 1
        sgd_step(&mut model, &cfg).unwrap();
        assert_eq!(model.classifier().weight.value.data()[0], 1.0);
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut model = scalar_model(1.0, f64::NAN);
        let before = model.state();
        let err = sgd_step(&mut model, &OptimizerConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
        assert_eq!(model.state(), before);
    }

    #[test]
    fn frozen_layer_is_bit_identical_after_many_steps() {
        let mut frozen = Dense::zeros(2, 2);
        frozen
            .weight
            .value
            .data_mut()
            .copy_from_slice(&[0.1, -0.2, 0.3, 0.4]);
        let mut model = Model::from_parts(vec![frozen], Dense::zeros(2, 1), vec![1]);
        model.set_trainable(false, true);
        let before = model.extractor()[0].clone();
        let x = Tensor::from_rows(&[[1.0, 1.0]]).unwrap();
        for _ in 0..100 {
            model.forward(&x, 1).unwrap();
            model.backward(&Tensor::new(vec![1, 1], vec![1.0]).unwrap()).unwrap();
            for p in model.params_mut() {
                p.gradient.fill(0.7);
            }
            sgd_step(&mut model, &OptimizerConfig::default()).unwrap();
        }
        assert_eq!(model.extractor()[0].weight.value, before.weight.value);
        assert_eq!(model.extractor()[0].bias.value, before.bias.value);
    }

    #[test]
    fn validate_rejects_bad_momentum() {
        let cfg = OptimizerConfig {
            momentum: 1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
