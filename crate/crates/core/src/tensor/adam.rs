use super::{ParamStore, TensorError};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// L2 penalty folded into the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(mut self, lr: f64) -> Self {
        self.learning_rate = lr;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.learning_rate > 0.0) {
            return Err(format!("learning rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(format!(
                "decay rates must lie in [0, 1), got beta1={} beta2={}",
                self.beta1, self.beta2
            ));
        }
        if !(self.epsilon > 0.0) {
            return Err(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(format!("weight decay must be >= 0, got {}", self.weight_decay));
        }
        Ok(())
    }
}

impl ParamStore {
    /// One bias-corrected Adam update over every non-frozen parameter.
    ///
    /// Frozen parameters keep their values and moments. Gradients of every
    /// parameter are cleared afterwards. If any trainable gradient is not
    /// finite the step is aborted before anything is modified.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<(), TensorError> {
        if let Some(p) = self
            .params
            .iter()
            .find(|p| !p.frozen && p.grad.iter().any(|g| !g.is_finite()))
        {
            return Err(TensorError::NonFiniteGradient {
                param: p.name.clone(),
            });
        }

        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - cfg.beta1.powi(t);
        let bias2 = 1.0 - cfg.beta2.powi(t);

        for p in &mut self.params {
            if !p.frozen {
                let (b1, b2) = (cfg.beta1, cfg.beta2);
                let lr = cfg.learning_rate;
                for (((w, &g), m), v) in p
                    .value
                    .data_mut()
                    .iter_mut()
                    .zip(&p.grad)
                    .zip(&mut p.first_moment)
                    .zip(&mut p.second_moment)
                {
                    let g = g + cfg.weight_decay * *w;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= lr * (*m / bias1) / ((*v / bias2).sqrt() + cfg.epsilon);
                }
            }
            p.grad.fill(0.0);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(vec![values.len()], values.to_vec()).unwrap());
        s
    }

    #[test]
    fn first_step_with_unit_gradient_moves_by_learning_rate() {
        let cfg = AdamConfig::default();
        let mut s = store_with(&[0.5, -2.0]);
        let id = s.find("w").unwrap();
        s.grad_mut(id).copy_from_slice(&[1.0, 1.0]);
        s.adam_step(&cfg).unwrap();
        // m_hat = v_hat = 1 at t = 1, so the step is alpha / (1 + eps).
        let expected = cfg.learning_rate / (1.0 + cfg.epsilon);
        let w = s.value(id).data();
        assert!((w[0] - (0.5 - expected)).abs() < 1e-15);
        assert!((w[1] - (-2.0 - expected)).abs() < 1e-15);
        assert_eq!(s.step(), 1);
        assert!(s.grad(id).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn two_steps_match_hand_unrolled_recurrence() {
        let cfg = AdamConfig::default();
        let g = 0.3;
        let mut s = store_with(&[1.0]);
        let id = s.find("w").unwrap();
        for _ in 0..2 {
            s.grad_mut(id)[0] = g;
            s.adam_step(&cfg).unwrap();
        }

        let (b1, b2, a, e) = (cfg.beta1, cfg.beta2, cfg.learning_rate, cfg.epsilon);
        let m1 = (1.0 - b1) * g;
        let v1 = (1.0 - b2) * g * g;
        let w1 = 1.0 - a * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + e);
        let m2 = b1 * m1 + (1.0 - b1) * g;
        let v2 = b2 * v1 + (1.0 - b2) * g * g;
        let w2 = w1 - a * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + e);
        assert!((s.value(id).data()[0] - w2).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut s = store_with(&[0.25, 3.0, -7.5]);
        let before = s.clone();
        s.adam_step(&AdamConfig::default()).unwrap();
        let id = s.find("w").unwrap();
        assert_eq!(s.value(id), before.value(id));
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn nan_gradient_aborts_and_names_param() {
        let mut s = store_with(&[1.0]);
        let id = s.find("w").unwrap();
        s.grad_mut(id)[0] = f64::NAN;
        let err = s.adam_step(&AdamConfig::default()).unwrap_err();
        assert_eq!(
            err,
            TensorError::NonFiniteGradient {
                param: "w".to_string()
            }
        );
        assert_eq!(s.step(), 0);
        assert_eq!(s.value(id).data()[0], 1.0);
    }

    #[test]
    fn frozen_params_are_untouched() {
        let mut s = store_with(&[1.0]);
        let id = s.find("w").unwrap();
        s.set_frozen(id, true);
        for _ in 0..100 {
            s.grad_mut(id)[0] = 5.0;
            s.adam_step(&AdamConfig::default()).unwrap();
        }
        assert_eq!(s.value(id).data()[0], 1.0);
        assert_eq!(s.get(id).first_moment[0], 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(AdamConfig::default().validate().is_ok());
        let mut bad = AdamConfig::default();
        bad.beta1 = 1.0;
        assert!(bad.validate().is_err());
        bad = AdamConfig::default().with_learning_rate(0.0);
        assert!(bad.validate().is_err());
    }
}
