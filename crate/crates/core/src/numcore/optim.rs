use std::collections::BTreeMap;

use crate::error::{CoreError, Result};
use crate::numcore::tensor::Tensor;

/// Decoupled weight decay optimizer: the decay term multiplies the parameter
/// directly and never passes through the moment estimates.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    step: u64,
    first_moment: BTreeMap<String, Tensor>,
    second_moment: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        AdamW {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).ok_or_else(|| {
                CoreError::contract(format!("missing gradient for parameter {name}"))
            })?;
            if !g.all_finite() {
                return Err(CoreError::Numerical {
                    context: name.clone(),
                    message: "non-finite gradient".into(),
                });
            }
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            for i in 0..p.len() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                let pi = p.data()[i];
                p.data_mut()[i] = pi
                    - self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon)
                    - self.learning_rate * self.weight_decay * pi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, v: f64) -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert(name.to_string(), Tensor::scalar(v));
        m
    }

    #[test]
    fn zero_grad_zero_decay_leaves_param_unchanged() {
        let mut opt = AdamW::new(1e-3, 0.0);
        let mut params = single("w", 1.0);
        let grads = single("w", 0.0);
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(params["w"].scalar_value(), 1.0);
    }

    #[test]
    fn zero_grad_decay_only_arithmetic() {
        // lr=0.001, wd=5e-4, param=1.0 -> 1 - 5e-7 after one step
        let mut opt = AdamW::new(1e-3, 5e-4);
        let mut params = single("w", 1.0);
        let grads = single("w", 0.0);
        opt.step(&mut params, &grads).unwrap();
        assert!((params["w"].scalar_value() - (1.0 - 5e-7)).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_decay_factor_is_exact() {
        let mut opt = AdamW::new(0.01, 0.1);
        let mut params = single("w", 2.5);
        let grads = single("w", 0.0);
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(params["w"].scalar_value(), 2.5 * (1.0 - 0.01 * 0.1));
    }

    #[test]
    fn optimizes_scalar_quadratic_toward_minimum() {
        // f(w) = (w-3)^2 from w=0: first step moves toward the minimum and
        // after enough steps w settles near 3 (Adam may overshoot en route)
        let mut opt = AdamW::new(0.1, 0.0);
        let mut params = single("w", 0.0);
        let grads = single("w", 2.0 * (0.0 - 3.0));
        opt.step(&mut params, &grads).unwrap();
        assert!(params["w"].scalar_value() > 0.0);
        for _ in 0..300 {
            let w = params["w"].scalar_value();
            let grads = single("w", 2.0 * (w - 3.0));
            opt.step(&mut params, &grads).unwrap();
        }
        assert!((params["w"].scalar_value() - 3.0).abs() < 0.1);
    }

    #[test]
    fn nan_gradient_fails_with_parameter_name() {
        let mut opt = AdamW::new(1e-3, 0.0);
        let mut params = single("enc.w_q", 1.0);
        let grads = single("enc.w_q", f64::NAN);
        let err = opt.step(&mut params, &grads).unwrap_err();
        assert!(err.to_string().contains("enc.w_q"));
    }

    #[test]
    fn step_counter_increments() {
        let mut opt = AdamW::new(1e-3, 0.0);
        let mut params = single("w", 1.0);
        let grads = single("w", 0.5);
        for i in 1..=5 {
            opt.step(&mut params, &grads).unwrap();
            assert_eq!(opt.step_count(), i);
        }
    }
}
