use std::collections::HashMap;

use super::Parameter;
use crate::error::{Error, Result};

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    moments: HashMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// First and second moment for a parameter, if it has been updated.
    pub fn moments(&self, name: &str) -> Option<(&[f32], &[f32])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// Applies one update to every parameter and zeroes the gradients.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: Vec<&mut Parameter>) -> Result<()> {
        if let Some(p) = params.iter().find(|p| !p.grad().all_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", p.name())));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - (self.beta1 as f64).powi(t);
        let bc2 = 1.0 - (self.beta2 as f64).powi(t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        for p in params {
            let n = p.value().len();
            let (m, v) = self
                .moments
                .entry(p.name().to_string())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let grad = p.grad().data().to_vec();
            for (k, th) in p.value_mut().data_mut().iter_mut().enumerate() {
                let g = grad[k];
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                let mhat = (m[k] as f64 / bc1) as f32;
                let vhat = (v[k] as f64 / bc2) as f32;
                *th -= lr * mhat / (vhat.sqrt() + eps);
            }
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn param(v: f32, g: f32) -> Parameter {
        let mut p = Parameter::new("theta", Tensor::scalar(v));
        p.grad_mut().data_mut()[0] = g;
        p
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = param(1.25, 0.0);
        let mut adam = Adam::new(0.001);
        for _ in 0..3 {
            adam.step(vec![&mut p]).unwrap();
        }
        assert_eq!(p.value().item(), 1.25);
        assert_eq!(adam.steps(), 3);
    }

    #[test]
    fn single_step_matches_formula() {
        // m = 0.05, v = 0.00025; m̂ = 0.5, v̂ = 0.25 → Δ = lr·0.5/(0.5+1e-8)
        let mut p = param(1.0, 0.5);
        let mut adam = Adam::new(0.001);
        adam.step(vec![&mut p]).unwrap();
        let expected = 1.0 - 0.001 * 0.5 / (0.5 + 1e-8);
        assert!((p.value().item() - expected as f32).abs() < 1e-7);
        assert!((p.value().item() - 0.999).abs() < 1e-6);
        assert_eq!(p.grad().item(), 0.0);
    }

    #[test]
    fn constant_gradient_steps_are_bounded_by_lr() {
        let mut p = param(1.0, 0.5);
        let mut adam = Adam::new(0.001);
        let mut prev = p.value().item();
        for _ in 0..2 {
            p.grad_mut().data_mut()[0] = 0.5;
            adam.step(vec![&mut p]).unwrap();
            let now = p.value().item();
            assert!((prev - now).abs() <= 0.001 * (1.0 + 1e-3));
            prev = now;
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = param(1.0, f32::NAN);
        let err = Adam::new(0.001).step(vec![&mut p]).unwrap_err();
        assert!(err.to_string().contains("theta"));
        assert_eq!(p.value().item(), 1.0);
    }
}
