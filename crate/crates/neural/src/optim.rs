use serde::{Deserialize, Serialize};

use crate::error::{NeuralError, Result};
use crate::layer::ParamSlot;
use crate::real::Real;
use crate::tensor::Tensor;

/// Adam hyperparameters. Moment decays and epsilon are the usual defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// L2 coefficient, added to the gradient as `weight_decay * param`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 5e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState<F> {
    pub config: AdamConfig,
    first_moment: Vec<Tensor<F>>,
    second_moment: Vec<Tensor<F>>,
    step: u64,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, first_moment: Vec::new(), second_moment: Vec::new(), step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update over all slots. Slots without a
    /// gradient are updated with a zero gradient (weight decay still applies).
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, slots: &mut [ParamSlot<'_, F>]) -> Result<()> {
        if self.first_moment.is_empty() {
            self.first_moment = slots.iter().map(|s| Tensor::zeros(s.value.shape())).collect();
            self.second_moment = self.first_moment.clone();
        }
        if self.first_moment.len() != slots.len() {
            return Err(NeuralError::Shape(format!(
                "optimizer tracks {} parameters, got {}",
                self.first_moment.len(),
                slots.len()
            )));
        }
        for (slot, m) in slots.iter().zip(&self.first_moment) {
            if m.shape() != slot.value.shape() {
                return Err(NeuralError::Shape(format!("accumulator shape mismatch for `{}`", slot.name)));
            }
            if let Some(g) = slot.grad {
                if g.shape() != slot.value.shape() {
                    return Err(NeuralError::Shape(format!("gradient shape mismatch for `{}`", slot.name)));
                }
                if !g.all_finite() {
                    return Err(NeuralError::NonFiniteGradient(slot.name.clone()));
                }
            }
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = F::from_f64_lossy(c.beta1);
        let b2 = F::from_f64_lossy(c.beta2);
        let one = F::one();
        let lr = F::from_f64_lossy(c.learning_rate);
        let eps = F::from_f64_lossy(c.epsilon);
        let decay = F::from_f64_lossy(c.weight_decay);
        let corr1 = F::from_f64_lossy(1.0 - c.beta1.powi(t));
        let corr2 = F::from_f64_lossy(1.0 - c.beta2.powi(t));

        for ((slot, m), v) in slots
            .iter_mut()
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            let grad = slot.grad.map(Tensor::data);
            let params = slot.value.data_mut();
            for i in 0..params.len() {
                let g = grad.map_or(F::zero(), |g| g[i]) + decay * params[i];
                let mi = &mut m.data_mut()[i];
                *mi = b1 * *mi + (one - b1) * g;
                let vi = &mut v.data_mut()[i];
                *vi = b2 * *vi + (one - b2) * g * g;
                let m_hat = m.data()[i] / corr1;
                let v_hat = v.data()[i] / corr2;
                params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
