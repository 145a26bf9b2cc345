use alloc::format;
use alloc::vec::Vec;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !unit(self.beta1) || !unit(self.beta2) || !(self.epsilon > 0.0 && self.epsilon < 1e-2) {
            return Err(Error::Config(format!("invalid AdamW constants {:?}", self)));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-parameter moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step_count: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    state: OptimizerState,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[Tensor]) -> Result<Self> {
        config.validate()?;
        let zeros = || params.iter().map(|p| alloc::vec![0.0; p.numel()]).collect();
        Ok(Self {
            config,
            state: OptimizerState {
                step_count: 0,
                first_moment: zeros(),
                second_moment: zeros(),
            },
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if lr.is_nan() || lr <= 0.0 {
            return Err(Error::Contract(format!("learning rate must be positive, got {lr}")));
        }
        if params.len() != grads.len() || params.len() != self.state.first_moment.len() {
            return Err(Error::Contract(format!(
                "{} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                self.state.first_moment.len()
            )));
        }
        for (idx, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != g.len() || self.state.first_moment[idx].len() != g.len() {
                return Err(Error::Shape {
                    op: "adamw",
                    detail: format!("parameter {idx}: {} values vs gradient of {}", p.numel(), g.len()),
                });
            }
        }

        let AdamWConfig {
            beta1,
            beta2,
            epsilon,
            weight_decay,
        } = self.config;
        self.state.step_count += 1;
        let t = self.state.step_count as i32;
        let bias1 = 1.0 - libm::pow(beta1, t as f64);
        let bias2 = 1.0 - libm::pow(beta2, t as f64);
        let decay = 1.0 - lr * weight_decay;

        for (idx, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.state.first_moment[idx];
            let v = &mut self.state.second_moment[idx];
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                let updated = *w as f64 * decay - lr * m_hat / (libm::sqrt(v_hat) + epsilon);
                *w = updated as f32;
            }
        }
        Ok(())
    }
}
