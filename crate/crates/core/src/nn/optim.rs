//! First-order optimizers over flat parameter vectors.

use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::SgdMomentum { momentum: 0.9 }
    }
}

impl OptimizerConfig {
    pub fn adam() -> Self {
        OptimizerConfig::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Learning-rate schedule over optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Cosine decay from the base rate to `base * final_fraction`.
    Cosine { final_fraction: f64 },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, step: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine { final_fraction } => {
                let progress = if total <= 1 {
                    0.0
                } else {
                    (step as f64 / (total - 1) as f64).min(1.0)
                };
                let floor = base * final_fraction;
                floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

/// Optimizer with its per-parameter state.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<S> {
    pub config: OptimizerConfig,
    /// Number of updates applied so far.
    pub steps: u64,
    /// Momentum buffer (SGD) or first moment (Adam).
    pub first: Vec<S>,
    /// Second moment (Adam only; empty for SGD).
    pub second: Vec<S>,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(config: OptimizerConfig, num_params: usize) -> Self {
        let second = match config {
            OptimizerConfig::Adam { .. } => vec![S::zero(); num_params],
            OptimizerConfig::SgdMomentum { .. } => Vec::new(),
        };
        Self {
            config,
            steps: 0,
            first: vec![S::zero(); num_params],
            second,
        }
    }

    pub fn step(&mut self, params: &mut [S], grads: &[S], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::arg("optimizer state, parameters and gradients differ in length"));
        }
        self.steps += 1;
        match self.config {
            OptimizerConfig::SgdMomentum { momentum } => {
                let (mu, lr) = (S::lit(momentum), S::lit(lr));
                for ((p, g), m) in params.iter_mut().zip(grads).zip(self.first.iter_mut()) {
                    *m = mu * *m + *g;
                    *p = *p - lr * *m;
                }
            }
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let step = S::lit(lr * c2.sqrt() / c1);
                let (b1, b2, e) = (S::lit(beta1), S::lit(beta2), S::lit(eps * c2.sqrt()));
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.first.iter_mut())
                    .zip(self.second.iter_mut())
                {
                    *m = b1 * *m + (S::one() - b1) * *g;
                    *v = b2 * *v + (S::one() - b2) * *g * *g;
                    *p = *p - step * *m / (v.sqrt() + e);
                }
            }
        }
        Ok(())
    }
}
