//! Adam with bias correction, linear warm-up, and parameter averaging.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("learning rate must be positive, got {0}")]
    LearningRate(f64),
    #[error("ema decay must lie in (0, 1), got {0}")]
    Decay(f64),
    #[error("optimizer holds {expected} moment slots, got {got} parameters")]
    Arity { expected: usize, got: usize },
    #[error("parameter {index} has shape {param:?} but gradient has {grad:?}")]
    Shape {
        index: usize,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear learning-rate ramp length in optimizer steps; 0 disables it.
    pub warmup_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 0,
        }
    }
}

impl AdamConfig {
    /// Learning rate applied on optimizer step `step` (1-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * step as f64 / self.warmup_steps as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[&[usize]]) -> Result<Self, OptimError> {
        if !(config.lr > 0.0) {
            return Err(OptimError::LearningRate(config.lr));
        }
        Ok(Self {
            config,
            step: 0,
            first: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            second: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        })
    }

    /// Restores a saved state; moment shapes must agree pairwise.
    pub fn from_parts(config: AdamConfig, step: u64, first: Vec<Tensor>, second: Vec<Tensor>) -> Result<Self, OptimError> {
        let mut state = Self::new(config, &[])?;
        if first.len() != second.len() {
            return Err(OptimError::Arity {
                expected: first.len(),
                got: second.len(),
            });
        }
        for (index, (m, v)) in first.iter().zip(&second).enumerate() {
            if m.shape() != v.shape() {
                return Err(OptimError::Shape {
                    index,
                    param: m.shape().to_vec(),
                    grad: v.shape().to_vec(),
                });
            }
        }
        state.step = step;
        state.first = first;
        state.second = second;
        Ok(state)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, index: usize) -> (&Tensor, &Tensor) {
        (&self.first[index], &self.second[index])
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<(), OptimError> {
        self.step_masked(params, grads, &vec![None; params.len()])
    }

    /// One Adam update. Where `trainable[i]` is given, entries whose
    /// multiplier is 0 are skipped entirely: neither the parameter nor its
    /// moments change.
    pub fn step_masked(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[&Tensor],
        trainable: &[Option<&Tensor>],
    ) -> Result<(), OptimError> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(OptimError::Arity {
                expected: self.first.len(),
                got: params.len().min(grads.len()),
            });
        }
        for (index, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[index].shape() {
                return Err(OptimError::Shape {
                    index,
                    param: p.shape().to_vec(),
                    grad: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let lr = self.config.lr_at(self.step);
        let t = self.step as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        for (index, param) in params.iter_mut().enumerate() {
            let grad = grads[index].data();
            let keep = trainable.get(index).copied().flatten().map(Tensor::data);
            let m = self.first[index].data_mut();
            let v = self.second[index].data_mut();
            for (k, w) in param.data_mut().iter_mut().enumerate() {
                if keep.is_some_and(|mask| mask[k] == 0.0) {
                    continue;
                }
                let g = grad[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let m_hat = m[k] / bias1;
                let v_hat = v[k] / bias2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `shadow ← decay·shadow + (1−decay)·param`.
pub fn ema_update(shadow: &mut Tensor, param: &Tensor, decay: f64) -> Result<(), OptimError> {
    ema_update_masked(shadow, param, decay, None)
}

/// As [`ema_update`], leaving entries with a zero `trainable` multiplier
/// untouched.
pub fn ema_update_masked(
    shadow: &mut Tensor,
    param: &Tensor,
    decay: f64,
    trainable: Option<&Tensor>,
) -> Result<(), OptimError> {
    if !(decay > 0.0 && decay < 1.0) {
        return Err(OptimError::Decay(decay));
    }
    if shadow.shape() != param.shape() {
        return Err(OptimError::Shape {
            index: 0,
            param: param.shape().to_vec(),
            grad: shadow.shape().to_vec(),
        });
    }
    let keep = trainable.map(Tensor::data);
    for (k, (s, &p)) in shadow.data_mut().iter_mut().zip(param.data()).enumerate() {
        if keep.is_some_and(|mask| mask[k] == 0.0) {
            continue;
        }
        *s = decay * *s + (1.0 - decay) * p;
    }
    Ok(())
}
