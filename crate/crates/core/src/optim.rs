//! SGD with momentum and a step-decay learning-rate schedule.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Multiplicative decay applied at each milestone.
    pub decay: f64,
    /// Milestones as fractions of `epochs`.
    pub milestones: Vec<f64>,
    pub weight_decay: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            decay: 0.1,
            milestones: vec![0.6, 0.8],
            weight_decay: 0.0,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be at least 1"));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::invalid("need lr > 0, momentum in [0, 1) and weight_decay ≥ 0"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| epoch >= (m * self.epochs as f64).round() as usize)
            .count();
        self.lr * self.decay.powi(passed as i32)
    }
}

/// Heavy-ball SGD: `v ← μ v + g + wd·θ`, `θ ← θ − lr v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Applies one update. `params` and `grads` must keep the same order
    /// across calls.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Vec<f64>], lr: f64) {
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((theta, &gi), vi) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                let mut grad = gi;
                if self.weight_decay != 0.0 {
                    grad += self.weight_decay * *theta;
                }
                *vi = self.momentum * *vi + grad;
                *theta -= lr * *vi;
            }
        }
    }
}
