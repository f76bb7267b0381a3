//! First-order optimizer used by every training loop.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{cos, powf, sqrt};
use crate::scalarization::TauSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    Constant,
    /// Cosine from `step_size` down to `final_lr_fraction · step_size`.
    #[default]
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default)]
    pub algorithm: Algorithm,
    pub step_size: f64,
    pub steps: usize,
    /// Data points per step.
    pub batch_size: usize,
    /// Fresh `(t, ε)` draws per data point per step.
    #[serde(default = "one")]
    pub draws_per_point: usize,
    #[serde(default)]
    pub lr_decay: LrDecay,
    #[serde(default = "default_final_fraction")]
    pub final_lr_fraction: f64,
    /// Global gradient-norm clip; 0 disables.
    #[serde(default)]
    pub grad_clip: f64,
    /// Held-out evaluation period for best-iterate selection.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Fixed `(t, ε)` draws per held-out point.
    #[serde(default = "default_holdout_draws")]
    pub holdout_draws: usize,
    /// Tolerance, in paired standard errors, for replacing the incumbent
    /// best iterate with a later one.
    #[serde(default = "default_selection_z")]
    pub selection_z: f64,
    #[serde(default)]
    pub tau: TauSchedule,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

fn default_final_fraction() -> f64 {
    0.05
}

fn default_eval_every() -> usize {
    100
}

fn default_holdout_draws() -> usize {
    16
}

fn default_selection_z() -> f64 {
    2.0
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Adam,
            step_size: 1e-2,
            steps: 2000,
            batch_size: 64,
            draws_per_point: 1,
            lr_decay: LrDecay::Cosine,
            final_lr_fraction: default_final_fraction(),
            grad_clip: 0.0,
            eval_every: default_eval_every(),
            holdout_draws: default_holdout_draws(),
            selection_z: default_selection_z(),
            tau: TauSchedule::default(),
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidOptimizer(m.into()));
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad("step_size must be positive");
        }
        if self.batch_size == 0 || self.draws_per_point == 0 {
            return bad("batch_size and draws_per_point must be positive");
        }
        if self.eval_every == 0 || self.holdout_draws == 0 {
            return bad("eval_every and holdout_draws must be positive");
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return bad("final_lr_fraction must lie in [0, 1]");
        }
        if !(self.selection_z >= 0.0 && self.selection_z.is_finite()) {
            return bad("selection_z must be finite and >= 0");
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be >= 0");
        }
        self.tau.validate()
    }

    /// Learning rate at `step` of `steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.lr_decay {
            LrDecay::Constant => self.step_size,
            LrDecay::Cosine => {
                let p = if self.steps <= 1 { 0.0 } else { step as f64 / (self.steps - 1) as f64 };
                let lo = self.final_lr_fraction;
                self.step_size * (lo + (1.0 - lo) * 0.5 * (1.0 + cos(core::f64::consts::PI * p)))
            }
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - powf(self.beta1, self.t as f64);
        let c2 = 1.0 - powf(self.beta2, self.t as f64);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / (sqrt(*v / c2) + self.eps);
        }
    }
}

/// Rescales `grad` in place so its Euclidean norm is at most `max_norm`.
pub fn clip_norm(grad: &mut [f64], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let n = sqrt(grad.iter().map(|g| g * g).sum());
    if n > max_norm {
        let c = max_norm / n;
        grad.iter_mut().for_each(|g| *g *= c);
    }
}
