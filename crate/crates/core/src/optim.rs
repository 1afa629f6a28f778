//! Momentum SGD and learning-rate schedules.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::nn::Mlp;
use crate::tensor::Tensor;

/// Post-warmup learning-rate shape.
#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    Constant,
    /// Half-period cosine from the base rate down to zero.
    Cosine,
    /// Multiply by `factor` at each milestone epoch.
    Step {
        milestones: Vec<usize>,
        factor: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub schedule: Schedule,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            warmup_epochs: 0,
            epochs: 100,
            schedule: Schedule::Cosine,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("lr", format!("{} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid(
                "momentum",
                format!("{} outside [0, 1)", self.momentum),
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(invalid("weight_decay", "must be non-negative"));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs", "must be at least 1"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(invalid("warmup_epochs", "must be smaller than epochs"));
        }
        if let Schedule::Step { factor, .. } = &self.schedule {
            if !(*factor > 0.0) {
                return Err(invalid("factor", "step factor must be positive"));
            }
        }
        Ok(())
    }

    /// Learning rate for 0-based `epoch`: a linear ramp from 0 during warmup,
    /// then the configured schedule over the remaining epochs.
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.epochs {
            return Err(Error::IndexOutOfRange {
                index: epoch,
                len: self.epochs,
            });
        }
        let base = self.lr;
        let w = self.warmup_epochs;
        if epoch < w {
            return Ok(base * epoch as f64 / w as f64);
        }
        Ok(match &self.schedule {
            Schedule::Constant => base,
            Schedule::Cosine => {
                let progress = (epoch - w) as f64 / (self.epochs - w) as f64;
                base * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress))
            }
            Schedule::Step { milestones, factor } => {
                let passed = milestones.iter().filter(|&&m| m <= epoch).count();
                base * libm::pow(*factor, passed as f64)
            }
        })
    }
}

/// Momentum buffers for one parameter list. Buffers are created on the first
/// step and must keep the same shapes afterwards.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn from_config(cfg: &SgdConfig) -> Self {
        Self::new(cfg.momentum, cfg.weight_decay)
    }

    /// `v ← μ·v + g + wd·θ; θ ← θ − lr·v` for each `(θ, g)` pair.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} params but {} grads",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if !p.same_shape(g) {
                return Err(Error::Shape(format!(
                    "param {:?} vs grad {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.ensure_slots(params.len())?;
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.update(k, p.data_mut(), g.data(), lr)?;
        }
        Ok(())
    }

    /// Steps every parameter of `model` that holds a gradient buffer, then
    /// clears the buffers. Parameters without a gradient are left untouched.
    pub fn step_model(&mut self, model: &mut Mlp, lr: f64) -> Result<()> {
        let n = model.params().count();
        self.ensure_slots(n)?;
        for (k, p) in model.params_mut().enumerate() {
            if let Some(g) = p.take_grad() {
                self.update(k, p.data_mut(), &g, lr)?;
            }
        }
        Ok(())
    }

    fn ensure_slots(&mut self, n: usize) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity.resize(n, None);
        } else if self.velocity.len() != n {
            return Err(Error::Shape(format!(
                "optimizer tracks {} params, got {n}",
                self.velocity.len()
            )));
        }
        Ok(())
    }

    fn update(&mut self, k: usize, param: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        let (mu, wd) = (self.momentum, self.weight_decay);
        let v = self.velocity[k].get_or_insert_with(|| alloc::vec![0.0; param.len()]);
        if v.len() != param.len() {
            return Err(Error::Shape("momentum buffer shape changed".into()));
        }
        for ((vi, pi), gi) in v.iter_mut().zip(param.iter_mut()).zip(grad) {
            *vi = mu * *vi + gi + wd * *pi;
            *pi -= lr * *vi;
        }
        Ok(())
    }
}
