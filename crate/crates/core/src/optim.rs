//! AdamW with decoupled weight decay and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::adapter_net::AdapterParams;
use crate::error::{Result, SecosError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-5 }
    }
}

/// Which tensors the optimizer touches, by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainableMask {
    /// Update the per-adapter output scale.
    pub scale: bool,
}

impl TrainableMask {
    pub fn is_trainable(&self, name: &str) -> bool {
        self.scale || !name.ends_with(".scale")
    }

    fn decays(name: &str) -> bool {
        name.ends_with(".weight")
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    mask: TrainableMask,
    m: AdapterParams,
    v: AdapterParams,
    step: u64,
}

impl AdamW {
    pub fn new(params: &AdapterParams, config: AdamWConfig, mask: TrainableMask) -> Result<Self> {
        let ok = |b: f64| (0.0..1.0).contains(&b);
        if !ok(config.beta1) || !ok(config.beta2) || !(config.eps > 0.0) || !(config.weight_decay >= 0.0) {
            return Err(SecosError::param(format!("invalid optimizer settings {config:?}")));
        }
        Ok(Self { config, mask, m: params.zeros_like(), v: params.zeros_like(), step: 0 })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`.
    pub fn step(&mut self, params: &mut AdapterParams, grads: &AdapterParams, lr: f64) -> Result<()> {
        if !params.same_shape(grads) || !params.same_shape(&self.m) {
            return Err(SecosError::structure("gradient shapes do not match parameters"));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let g = grads.tensors();
        for (((p, g), m), v) in params.tensors_mut().into_iter().zip(g).zip(self.m.tensors_mut()).zip(self.v.tensors_mut()) {
            if !self.mask.is_trainable(&p.name) {
                continue;
            }
            let wd = if TrainableMask::decays(&p.name) { c.weight_decay } else { 0.0 };
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * gi;
                v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= lr * (mhat / (vhat.sqrt() + c.eps) + wd * p.data[i]);
            }
        }
        Ok(())
    }
}

/// Per-epoch multiplier on the base learning rate.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    /// Linear decay from the base rate to a tenth of it over the run.
    #[default]
    Linear,
    Cosine,
    /// Explicit factors; the last one repeats past the end of the list.
    Factors(Vec<f64>),
}

impl Schedule {
    /// Learning rate for `epoch` in `0..epochs`.
    pub fn lr(&self, base: f64, epoch: usize, epochs: usize) -> f64 {
        let frac = if epochs <= 1 { 0.0 } else { epoch as f64 / (epochs - 1) as f64 };
        match self {
            Schedule::Constant => base,
            Schedule::Linear => base * (1.0 - 0.9 * frac),
            Schedule::Cosine => base * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * frac).cos())),
            Schedule::Factors(f) => base * f.get(epoch).or(f.last()).copied().unwrap_or(1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Schedule::Factors(f) if f.is_empty() || f.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) => {
                Err(SecosError::param("schedule factors must be a non-empty list of finite values >= 0"))
            }
            _ => Ok(()),
        }
    }
}
