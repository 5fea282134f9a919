use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

/// `scale * d^-0.5 * min(step^-0.5, step * warmup^-1.5)`, the warmup-then-decay
/// schedule from the original Transformer recipe.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InverseSqrtSchedule {
    pub scale: f64,
    pub d_model: usize,
    pub warmup_steps: usize,
}

impl InverseSqrtSchedule {
    /// Learning rate for a 1-based step.
    pub fn rate(&self, step: u64) -> f64 {
        let step = step.max(1) as f64;
        let warmup = self.warmup_steps.max(1) as f64;
        self.scale * (self.d_model as f64).powf(-0.5) * step.powf(-0.5).min(step * warmup.powf(-1.5))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.998,
            epsilon: 1e-9,
        }
    }
}

struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Bias-corrected Adam over named parameters.
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.moments.get(name).map(|m| m.first.as_slice())
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.moments.get(name).map(|m| m.second.as_slice())
    }

    /// Applies one update with learning rate `lr` to every parameter that has
    /// a gradient. Parameters without a gradient entry are left untouched.
    ///
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::contract(format!("gradient for unknown parameter `{name}`")))?;
            if g.len() != p.numel() {
                return Err(Error::shape("adam_step", p.shape(), &[g.len()]));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { param: name.clone() });
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                first: vec![0.0; g.len()],
                second: vec![0.0; g.len()],
            });
            for (((w, &gi), m1), m2) in p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.first.iter_mut())
                .zip(m.second.iter_mut())
            {
                *m1 = beta1 * *m1 + (1.0 - beta1) * gi;
                *m2 = beta2 * *m2 + (1.0 - beta2) * gi * gi;
                let m_hat = *m1 / bc1;
                let v_hat = *m2 / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads
            .values_mut()
            .for_each(|g| g.iter_mut().for_each(|v| *v *= s));
    }
    norm
}
