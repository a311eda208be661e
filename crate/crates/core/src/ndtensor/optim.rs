use std::f64::consts::PI;

use super::params::round_f32;
use super::{ParamStore, Result, Tensor};

/// Adam with per-parameter learning rates.
///
/// Parameters and moments are stored rounded to `f32` after every update so
/// that a checkpointed run resumes bit-identically.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
}

const MOMENT1: &str = "optim.m.";
const MOMENT2: &str = "optim.v.";
const STEP: &str = "optim.step";

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
        }
    }
}

impl Adam {
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter in `params` that received a
    /// gradient. Moments live in `state` under `optim.*` names.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        state: &mut ParamStore,
        lr_for: impl Fn(&str) -> f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for name in params.names() {
            let p = params.get(&name)?.clone();
            let Some(g) = p.grad() else { continue };
            let (m_name, v_name) = (format!("{MOMENT1}{name}"), format!("{MOMENT2}{name}"));
            let mut m = state.get(&m_name).map(Tensor::to_vec).unwrap_or_else(|_| vec![0.0; p.numel()]);
            let mut v = state.get(&v_name).map(Tensor::to_vec).unwrap_or_else(|_| vec![0.0; p.numel()]);
            let lr = lr_for(&name);
            let mut data = p.to_vec();
            for i in 0..data.len() {
                m[i] = round_f32(self.beta1 * m[i] + (1.0 - self.beta1) * g[i]);
                v[i] = round_f32(self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i]);
                let update = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                data[i] = round_f32(data[i] - update);
            }
            params.insert(&name, data, p.shape())?;
            state.insert(&m_name, m, p.shape())?;
            state.insert(&v_name, v, p.shape())?;
        }
        state.insert(STEP, vec![self.step as f64], &[])?;
        Ok(())
    }

    /// Restores the step counter saved by [`Adam::step`].
    pub fn from_state(state: &ParamStore) -> Self {
        let step = state.get(STEP).map(|t| t.item() as u64).unwrap_or(0);
        Self {
            step,
            ..Self::default()
        }
    }
}

/// Cosine decay from `base` to `base * floor` over `total` steps.
pub fn cosine_lr(base: f64, step: u64, total: u64, floor: f64) -> f64 {
    let progress = (step as f64 / total.max(1) as f64).min(1.0);
    base * (floor + (1.0 - floor) * 0.5 * (1.0 + (PI * progress).cos()))
}
