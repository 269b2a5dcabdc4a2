//! Adam optimizer over a flat list of parameter tensors.

use super::Tensor;
use crate::error::{RestError, Result};

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update. Each entry of `params` is replaced by a new grad-requiring
/// leaf holding the updated values; tensors without an accumulated gradient
/// are left untouched.
pub fn adam_step(params: &mut [&mut Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(RestError::Usage(format!(
            "adam state tracks {} params, got {}",
            state.m.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - (cfg.beta1 as f64).powf(t);
    let bc2 = 1.0 - (cfg.beta2 as f64).powf(t);
    for (i, p) in params.iter_mut().enumerate() {
        let grad = match p.grad() {
            Some(g) => g,
            None => continue,
        };
        let mut data = p.data().to_vec();
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..data.len() {
            let g = grad[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[j] as f64 / bc1;
            let vhat = v[j] as f64 / bc2;
            data[j] -= (cfg.lr as f64 * mhat / (vhat.sqrt() + cfg.eps as f64)) as f32;
        }
        **p = Tensor::param(p.dims().to_vec().as_slice(), data)?;
    }
    Ok(())
}

/// Global-norm gradient clipping: scales every grad so the joint norm is at
/// most `max_norm`. Returns the pre-clip norm.
pub fn clip_grad_norm(params: &[&Tensor], max_norm: f32) -> f32 {
    let mut sq = 0.0f64;
    for p in params {
        if let Some(g) = p.grad() {
            for v in g {
                sq += v as f64 * v as f64;
            }
        }
    }
    let norm = sq.sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for p in params {
            let mut slot = p.inner.grad.lock().unwrap();
            if let Some(g) = slot.as_mut() {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
        }
    }
    norm
}
