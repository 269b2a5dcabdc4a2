//! Finite-difference gradient oracles.
//!
//! These only ever call the forward path, so they stay independent of the
//! backward rules they are used to check.

use crate::error::Result;
use crate::tensor::Tensor;

/// Central finite differences of a scalar function at `x`.
pub fn finite_diff<F>(f: F, x: &[f32], eps: f32) -> Vec<f32>
where
    F: Fn(&[f32]) -> f32,
{
    let mut grad = vec![0.0f32; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let fp = f(&probe) as f64;
        probe[i] = x[i] - eps;
        let fm = f(&probe) as f64;
        probe[i] = x[i];
        grad[i] = ((fp - fm) / (2.0 * eps as f64)) as f32;
    }
    grad
}

/// Elementwise relative error, max over components.
pub fn max_rel_err(analytic: &[f32], numeric: &[f32]) -> f32 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let scale = a.abs().max(n.abs()).max(1e-3);
            (a - n).abs() / scale
        })
        .fold(0.0, f32::max)
    }

/// Norm-based relative error ||a - n|| / max(||a||, ||n||). Robust for whole
/// parameter tensors where single components sit below f32 forward noise.
pub fn rel_err_norm(analytic: &[f32], numeric: &[f32]) -> f32 {
    let mut diff = 0.0f64;
    let mut na = 0.0f64;
    let mut nn = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        diff += (a as f64 - n as f64).powi(2);
        na += (a as f64).powi(2);
        nn += (n as f64).powi(2);
    }
    (diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-8)) as f32
}

/// Check the analytic gradient of `loss_fn` w.r.t. a leaf against central
/// finite differences. Returns the max relative error.
pub fn check_grad<F>(loss_fn: F, dims: &[usize], x0: &[f32], eps: f32) -> Result<f32>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let leaf = Tensor::param(dims, x0.to_vec())?;
    let loss = loss_fn(&leaf)?;
    loss.backward()?;
    let analytic = leaf.grad().expect("leaf grad populated by backward");

    let numeric = finite_diff(
        |xs| {
            let t = Tensor::from_vec(dims, xs.to_vec()).unwrap();
            loss_fn(&t).unwrap().item()
        },
        x0,
        eps,
    );
    Ok(max_rel_err(&analytic, &numeric))
}

/// Like `check_grad`, but scored with the norm-based relative error. Used for
/// whole-model parameter tensors at f32.
pub fn check_grad_norm<F>(loss_fn: F, dims: &[usize], x0: &[f32], eps: f32) -> Result<f32>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let leaf = Tensor::param(dims, x0.to_vec())?;
    let loss = loss_fn(&leaf)?;
    loss.backward()?;
    let analytic = leaf.grad().expect("leaf grad populated by backward");

    let numeric = finite_diff(
        |xs| {
            let t = Tensor::from_vec(dims, xs.to_vec()).unwrap();
            loss_fn(&t).unwrap().item()
        },
        x0,
        eps,
    );
    Ok(rel_err_norm(&analytic, &numeric))
}
