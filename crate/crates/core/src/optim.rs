//! Adam and the stepped polynomial learning-rate policy.

use crate::error::{Error, Result};
use crate::nn::{LayerGrads, LayerParams};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates, one buffer per trainable array.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Zeroed state for buffers of the given lengths.
    pub fn new(lengths: impl IntoIterator<Item = usize>) -> Self {
        let m: Vec<Vec<f64>> = lengths.into_iter().map(|n| vec![0.0; n]).collect();
        Self {
            v: m.clone(),
            m,
            step_count: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }

    /// State mirroring the trainable arrays of `layers`.
    pub fn for_layers(layers: &[LayerParams]) -> Self {
        Self::new(layers.iter().flat_map(|p| p.trainable().map(|s| s.len())))
    }
}

/// One bias-corrected Adam update over matching lists of parameter and
/// gradient buffers.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::contract(format!("learning rate {lr} must be finite and >= 0")));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::contract(format!(
            "adam buffer count mismatch: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::contract(format!(
                "adam buffer {i}: {} params, {} grads, {} moments",
                p.len(),
                g.len(),
                state.m[i].len()
            )));
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// [`adam_step`] over whole layer stacks.
pub fn adam_step_layers(
    layers: &mut [LayerParams],
    grads: &[LayerGrads],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if layers.len() != grads.len() {
        return Err(Error::contract(format!(
            "{} layers but {} gradient sets",
            layers.len(),
            grads.len()
        )));
    }
    let mut params: Vec<&mut [f64]> = layers.iter_mut().flat_map(|p| p.trainable_mut()).collect();
    let grads: Vec<&[f64]> = grads.iter().flat_map(|g| g.slices()).collect();
    adam_step(&mut params, &grads, state, lr)
}

/// `base_lr · (1 − ⌊epoch/interval⌋·interval / max_iter)^power`, held
/// constant inside each interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrPolicy {
    pub base_lr: f64,
    pub max_iter: usize,
    pub interval: usize,
    pub power: f64,
}

impl LrPolicy {
    pub fn new(base_lr: f64, max_iter: usize) -> Self {
        Self {
            base_lr,
            max_iter,
            interval: 50,
            power: 0.5,
        }
    }
}

pub fn schedule_lr(policy: &LrPolicy, epoch: usize) -> Result<f64> {
    if epoch > policy.max_iter {
        return Err(Error::contract(format!(
            "epoch {epoch} beyond max_iter {}",
            policy.max_iter
        )));
    }
    if policy.interval == 0 {
        return Err(Error::contract("learning-rate interval must be positive"));
    }
    if policy.max_iter == 0 {
        return Ok(policy.base_lr);
    }
    let reached = (epoch / policy.interval * policy.interval) as f64;
    let frac = (1.0 - reached / policy.max_iter as f64).max(0.0);
    // At max_iter the factor is exactly zero even when max_iter is not a
    // multiple of the interval.
    if epoch == policy.max_iter {
        return Ok(0.0);
    }
    Ok(policy.base_lr * frac.powf(policy.power))
}
