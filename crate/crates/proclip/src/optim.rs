//! AdamW with decoupled weight decay and the cosine learning-rate schedule.

use crate::error::{Error, Result};

/// AdamW hyperparameters for one parameter group.
#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First/second moments for a list of parameter tensors, plus the shared
/// step counter used for bias correction.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl OptimizerState {
    /// Zero-initialized state for tensors of the given lengths.
    pub fn new(tensor_lens: &[usize]) -> Self {
        Self {
            m: tensor_lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: tensor_lens.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One AdamW update over a list of parameter tensors.
///
/// `p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)` with
/// bias-corrected moments. A non-finite gradient aborts before any state
/// or parameter is touched.
pub fn adamw_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut OptimizerState,
    lr: f64,
    config: &AdamWConfig,
) -> Result<()> {
    if params.len() != grads.len()
        || params.len() != state.m.len()
        || params
            .iter()
            .zip(grads)
            .any(|(p, g)| p.len() != g.len())
    {
        return Err(Error::ShapeMismatch {
            context: "adamw_step",
            expected: format!("{} aligned parameter/gradient tensors", state.m.len()),
            got: format!("{} params, {} grads", params.len(), grads.len()),
        });
    }
    for g in grads {
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "adamw_step gradient".into(),
            });
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let bias1 = 1.0 - config.beta1.powi(t);
    let bias2 = 1.0 - config.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for k in 0..p.len() {
            m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g[k];
            v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g[k] * g[k];
            let m_hat = m[k] / bias1;
            let v_hat = v[k] / bias2;
            p[k] -= lr * (m_hat / (v_hat.sqrt() + config.eps) + config.weight_decay * p[k]);
        }
    }
    Ok(())
}

/// Cosine decay: `base_lr * 0.5 * (1 + cos(pi * step / total_steps))`.
/// Steps past `total_steps` clamp to the final (zero) value.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64) -> f64 {
    debug_assert!(total_steps >= 1);
    let s = step.min(total_steps);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * s as f64 / total_steps as f64).cos())
}
