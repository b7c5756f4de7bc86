//! Adam with bias correction. State is a plain value: copyable between
//! threads and serializable, so replicas can start from identical optimizer
//! state and carry rules can splice moments around.

use super::ParamVector;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

impl AdamState {
    pub fn zeros(len: usize) -> Self {
        AdamState {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.first_moment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_moment.is_empty()
    }
}

/// One bias-corrected Adam step in the descent direction of `grad`.
/// Pure version; see [`adam_step_in_place`] for the update loop.
pub fn adam_step(
    state: &AdamState,
    params: &ParamVector,
    grad: &ParamVector,
    lr: f64,
    cfg: &AdamParams,
) -> Result<(ParamVector, AdamState)> {
    let mut p = params.clone();
    let mut s = state.clone();
    adam_step_in_place(&mut s, &mut p, grad.as_slice(), lr, cfg)?;
    Ok((p, s))
}

pub fn adam_step_in_place(
    state: &mut AdamState,
    params: &mut ParamVector,
    grad: &[f64],
    lr: f64,
    cfg: &AdamParams,
) -> Result<()> {
    let n = params.len();
    if grad.len() != n || state.len() != n {
        return Err(Error::ShapeMismatch {
            context: "adam step",
            expected: n,
            got: if grad.len() != n { grad.len() } else { state.len() },
        });
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    #[allow(clippy::needless_range_loop)]
    for j in 0..n {
        let g = grad[j];
        let m = cfg.beta1 * state.first_moment[j] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * state.second_moment[j] + (1.0 - cfg.beta2) * g * g;
        state.first_moment[j] = m;
        state.second_moment[j] = v;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        params.0[j] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}
