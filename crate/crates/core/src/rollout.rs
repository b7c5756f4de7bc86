//! On-policy batch collection, generalized advantage estimation, and the
//! shared value function.
//!
//! Frames are laid out env-major: frame `e * horizon + t`. Truncation and
//! termination are kept distinct: a truncated transition bootstraps with the
//! value of the terminal observation, a terminated one bootstraps with zero,
//! and both cut the GAE recursion.

use crate::envs::VecEnv;
use crate::error::{Error, Result};
use crate::linalg;
use crate::nn::{self, adam_step_in_place, AdamParams, AdamState, MlpSpec, ParamVector};
use crate::policy::{self, GaussianPolicy};
use crate::rng::{minibatch_permutation, RngStream};

/// One on-policy rollout set collected under a single policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub num_envs: usize,
    pub horizon: usize,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub old_log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub value_predictions: Vec<f64>,
    pub terminated: Vec<bool>,
    pub truncated: Vec<bool>,
    /// `Some` at truncation frames (value of the terminal observation) and at
    /// each env's final frame (value of the next observation).
    pub bootstrap_values: Vec<Option<f64>>,
}

impl Batch {
    pub fn num_frames(&self) -> usize {
        self.num_envs * self.horizon
    }

    /// Columnar little-endian snapshot for diagnostics replay.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.num_frames();
        let mut out = Vec::new();
        out.extend_from_slice(b"CAPOBAT\0");
        out.extend_from_slice(&1u32.to_le_bytes());
        for dim in [self.num_envs, self.horizon, self.obs_dim, self.action_dim] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        let col_f64 = |out: &mut Vec<u8>, xs: &dyn Fn(usize) -> f64| {
            for f in 0..n {
                out.extend_from_slice(&xs(f).to_le_bytes());
            }
        };
        for d in 0..self.obs_dim {
            col_f64(&mut out, &|f| self.observations[f][d]);
        }
        for d in 0..self.action_dim {
            col_f64(&mut out, &|f| self.actions[f][d]);
        }
        col_f64(&mut out, &|f| self.old_log_probs[f]);
        col_f64(&mut out, &|f| self.rewards[f]);
        col_f64(&mut out, &|f| self.value_predictions[f]);
        for f in 0..n {
            let flags = (self.terminated[f] as u8)
                | ((self.truncated[f] as u8) << 1)
                | ((self.bootstrap_values[f].is_some() as u8) << 2);
            out.push(flags);
        }
        col_f64(&mut out, &|f| self.bootstrap_values[f].unwrap_or(0.0));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Batch> {
        let fail = |msg: &str| Error::Decode(format!("batch snapshot: {msg}"));
        if bytes.len() < 28 || &bytes[..8] != b"CAPOBAT\0" {
            return Err(fail("bad header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != 1 {
            return Err(fail("unsupported version"));
        }
        let dim_at = |i: usize| u32::from_le_bytes(bytes[12 + 4 * i..16 + 4 * i].try_into().unwrap()) as usize;
        let (num_envs, horizon, obs_dim, action_dim) = (dim_at(0), dim_at(1), dim_at(2), dim_at(3));
        let n = num_envs * horizon;
        let expected = 28 + 8 * n * (obs_dim + action_dim + 4) + n;
        if bytes.len() != expected {
            return Err(fail("truncated payload"));
        }
        let mut pos = 28;
        let mut next_col = |bytes: &[u8]| -> Vec<f64> {
            let col = bytes[pos..pos + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            pos += 8 * n;
            col
        };
        let obs_cols: Vec<Vec<f64>> = (0..obs_dim).map(|_| next_col(bytes)).collect();
        let act_cols: Vec<Vec<f64>> = (0..action_dim).map(|_| next_col(bytes)).collect();
        let old_log_probs = next_col(bytes);
        let rewards = next_col(bytes);
        let value_predictions = next_col(bytes);
        let flags = &bytes[pos..pos + n];
        pos += n;
        let boots = {
            let col = bytes[pos..pos + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect::<Vec<f64>>();
            col
        };
        let observations = (0..n)
            .map(|f| obs_cols.iter().map(|c| c[f]).collect())
            .collect();
        let actions = (0..n)
            .map(|f| act_cols.iter().map(|c| c[f]).collect())
            .collect();
        Ok(Batch {
            num_envs,
            horizon,
            obs_dim,
            action_dim,
            observations,
            actions,
            old_log_probs,
            rewards,
            value_predictions,
            terminated: flags.iter().map(|&b| b & 1 != 0).collect(),
            truncated: flags.iter().map(|&b| b & 2 != 0).collect(),
            bootstrap_values: flags
                .iter()
                .zip(&boots)
                .map(|(&b, &v)| if b & 4 != 0 { Some(v) } else { None })
                .collect(),
        })
    }
}

/// Advantages and value-fit targets; `returns = advantages + value_predictions`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageSet {
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// The state-value network shared by every expert: trained once per
/// generation, never replicated.
#[derive(Debug, Clone)]
pub struct ValueFn {
    pub net: MlpSpec,
}

impl ValueFn {
    pub fn new(obs_dim: usize, hidden: &[usize]) -> Self {
        ValueFn {
            net: MlpSpec::new(obs_dim, hidden, 1),
        }
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    pub fn init_params(&self, hidden_gain: f64, head_gain: f64, seed: u64) -> ParamVector {
        let mut gains = vec![hidden_gain; self.net.num_layers()];
        *gains.last_mut().expect("layer") = head_gain;
        nn::orthogonal_init(&self.net, &gains, seed)
    }

    pub fn predict(&self, params: &ParamVector, obs: &[f64]) -> Result<f64> {
        Ok(nn::mlp_forward(&self.net, params.as_slice(), obs)?[0])
    }
}

/// Roll the vectorized envs for `horizon` steps under the current policy,
/// recording per-frame log-probs and value predictions at collection time.
pub fn collect_batch(
    policy: &GaussianPolicy,
    params: &ParamVector,
    value: &ValueFn,
    value_params: &ParamVector,
    vec_env: &mut VecEnv,
    horizon: usize,
    rng: &mut RngStream,
) -> Result<Batch> {
    assert!(horizon >= 1);
    let num_envs = vec_env.len();
    let n = num_envs * horizon;
    let obs_dim = policy.obs_dim();
    let action_dim = policy.action_dim;
    let mut batch = Batch {
        num_envs,
        horizon,
        obs_dim,
        action_dim,
        observations: vec![Vec::new(); n],
        actions: vec![Vec::new(); n],
        old_log_probs: vec![0.0; n],
        rewards: vec![0.0; n],
        value_predictions: vec![0.0; n],
        terminated: vec![false; n],
        truncated: vec![false; n],
        bootstrap_values: vec![None; n],
    };
    for t in 0..horizon {
        let observations = vec_env.observations();
        let mut actions = Vec::with_capacity(num_envs);
        for (e, obs) in observations.iter().enumerate() {
            if !obs.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "observation from env {e} at step {t}"
                )));
            }
            let frame = e * horizon + t;
            let dist = policy.dist_at(params, obs)?;
            let action = policy::sample_action(&dist, rng);
            batch.old_log_probs[frame] = policy::log_prob(&dist, &action);
            batch.value_predictions[frame] = value.predict(value_params, obs)?;
            batch.observations[frame] = obs.clone();
            batch.actions[frame] = action.clone();
            actions.push(action);
        }
        let out = vec_env.step(&actions)?;
        for e in 0..num_envs {
            let frame = e * horizon + t;
            let r = &out.results[e];
            batch.rewards[frame] = r.reward;
            batch.terminated[frame] = r.terminated;
            batch.truncated[frame] = r.truncated;
            if r.truncated {
                let terminal = out.terminal_observations[e]
                    .as_ref()
                    .ok_or(Error::MissingBootstrap(frame))?;
                batch.bootstrap_values[frame] = Some(value.predict(value_params, terminal)?);
            }
        }
    }
    // Rollout-end bootstrap: value of the observation after the last step.
    for e in 0..num_envs {
        let frame = e * horizon + (horizon - 1);
        if batch.bootstrap_values[frame].is_none() && !batch.terminated[frame] {
            let obs = vec_env.states[e].observation();
            batch.bootstrap_values[frame] = Some(value.predict(value_params, &obs)?);
        }
    }
    Ok(batch)
}

/// GAE(λ) by backward recursion:
/// `A_t = delta_t + gamma * lambda * A_{t+1}`, cut at episode boundaries,
/// with `delta_t = r_t + gamma * v_next - V(s_t)` where `v_next` is zero
/// after termination and the recorded bootstrap after truncation or at the
/// rollout end.
pub fn compute_gae(batch: &Batch, gamma: f64, lambda: f64) -> Result<AdvantageSet> {
    let n = batch.num_frames();
    let mut advantages = vec![0.0; n];
    for e in 0..batch.num_envs {
        let mut next_adv = 0.0;
        for t in (0..batch.horizon).rev() {
            let f = e * batch.horizon + t;
            let episode_ends = batch.terminated[f] || batch.truncated[f];
            let v_next = if batch.terminated[f] {
                0.0
            } else if batch.truncated[f] || t == batch.horizon - 1 {
                batch.bootstrap_values[f].ok_or(Error::MissingBootstrap(f))?
            } else {
                batch.value_predictions[f + 1]
            };
            let delta = batch.rewards[f] + gamma * v_next - batch.value_predictions[f];
            let carry = if episode_ends { 0.0 } else { next_adv };
            next_adv = delta + gamma * lambda * carry;
            advantages[f] = next_adv;
        }
    }
    let returns = advantages
        .iter()
        .zip(&batch.value_predictions)
        .map(|(a, v)| a + v)
        .collect();
    Ok(AdvantageSet {
        advantages,
        returns,
    })
}

/// Zero-mean, unit-std normalization (population std, 1e-8 in the
/// denominator). Applied per minibatch by the optimizers.
pub fn normalize_advantages(xs: &[f64]) -> Vec<f64> {
    if xs.len() < 2 {
        return vec![0.0; xs.len()];
    }
    let m = linalg::mean(xs);
    let s = linalg::std_pop(xs);
    xs.iter().map(|x| (x - m) / (s + 1e-8)).collect()
}

#[derive(Debug, Clone)]
pub struct ValueFitConfig {
    pub epochs: usize,
    pub minibatches: usize,
    pub lr: f64,
    /// Coefficient on the squared error (0.5 by default).
    pub vf_coef: f64,
    pub max_grad_norm: f64,
    /// Linear anneal horizon in optimizer steps; 0 disables.
    pub anneal_total_steps: u64,
}

impl Default for ValueFitConfig {
    fn default() -> Self {
        ValueFitConfig {
            epochs: 10,
            minibatches: 32,
            lr: 3e-4,
            vf_coef: 0.5,
            max_grad_norm: 0.5,
            anneal_total_steps: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ValueFitReport {
    pub params: ParamVector,
    pub adam: AdamState,
    pub loss_before: f64,
    pub loss_after: f64,
}

pub fn value_loss(
    value: &ValueFn,
    params: &ParamVector,
    observations: &[Vec<f64>],
    returns: &[f64],
    vf_coef: f64,
) -> Result<f64> {
    let mut acc = 0.0;
    for (obs, &target) in observations.iter().zip(returns) {
        let v = value.predict(params, obs)?;
        acc += (v - target) * (v - target);
    }
    Ok(vf_coef * acc / observations.len() as f64)
}

/// Mean-squared-error regression of the value net onto the GAE returns,
/// run once per generation and shared by all experts.
pub fn fit_value(
    value: &ValueFn,
    params_in: &ParamVector,
    adam_in: &AdamState,
    observations: &[Vec<f64>],
    returns: &[f64],
    cfg: &ValueFitConfig,
    shuffle_seed: u64,
) -> Result<ValueFitReport> {
    if observations.len() != returns.len() {
        return Err(Error::ShapeMismatch {
            context: "value fit targets",
            expected: observations.len(),
            got: returns.len(),
        });
    }
    let n = observations.len();
    let mut params = params_in.clone();
    let mut adam = adam_in.clone();
    let adam_cfg = AdamParams::default();
    let loss_before = value_loss(value, &params, observations, returns, cfg.vf_coef)?;
    let chunk = n.div_ceil(cfg.minibatches).max(1);
    for epoch in 0..cfg.epochs {
        let perm = minibatch_permutation(n, shuffle_seed, epoch);
        for mb in perm.chunks(chunk) {
            let mut grad = vec![0.0; value.param_count()];
            let scale = 2.0 * cfg.vf_coef / mb.len() as f64;
            for &f in mb {
                let trace =
                    nn::forward_traced(&value.net, params.as_slice(), &observations[f])?;
                let v = trace.output()[0];
                let d_out = [scale * (v - returns[f])];
                nn::backward_traced(&value.net, params.as_slice(), &trace, &d_out, &mut grad)?;
            }
            clip_grad_norm(&mut grad, cfg.max_grad_norm);
            let lr = annealed_lr(cfg.lr, adam.step_count, cfg.anneal_total_steps);
            adam_step_in_place(&mut adam, &mut params, &grad, lr, &adam_cfg)?;
        }
    }
    let loss_after = value_loss(value, &params, observations, returns, cfg.vf_coef)?;
    Ok(ValueFitReport {
        params,
        adam,
        loss_before,
        loss_after,
    })
}

/// Scale the gradient so its global L2 norm does not exceed `max_norm`.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = linalg::norm2(grad);
    if max_norm > 0.0 && norm > max_norm {
        linalg::scale(grad, max_norm / norm);
    }
    norm
}

/// Linear decay to zero over `total` optimizer steps; constant when disabled.
pub fn annealed_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = 1.0 - (step as f64 / total as f64).min(1.0);
    base * frac
}
