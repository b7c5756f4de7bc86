//! The two base policy improvers.
//!
//! PPO runs `E` epochs of seeded, shuffled minibatch Adam on the clipped
//! surrogate; the minibatch permutation is a pure function of
//! `(shuffle_seed, epoch)`, which is the replication premise of the
//! consensus engine: re-running an update with the same seed on a copied
//! incumbent reproduces it bit for bit. TRPO solves for the natural-gradient
//! step with conjugate gradient and backtracks until the analytic mean KL is
//! feasible and the surrogate improves.

mod cg;
mod fvp;
mod ppo;
mod trpo;

pub use cg::conjugate_gradient;
pub use fvp::FisherVectorProduct;
pub use ppo::{ppo_update, ppo_update_with_snapshots};
pub use trpo::trpo_update;

use crate::error::{Error, Result};
use crate::nn::{self, AdamState, ParamVector};
use crate::policy::{self, GaussianPolicy};
use crate::rollout::Batch;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub lr: f64,
    pub lr_anneal: bool,
    /// Total planned optimizer steps for the linear anneal; resolved by the
    /// harness from the frame budget. 0 keeps the learning rate constant.
    pub anneal_total_steps: u64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    /// Early-stop threshold on the per-epoch analytic mean KL; 0 disables.
    pub target_kl: f64,
    pub shuffle_seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip_eps: 0.2,
            epochs: 10,
            minibatches: 32,
            lr: 3e-4,
            lr_anneal: true,
            anneal_total_steps: 0,
            entropy_coef: 0.0,
            max_grad_norm: 0.5,
            target_kl: 0.0,
            shuffle_seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_eps <= 0.0 {
            return Err(Error::Config("clip_eps must be positive".into()));
        }
        if self.epochs == 0 || self.minibatches == 0 {
            return Err(Error::Config("epochs and minibatches must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.target_kl < 0.0 {
            return Err(Error::Config("target_kl must be >= 0".into()));
        }
        Ok(())
    }

    pub fn effective_lr(&self, step: u64) -> f64 {
        if self.lr_anneal {
            crate::rollout::annealed_lr(self.lr, step, self.anneal_total_steps)
        } else {
            self.lr
        }
    }

    /// Number of minibatches actually formed per epoch (the remainder is a
    /// smaller final minibatch, never dropped).
    pub fn chunks_per_epoch(&self, num_frames: usize) -> usize {
        let chunk = num_frames.div_ceil(self.minibatches).max(1);
        num_frames.div_ceil(chunk)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrpoConfig {
    pub max_kl: f64,
    pub damping: f64,
    pub cg_iters: usize,
    pub backtrack_coef: f64,
    pub max_backtracks: usize,
}

impl Default for TrpoConfig {
    fn default() -> Self {
        TrpoConfig {
            max_kl: 0.01,
            damping: 0.1,
            cg_iters: 10,
            backtrack_coef: 0.8,
            max_backtracks: 10,
        }
    }
}

impl TrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_kl <= 0.0 || self.damping <= 0.0 {
            return Err(Error::Config("max_kl and damping must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub surrogate: f64,
}

/// One replica's post-update parameters, optimizer state, and per-epoch
/// KL/surrogate trace.
#[derive(Debug, Clone)]
pub struct ExpertResult {
    pub params: ParamVector,
    pub adam_state: AdamState,
    pub epochs_run: usize,
    pub final_mean_kl: f64,
    pub surrogate_gain: f64,
    pub trace: Vec<EpochTrace>,
}

/// Clipped-surrogate loss over all frames of a batch:
/// `-mean(min(rho * A, clip(rho) * A))`, plus the fraction of frames where
/// the clipped branch is strictly smaller. Advantages are consumed as given
/// (callers normalize per minibatch).
pub fn clipped_surrogate_loss(
    policy: &GaussianPolicy,
    params: &ParamVector,
    batch: &Batch,
    advantages: &[f64],
    clip_eps: f64,
) -> Result<(f64, f64)> {
    let frames: Vec<usize> = (0..batch.num_frames()).collect();
    let eval = surrogate_eval(policy, params, batch, &frames, advantages, clip_eps)?;
    Ok((-eval.objective, eval.clip_fraction))
}

pub(crate) struct SurrogateEval {
    /// Mean clipped objective (to be maximized).
    pub objective: f64,
    pub clip_fraction: f64,
}

pub(crate) fn surrogate_eval(
    policy: &GaussianPolicy,
    params: &ParamVector,
    batch: &Batch,
    frames: &[usize],
    advantages: &[f64],
    clip_eps: f64,
) -> Result<SurrogateEval> {
    if frames.len() != advantages.len() {
        return Err(Error::ShapeMismatch {
            context: "surrogate advantages",
            expected: frames.len(),
            got: advantages.len(),
        });
    }
    let mut total = 0.0;
    let mut clipped_smaller = 0usize;
    for (i, &f) in frames.iter().enumerate() {
        let dist = policy.dist_at(params, &batch.observations[f])?;
        let logp = policy::log_prob(&dist, &batch.actions[f]);
        let rho = (logp - batch.old_log_probs[f]).exp();
        if !rho.is_finite() {
            return Err(Error::NonFinite(format!("importance ratio at frame {f}")));
        }
        let adv = advantages[i];
        let unclipped = rho * adv;
        let clipped = rho.clamp(1.0 - clip_eps, 1.0 + clip_eps) * adv;
        total += unclipped.min(clipped);
        if clipped < unclipped {
            clipped_smaller += 1;
        }
    }
    let n = frames.len() as f64;
    Ok(SurrogateEval {
        objective: total / n,
        clip_fraction: clipped_smaller as f64 / n,
    })
}

/// Loss value, training clip fraction, and the exact gradient of the loss
/// (`loss = -clipped surrogate - entropy_coef * entropy`) over a frame set.
pub(crate) fn surrogate_loss_grad(
    policy: &GaussianPolicy,
    params: &ParamVector,
    batch: &Batch,
    frames: &[usize],
    advantages: &[f64],
    clip_eps: f64,
    entropy_coef: f64,
) -> Result<(f64, f64, Vec<f64>)> {
    if frames.len() != advantages.len() {
        return Err(Error::ShapeMismatch {
            context: "surrogate advantages",
            expected: frames.len(),
            got: advantages.len(),
        });
    }
    policy.check_params(params)?;
    let mlp = &policy.mean_net;
    let mlp_len = mlp.param_count();
    let mlp_params = policy.mlp_params(params);
    let log_std = policy.log_std(params);
    let sigma: Vec<f64> = log_std.iter().map(|&ls| policy.std_from_log(ls)).collect();
    let masks: Vec<f64> = log_std
        .iter()
        .map(|&ls| policy.log_std_grad_mask(ls))
        .collect();

    let n = frames.len() as f64;
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    let mut clipped_smaller = 0usize;
    for (i, &f) in frames.iter().enumerate() {
        let trace = nn::forward_traced(mlp, mlp_params, &batch.observations[f])?;
        let dist = policy::GaussianDist::new(trace.output().to_vec(), sigma.clone());
        let action = &batch.actions[f];
        let logp = policy::log_prob(&dist, action);
        let rho = (logp - batch.old_log_probs[f]).exp();
        if !rho.is_finite() {
            return Err(Error::NonFinite(format!("importance ratio at frame {f}")));
        }
        let adv = advantages[i];
        let unclipped = rho * adv;
        let clipped = rho.clamp(1.0 - clip_eps, 1.0 + clip_eps) * adv;
        loss -= unclipped.min(clipped) / n;
        if clipped < unclipped {
            clipped_smaller += 1;
        }
        // Gradient flows only while the active min-branch depends on theta:
        // blocked once the ratio left the clip range on the side the
        // advantage pushes toward.
        let blocked = (adv > 0.0 && rho > 1.0 + clip_eps) || (adv < 0.0 && rho < 1.0 - clip_eps);
        if blocked || adv == 0.0 {
            continue;
        }
        let w = -adv * rho / n; // d loss / d logp
        let (d_mean_lp, d_logstd_lp) = policy::log_prob_grads(&dist, action);
        let d_mean: Vec<f64> = d_mean_lp.iter().map(|g| w * g).collect();
        nn::backward_traced(mlp, mlp_params, &trace, &d_mean, &mut grad[..mlp_len])?;
        for d in 0..policy.action_dim {
            grad[mlp_len + d] += w * d_logstd_lp[d] * masks[d];
        }
    }
    if entropy_coef != 0.0 {
        // Entropy is state-independent for this policy family.
        let dist = policy::GaussianDist::new(vec![0.0; policy.action_dim], sigma.clone());
        loss -= entropy_coef * policy::entropy(&dist);
        for d in 0..policy.action_dim {
            grad[mlp_len + d] -= entropy_coef * masks[d];
        }
    }
    Ok((loss, clipped_smaller as f64 / frames.len() as f64, grad))
}

/// Ascent gradient of the surrogate at the incumbent (where the clip is
/// inactive): the `g` of the natural-gradient solve and the Fisher
/// diagnostics.
pub fn policy_gradient(
    policy: &GaussianPolicy,
    params: &ParamVector,
    batch: &Batch,
    advantages: &[f64],
) -> Result<ParamVector> {
    let frames: Vec<usize> = (0..batch.num_frames()).collect();
    let (_, _, mut grad) =
        surrogate_loss_grad(policy, params, batch, &frames, advantages, 0.2, 0.0)?;
    for g in &mut grad {
        *g = -*g;
    }
    Ok(ParamVector(grad))
}
