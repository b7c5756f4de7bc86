//! PPO: epochs of shuffled minibatch Adam on the clipped surrogate.

use super::{surrogate_eval, surrogate_loss_grad, EpochTrace, ExpertResult, PpoConfig};
use crate::error::Result;
use crate::nn::{adam_step_in_place, AdamParams, AdamState, ParamVector};
use crate::policy::{self, GaussianPolicy};
use crate::rng::minibatch_permutation;
use crate::rollout::{clip_grad_norm, normalize_advantages, AdvantageSet, Batch};

pub fn ppo_update(
    policy: &GaussianPolicy,
    params_in: &ParamVector,
    adam_in: &AdamState,
    batch: &Batch,
    advantages: &AdvantageSet,
    cfg: &PpoConfig,
) -> Result<ExpertResult> {
    ppo_update_with_snapshots(policy, params_in, adam_in, batch, advantages, cfg, None)
}

/// PPO update that can additionally record the parameter vector at every
/// epoch boundary (the trajectory-averaging baseline consumes these).
pub fn ppo_update_with_snapshots(
    policy: &GaussianPolicy,
    params_in: &ParamVector,
    adam_in: &AdamState,
    batch: &Batch,
    advantages: &AdvantageSet,
    cfg: &PpoConfig,
    mut snapshots: Option<&mut Vec<ParamVector>>,
) -> Result<ExpertResult> {
    policy.check_params(params_in)?;
    let n = batch.num_frames();
    let frames_all: Vec<usize> = (0..n).collect();
    let adam_cfg = AdamParams::default();

    // Batch-level normalized advantages, fixed for the whole update: the
    // yardstick for the reported surrogate (zero at the incumbent).
    let adv_batch = normalize_advantages(&advantages.advantages);
    let old_dists = policy.dists_for(params_in, &batch.observations)?;
    let initial =
        surrogate_eval(policy, params_in, batch, &frames_all, &adv_batch, cfg.clip_eps)?;

    let mut params = params_in.clone();
    let mut adam = adam_in.clone();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut epochs_run = 0;
    let chunk = n.div_ceil(cfg.minibatches.max(1)).max(1);
    for epoch in 0..cfg.epochs {
        let perm = minibatch_permutation(n, cfg.shuffle_seed, epoch);
        let mut clip_acc = 0.0;
        let mut clip_frames = 0usize;
        for mb in perm.chunks(chunk) {
            let mb_adv: Vec<f64> = mb.iter().map(|&f| advantages.advantages[f]).collect();
            let mb_adv = normalize_advantages(&mb_adv);
            let (_, clip_fraction, mut grad) = surrogate_loss_grad(
                policy,
                &params,
                batch,
                mb,
                &mb_adv,
                cfg.clip_eps,
                cfg.entropy_coef,
            )?;
            clip_grad_norm(&mut grad, cfg.max_grad_norm);
            let lr = cfg.effective_lr(adam.step_count);
            adam_step_in_place(&mut adam, &mut params, &grad, lr, &adam_cfg)?;
            clip_acc += clip_fraction * mb.len() as f64;
            clip_frames += mb.len();
        }
        epochs_run += 1;
        let new_dists = policy.dists_for(&params, &batch.observations)?;
        let mean_kl = policy::mean_kl_over_states(&old_dists, &new_dists)?;
        let eval = surrogate_eval(policy, &params, batch, &frames_all, &adv_batch, cfg.clip_eps)?;
        trace.push(EpochTrace {
            epoch,
            mean_kl,
            clip_fraction: clip_acc / clip_frames.max(1) as f64,
            surrogate: eval.objective,
        });
        if let Some(sink) = snapshots.as_deref_mut() {
            sink.push(params.clone());
        }
        if cfg.target_kl > 0.0 && mean_kl > cfg.target_kl {
            break;
        }
    }
    let final_mean_kl = trace.last().map_or(0.0, |t| t.mean_kl);
    let surrogate_gain = trace.last().map_or(0.0, |t| t.surrogate - initial.objective);
    Ok(ExpertResult {
        params,
        adam_state: adam,
        epochs_run,
        final_mean_kl,
        surrogate_gain,
        trace,
    })
}
