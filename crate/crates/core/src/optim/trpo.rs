//! TRPO: natural-gradient step via conjugate gradient plus a backtracking
//! line search that requires both KL feasibility and surrogate improvement.

use super::{conjugate_gradient, policy_gradient, EpochTrace, ExpertResult, FisherVectorProduct, TrpoConfig};
use crate::error::Result;
use crate::linalg::{add_scaled, norm2};
use crate::nn::{AdamState, ParamVector};
use crate::policy::{self, GaussianPolicy};
use crate::rollout::{normalize_advantages, AdvantageSet, Batch};

/// One TRPO update. `epochs_run = 0` signals a rejected (unchanged) step.
/// The optimizer state passes through untouched; TRPO keeps no moments.
pub fn trpo_update(
    policy: &GaussianPolicy,
    params_in: &ParamVector,
    adam_in: &AdamState,
    batch: &Batch,
    advantages: &AdvantageSet,
    cfg: &TrpoConfig,
) -> Result<ExpertResult> {
    policy.check_params(params_in)?;
    let adv = normalize_advantages(&advantages.advantages);
    let g = policy_gradient(policy, params_in, batch, &adv)?;

    let rejected = |kl: f64| ExpertResult {
        params: params_in.clone(),
        adam_state: adam_in.clone(),
        epochs_run: 0,
        final_mean_kl: kl,
        surrogate_gain: 0.0,
        trace: Vec::new(),
    };

    if norm2(g.as_slice()) == 0.0 {
        return Ok(rejected(0.0));
    }

    let fvp = FisherVectorProduct::new(policy, params_in, &batch.observations, cfg.damping)?;
    let x = conjugate_gradient(|v| fvp.apply(v).expect("fvp"), g.as_slice(), cfg.cg_iters, 1e-10);
    let quad = fvp.quad_form(&x)?;
    if quad <= 0.0 || !quad.is_finite() {
        return Ok(rejected(0.0));
    }
    let full_scale = (2.0 * cfg.max_kl / quad).sqrt();

    let old_dists = policy.dists_for(params_in, &batch.observations)?;
    let frames: Vec<usize> = (0..batch.num_frames()).collect();
    // Plain importance surrogate mean(rho * A); exactly mean(A) at the incumbent.
    let surrogate_at = |p: &ParamVector| -> Result<f64> {
        let mut acc = 0.0;
        for (&f, a) in frames.iter().zip(&adv) {
            let dist = policy.dist_at(p, &batch.observations[f])?;
            let rho = (policy::log_prob(&dist, &batch.actions[f]) - batch.old_log_probs[f]).exp();
            acc += rho * a;
        }
        Ok(acc / frames.len() as f64)
    };
    let l_old = surrogate_at(params_in)?;

    for j in 0..=cfg.max_backtracks {
        let step = full_scale * cfg.backtrack_coef.powi(j as i32);
        let candidate = ParamVector(add_scaled(params_in.as_slice(), step, x.as_slice()));
        let new_dists = policy.dists_for(&candidate, &batch.observations)?;
        let kl = policy::mean_kl_over_states(&old_dists, &new_dists)?;
        let l_new = surrogate_at(&candidate)?;
        if kl <= cfg.max_kl && l_new > l_old {
            return Ok(ExpertResult {
                params: candidate,
                adam_state: adam_in.clone(),
                epochs_run: 1,
                final_mean_kl: kl,
                surrogate_gain: l_new - l_old,
                trace: vec![EpochTrace {
                    epoch: 0,
                    mean_kl: kl,
                    clip_fraction: 0.0,
                    surrogate: l_new,
                }],
            });
        }
    }
    Ok(rejected(0.0))
}

/// Expose the CG direction for geometry tests: solves `(F + dI) x = g`.
#[cfg(test)]
pub(crate) fn natural_step_direction(
    policy: &GaussianPolicy,
    params: &ParamVector,
    batch: &Batch,
    g: &[f64],
    damping: f64,
    cg_iters: usize,
) -> Result<Vec<f64>> {
    let fvp = FisherVectorProduct::new(policy, params, &batch.observations, damping)?;
    Ok(conjugate_gradient(|v| fvp.apply(v).expect("fvp"), g, cg_iters, 1e-10))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fisher::dense::dense_fisher;
    use crate::linalg::dot;
    use crate::nn::AdamState;
    use crate::optim::test_support::small_batch;

    fn adam_for(policy: &GaussianPolicy) -> AdamState {
        AdamState::zeros(policy.param_count())
    }

    #[test]
    fn zero_advantages_leave_params_unchanged() {
        let (policy, params, batch, mut adv) = small_batch(&[5], 2, 8, 21);
        adv.advantages.iter_mut().for_each(|a| *a = 0.0);
        let cfg = TrpoConfig::default();
        let out = trpo_update(&policy, &params, &adam_for(&policy), &batch, &adv, &cfg).unwrap();
        assert_eq!(out.params, params);
        assert_eq!(out.epochs_run, 0);
    }

    #[test]
    fn accepted_step_respects_kl_bound_and_improves_surrogate() {
        let (policy, params, batch, adv) = small_batch(&[6], 2, 16, 22);
        let cfg = TrpoConfig {
            max_kl: 0.01,
            ..TrpoConfig::default()
        };
        let out = trpo_update(&policy, &params, &adam_for(&policy), &batch, &adv, &cfg).unwrap();
        assert_eq!(out.epochs_run, 1, "expected acceptance on a fresh batch");
        assert!(out.final_mean_kl <= cfg.max_kl + 1e-12);
        assert!(out.surrogate_gain > 0.0);
    }

    #[test]
    fn direction_matches_dense_solve_on_tiny_policy() {
        let (policy, params, batch, adv) = small_batch(&[3], 1, 10, 23);
        assert!(policy.param_count() <= 40);
        let advn = normalize_advantages(&adv.advantages);
        let g = policy_gradient(&policy, &params, &batch, &advn).unwrap();
        let damping = 0.05;
        let x = natural_step_direction(&policy, &params, &batch, g.as_slice(), damping, 200)
            .unwrap();
        let dense = dense_fisher(&policy, &params, &batch.observations, damping, 1e-5).unwrap();
        let x_dense = dense.solve(g.as_slice()).unwrap();
        // Angle between the two directions below 1e-3 rad.
        let cosine = dot(&x, &x_dense) / (norm2(&x) * norm2(&x_dense));
        let angle = cosine.clamp(-1.0, 1.0).acos();
        assert!(angle < 1e-3, "angle {angle}");
    }
}
