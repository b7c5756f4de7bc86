//! The consensus engine: K-expert fan-out over one shared batch, the two
//! aggregation operators, optimizer-state carry rules, budget allocation,
//! and the compute-matched selection/averaging baselines.
//!
//! Experts start from identical copies of the incumbent's parameters and
//! Adam state and differ only in minibatch shuffle seed (seed `k` for expert
//! `k`), so every difference between them is optimization path, not data.

use crate::error::{Error, Result};
use crate::fisher::{
    generation_diagnostics, natural_gradient_direction, DiagnosticsRecord,
};
use crate::linalg::{add_scaled, kahan_sum, sub};
use crate::nn::{AdamState, ParamVector};
use crate::optim::{
    policy_gradient, ppo_update, ExpertResult, FisherVectorProduct, PpoConfig,
};
use crate::policy::{self, GaussianDist, GaussianPolicy};
use crate::rollout::{normalize_advantages, AdvantageSet, Batch};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    ParamAvg,
    Logop,
}

impl Aggregation {
    pub fn id(&self) -> &'static str {
        match self {
            Aggregation::ParamAvg => "param_avg",
            Aggregation::Logop => "logop",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "param_avg" => Ok(Aggregation::ParamAvg),
            "logop" => Ok(Aggregation::Logop),
            other => Err(Error::Config(format!("unknown aggregation '{other}'"))),
        }
    }
}

/// Which Adam moments survive aggregation into the next generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CarryMode {
    Incumbent,
    Reset,
    BestExpert,
    Average,
}

impl CarryMode {
    pub fn id(&self) -> &'static str {
        match self {
            CarryMode::Incumbent => "incumbent",
            CarryMode::Reset => "reset",
            CarryMode::BestExpert => "best_expert",
            CarryMode::Average => "average",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "incumbent" => Ok(CarryMode::Incumbent),
            "reset" => Ok(CarryMode::Reset),
            "best_expert" => Ok(CarryMode::BestExpert),
            "average" => Ok(CarryMode::Average),
            other => Err(Error::Config(format!("unknown carry mode '{other}'"))),
        }
    }

    pub const ALL: [CarryMode; 4] = [
        CarryMode::Incumbent,
        CarryMode::Reset,
        CarryMode::BestExpert,
        CarryMode::Average,
    ];
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CapoConfig {
    pub k: usize,
    pub aggregation: Aggregation,
    pub carry_mode: CarryMode,
    /// Fraction of the total frame budget spent on plain-PPO warmup.
    pub warmup_frac: f64,
    /// Trust-region bound for the distillation line search.
    pub trust_delta: f64,
    pub distill_epochs: usize,
    pub distill_lr: f64,
}

impl Default for CapoConfig {
    fn default() -> Self {
        CapoConfig {
            k: 4,
            aggregation: Aggregation::Logop,
            carry_mode: CarryMode::Incumbent,
            warmup_frac: 0.10,
            trust_delta: 0.04,
            distill_epochs: 20,
            distill_lr: 3e-4,
        }
    }
}

impl CapoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config("consensus aggregation needs k >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config("warmup_frac must be in [0, 1)".into()));
        }
        if self.trust_delta <= 0.0 {
            return Err(Error::Config("trust_delta must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ConsensusResult {
    pub params: ParamVector,
    /// Mean over experts of the analytic mean KL(incumbent, expert).
    pub mean_expert_kl: f64,
    /// Analytic mean KL(incumbent, consensus).
    pub consensus_kl: f64,
    /// Gradient steps spent by distillation (0 for parameter averaging).
    pub distill_steps_used: usize,
    pub trust_region_ok: bool,
}

/// `theta_t + (1/K) sum_k (theta_k - theta_t)`: the arithmetic mean of the
/// expert vectors.
pub fn aggregate_param_avg(
    incumbent: &ParamVector,
    experts: &[ParamVector],
) -> Result<ParamVector> {
    let mean = ParamVector::mean_of(experts)?;
    if mean.len() != incumbent.len() {
        return Err(Error::ShapeMismatch {
            context: "param averaging",
            expected: incumbent.len(),
            got: mean.len(),
        });
    }
    Ok(mean)
}

/// Logarithmic opinion pool of same-state Gaussians: precision-weighted mean
/// and harmonic-mean precision, element-wise per action dimension.
pub fn logop_pool(dists: &[GaussianDist]) -> Result<GaussianDist> {
    let first = dists.first().ok_or(Error::Empty("expert distributions"))?;
    let dim = first.dim();
    let k = dists.len() as f64;
    let mut mean = vec![0.0; dim];
    let mut std = vec![0.0; dim];
    for d in 0..dim {
        let mut precision_sum = 0.0;
        let mut weighted_mean = 0.0;
        for dist in dists {
            debug_assert_eq!(dist.dim(), dim);
            let p = 1.0 / (dist.std[d] * dist.std[d]);
            precision_sum += p;
            weighted_mean += dist.mean[d] * p;
        }
        mean[d] = weighted_mean / precision_sum;
        // sigma_q^{-2} = (1/K) sum_k sigma_k^{-2}
        std[d] = (k / precision_sum).sqrt();
    }
    Ok(GaussianDist::new(mean, std))
}

/// Mean over states of `KL(q_s || pi_theta(s))` and its gradient in the
/// policy parameters.
fn distill_loss_grad(
    policy: &GaussianPolicy,
    params: &ParamVector,
    states: &[Vec<f64>],
    targets: &[GaussianDist],
) -> Result<(f64, Vec<f64>)> {
    let mlp = &policy.mean_net;
    let mlp_len = mlp.param_count();
    let mlp_params = policy.mlp_params(params);
    let log_std = policy.log_std(params);
    let sigma: Vec<f64> = log_std.iter().map(|&ls| policy.std_from_log(ls)).collect();
    let masks: Vec<f64> = log_std
        .iter()
        .map(|&ls| policy.log_std_grad_mask(ls))
        .collect();
    let n = states.len() as f64;
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    for (state, target) in states.iter().zip(targets) {
        let trace = crate::nn::forward_traced(mlp, mlp_params, state)?;
        let dist = GaussianDist::new(trace.output().to_vec(), sigma.clone());
        loss += policy::kl_diag_gaussian(target, &dist) / n;
        let (d_mean, d_log_std) = policy::kl_grads_wrt_q(target, &dist);
        let d_mean: Vec<f64> = d_mean.iter().map(|g| g / n).collect();
        crate::nn::backward_traced(mlp, mlp_params, &trace, &d_mean, &mut grad[..mlp_len])?;
        for d in 0..policy.action_dim {
            grad[mlp_len + d] += d_log_std[d] * masks[d] / n;
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub result: ConsensusResult,
    pub loss_at_init: f64,
    pub loss_after: f64,
}

/// Distill the per-state analytic pool into a single network.
///
/// Initialization is the parameter average of the experts; descent steps that
/// would increase the loss are rejected with a halved rate, so the final loss
/// never exceeds the initial one. A backtracking line search along
/// `theta - theta_t` then halves the step until the mean KL to the incumbent
/// is within `trust_delta`.
pub fn distill_logop(
    policy: &GaussianPolicy,
    incumbent_params: &ParamVector,
    experts: &[ParamVector],
    states: &[Vec<f64>],
    cfg: &CapoConfig,
) -> Result<DistillOutcome> {
    if states.is_empty() {
        return Err(Error::Empty("distillation states"));
    }
    let old_dists = policy.dists_for(incumbent_params, states)?;
    let expert_kls = expert_mean_kls(policy, incumbent_params, experts, &old_dists, states)?;
    let mean_expert_kl = crate::linalg::mean(&expert_kls);

    // Degenerate width: the pool of one expert is that expert.
    if experts.len() == 1 {
        let consensus_kl =
            policy::mean_kl_over_states(&old_dists, &policy.dists_for(&experts[0], states)?)?;
        return Ok(DistillOutcome {
            result: ConsensusResult {
                params: experts[0].clone(),
                mean_expert_kl,
                consensus_kl,
                distill_steps_used: 0,
                trust_region_ok: consensus_kl <= cfg.trust_delta,
            },
            loss_at_init: 0.0,
            loss_after: 0.0,
        });
    }

    // Per-state pooled targets.
    let expert_dists: Vec<Vec<GaussianDist>> = experts
        .iter()
        .map(|p| policy.dists_for(p, states))
        .collect::<Result<_>>()?;
    let targets: Vec<GaussianDist> = (0..states.len())
        .map(|s| {
            let at_state: Vec<GaussianDist> =
                expert_dists.iter().map(|d| d[s].clone()).collect();
            logop_pool(&at_state)
        })
        .collect::<Result<_>>()?;

    let init = aggregate_param_avg(incumbent_params, experts)?;
    let fallback = |reason: &str| -> Result<DistillOutcome> {
        eprintln!("warning: distillation aborted ({reason}); falling back to parameter averaging");
        let consensus_kl =
            policy::mean_kl_over_states(&old_dists, &policy.dists_for(&init, states)?)?;
        Ok(DistillOutcome {
            result: ConsensusResult {
                params: init.clone(),
                mean_expert_kl,
                consensus_kl,
                distill_steps_used: 0,
                trust_region_ok: consensus_kl <= cfg.trust_delta,
            },
            loss_at_init: f64::NAN,
            loss_after: f64::NAN,
        })
    };

    let (mut loss, mut grad) = match distill_loss_grad(policy, &init, states, &targets) {
        Ok(v) if v.0.is_finite() => v,
        _ => return fallback("non-finite loss at initialization"),
    };
    let loss_at_init = loss;
    let mut params = init.clone();
    let mut lr = cfg.distill_lr;
    let mut steps = 0;
    for _ in 0..cfg.distill_epochs {
        steps += 1;
        let trial = ParamVector(add_scaled(params.as_slice(), -lr, &grad));
        match distill_loss_grad(policy, &trial, states, &targets) {
            Ok((trial_loss, trial_grad)) if trial_loss.is_finite() => {
                if trial_loss <= loss {
                    params = trial;
                    loss = trial_loss;
                    grad = trial_grad;
                } else {
                    lr *= 0.5;
                }
            }
            _ => return fallback("non-finite loss during descent"),
        }
    }
    let loss_after = loss;

    // Trust-region guard: halve the step along (theta - theta_t) until the
    // mean KL to the incumbent is feasible. The zero step has KL 0, so this
    // terminates.
    let delta = sub(params.as_slice(), incumbent_params.as_slice());
    let mut scale = 1.0;
    let (final_params, consensus_kl) = loop {
        let candidate = ParamVector(add_scaled(incumbent_params.as_slice(), scale, &delta));
        let kl = policy::mean_kl_over_states(&old_dists, &policy.dists_for(&candidate, states)?)?;
        if kl <= cfg.trust_delta {
            break (candidate, kl);
        }
        scale *= 0.5;
        if scale < 1e-12 {
            break (incumbent_params.clone(), 0.0);
        }
    };
    Ok(DistillOutcome {
        result: ConsensusResult {
            params: final_params,
            mean_expert_kl,
            consensus_kl,
            distill_steps_used: steps,
            trust_region_ok: consensus_kl <= cfg.trust_delta,
        },
        loss_at_init,
        loss_after,
    })
}

fn expert_mean_kls(
    policy: &GaussianPolicy,
    _incumbent: &ParamVector,
    experts: &[ParamVector],
    old_dists: &[GaussianDist],
    states: &[Vec<f64>],
) -> Result<Vec<f64>> {
    experts
        .iter()
        .map(|p| policy::mean_kl_over_states(old_dists, &policy.dists_for(p, states)?))
        .collect()
}

/// Which Adam state enters the next generation.
///
/// `incumbent` keeps the pre-generation moments with only the step counter
/// advanced (by the steps the first expert ran, so the learning-rate
/// schedule still decays); `reset` zeroes the moments; `best_expert` takes
/// that expert's state verbatim; `average` takes element-wise mean moments.
pub fn carry_optimizer_state(
    mode: CarryMode,
    incumbent: &AdamState,
    expert_adams: &[AdamState],
    best_idx: usize,
) -> Result<AdamState> {
    if expert_adams.is_empty() {
        return Err(Error::Empty("expert optimizer states"));
    }
    if best_idx >= expert_adams.len() {
        return Err(Error::BadIndex {
            index: best_idx,
            len: expert_adams.len(),
        });
    }
    let advanced = expert_adams[0].step_count.max(incumbent.step_count);
    Ok(match mode {
        CarryMode::Incumbent => AdamState {
            first_moment: incumbent.first_moment.clone(),
            second_moment: incumbent.second_moment.clone(),
            step_count: advanced,
        },
        CarryMode::Reset => AdamState {
            first_moment: vec![0.0; incumbent.len()],
            second_moment: vec![0.0; incumbent.len()],
            step_count: advanced,
        },
        CarryMode::BestExpert => expert_adams[best_idx].clone(),
        CarryMode::Average => {
            let n = incumbent.len();
            let mut first = vec![0.0; n];
            let mut second = vec![0.0; n];
            for adam in expert_adams {
                for j in 0..n {
                    first[j] += adam.first_moment[j];
                    second[j] += adam.second_moment[j];
                }
            }
            let inv = 1.0 / expert_adams.len() as f64;
            first.iter_mut().for_each(|m| *m *= inv);
            second.iter_mut().for_each(|v| *v *= inv);
            AdamState {
                first_moment: first,
                second_moment: second,
                step_count: advanced,
            }
        }
    })
}

/// Index of the expert with the highest surrogate gain; ties break to the
/// lowest index.
pub fn best_of_k_index(experts: &[ExpertResult]) -> Result<usize> {
    if experts.is_empty() {
        return Err(Error::Empty("experts"));
    }
    let mut best = 0;
    for (i, e) in experts.iter().enumerate().skip(1) {
        if e.surrogate_gain > experts[best].surrogate_gain {
            best = i;
        }
    }
    Ok(best)
}

/// The selection baseline: the expert with the highest surrogate gain.
pub fn best_of_k_select(experts: &[ExpertResult]) -> Result<&ExpertResult> {
    Ok(&experts[best_of_k_index(experts)?])
}

/// Uniform average of epoch-boundary snapshots from a single PPO run.
pub fn swa_average(snapshots: &[ParamVector]) -> Result<ParamVector> {
    ParamVector::mean_of(snapshots)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BudgetPlan {
    pub warmup_frames: u64,
    pub warmup_generations: u64,
    pub generations: u64,
}

/// Split the frame budget: warmup takes `round(f_w * C)` truncated to whole
/// batches, the rest divides into generations of one batch each.
pub fn allocate_budget(
    total_frames: u64,
    warmup_frac: f64,
    frames_per_generation: u64,
) -> Result<BudgetPlan> {
    if frames_per_generation == 0 {
        return Err(Error::Budget("frames per generation must be positive".into()));
    }
    if !(0.0..1.0).contains(&warmup_frac) {
        return Err(Error::Budget("warmup fraction must be in [0, 1)".into()));
    }
    if frames_per_generation as f64 > (1.0 - warmup_frac) * total_frames as f64 {
        return Err(Error::Budget(format!(
            "batch of {frames_per_generation} frames exceeds the post-warmup budget"
        )));
    }
    let warmup_target = (warmup_frac * total_frames as f64).round() as u64;
    let warmup_generations = warmup_target / frames_per_generation;
    let warmup_frames = warmup_generations * frames_per_generation;
    let remaining = total_frames - warmup_frames;
    if frames_per_generation > remaining {
        return Err(Error::Budget(format!(
            "batch of {frames_per_generation} frames exceeds the {remaining} remaining after warmup"
        )));
    }
    Ok(BudgetPlan {
        warmup_frames,
        warmup_generations,
        generations: remaining / frames_per_generation,
    })
}

/// Fan one batch out to `k` PPO replicas (shuffle seeds `1..=k`) on copies of
/// the incumbent, in parallel. Results come back in expert order regardless
/// of scheduling, so concurrent and serial runs are identical.
pub fn expert_fanout(
    policy: &GaussianPolicy,
    incumbent_params: &ParamVector,
    incumbent_adam: &AdamState,
    batch: &Batch,
    advantages: &AdvantageSet,
    ppo_cfg: &PpoConfig,
    k: usize,
) -> Result<Vec<ExpertResult>> {
    let results: Vec<Result<ExpertResult>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (1..=k)
            .map(|seed| {
                let cfg = PpoConfig {
                    shuffle_seed: seed as u64,
                    ..ppo_cfg.clone()
                };
                scope.spawn(move || {
                    ppo_update(policy, incumbent_params, incumbent_adam, batch, advantages, &cfg)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("expert thread panicked"))
            .collect()
    });
    results
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e| Error::ExpertFailed {
                seed: (i + 1) as u64,
                source: Box::new(e),
            })
        })
        .collect()
}

/// Fisher-diagnostics settings for a generation.
#[derive(Debug, Clone, Copy)]
pub struct DiagSettings {
    pub damping: f64,
    pub cg_iters: usize,
    pub generation: usize,
}

#[derive(Debug, Clone)]
pub struct GenerationOutcome {
    pub consensus: ConsensusResult,
    pub experts: Vec<ExpertResult>,
    pub carried_adam: AdamState,
    pub diagnostics: Option<DiagnosticsRecord>,
    pub distill_loss_at_init: Option<f64>,
    pub distill_loss_after: Option<f64>,
}

/// One full consensus generation: fan out K experts from the incumbent,
/// aggregate, carry optimizer state, and (optionally) decompose everything
/// against the incumbent's Fisher geometry.
#[allow(clippy::too_many_arguments)]
pub fn run_generation(
    policy: &GaussianPolicy,
    incumbent_params: &ParamVector,
    incumbent_adam: &AdamState,
    batch: &Batch,
    advantages: &AdvantageSet,
    capo_cfg: &CapoConfig,
    ppo_cfg: &PpoConfig,
    diag: Option<DiagSettings>,
) -> Result<GenerationOutcome> {
    let experts = expert_fanout(
        policy,
        incumbent_params,
        incumbent_adam,
        batch,
        advantages,
        ppo_cfg,
        capo_cfg.k,
    )?;
    let expert_params: Vec<ParamVector> = experts.iter().map(|e| e.params.clone()).collect();
    let states = &batch.observations;
    let old_dists = policy.dists_for(incumbent_params, states)?;

    let (consensus, distill_init, distill_after) = match capo_cfg.aggregation {
        Aggregation::ParamAvg => {
            let params = if capo_cfg.k == 1 {
                expert_params[0].clone()
            } else {
                aggregate_param_avg(incumbent_params, &expert_params)?
            };
            let kls = expert_mean_kls(policy, incumbent_params, &expert_params, &old_dists, states)?;
            let consensus_kl =
                policy::mean_kl_over_states(&old_dists, &policy.dists_for(&params, states)?)?;
            (
                ConsensusResult {
                    params,
                    mean_expert_kl: crate::linalg::mean(&kls),
                    consensus_kl,
                    distill_steps_used: 0,
                    trust_region_ok: consensus_kl <= capo_cfg.trust_delta,
                },
                None,
                None,
            )
        }
        Aggregation::Logop => {
            let outcome =
                distill_logop(policy, incumbent_params, &expert_params, states, capo_cfg)?;
            (
                outcome.result,
                Some(outcome.loss_at_init),
                Some(outcome.loss_after),
            )
        }
    };

    let best_idx = best_of_k_index(&experts)?;
    let expert_adams: Vec<AdamState> = experts.iter().map(|e| e.adam_state.clone()).collect();
    let carried_adam =
        carry_optimizer_state(capo_cfg.carry_mode, incumbent_adam, &expert_adams, best_idx)?;

    let diagnostics = match diag {
        Some(settings) => {
            let adv_norm = normalize_advantages(&advantages.advantages);
            let g = policy_gradient(policy, incumbent_params, batch, &adv_norm)?;
            let fvp =
                FisherVectorProduct::new(policy, incumbent_params, states, settings.damping)?;
            match natural_gradient_direction(&fvp, g.as_slice(), settings.cg_iters, 1e-10) {
                Ok(dir) => {
                    let deltas: Vec<Vec<f64>> = expert_params
                        .iter()
                        .map(|p| sub(p.as_slice(), incumbent_params.as_slice()))
                        .collect();
                    let consensus_delta =
                        sub(consensus.params.as_slice(), incumbent_params.as_slice());
                    Some(generation_diagnostics(
                        &fvp,
                        &dir,
                        settings.generation,
                        &deltas,
                        &consensus_delta,
                    )?)
                }
                Err(Error::ZeroGradient) => None,
                Err(e) => return Err(e),
            }
        }
        None => None,
    };

    Ok(GenerationOutcome {
        consensus,
        experts,
        carried_adam,
        diagnostics,
        distill_loss_at_init: distill_init,
        distill_loss_after: distill_after,
    })
}

/// Per-state consensus bound: the KL from the incumbent to the pooled dist
/// never exceeds the mean KL to the experts (certified analytically per
/// state; used as a run-time assertion in tests).
pub fn logop_per_state_bound(
    incumbent: &GaussianDist,
    experts: &[GaussianDist],
) -> Result<(f64, f64)> {
    let pooled = logop_pool(experts)?;
    let kl_pool = policy::kl_diag_gaussian(incumbent, &pooled);
    let mean_kl = kahan_sum(
        experts
            .iter()
            .map(|e| policy::kl_diag_gaussian(incumbent, e)),
    ) / experts.len() as f64;
    Ok((kl_pool, mean_kl))
}
