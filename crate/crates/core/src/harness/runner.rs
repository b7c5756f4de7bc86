//! The per-seed training loop for all seven methods, plus deterministic
//! evaluation.
//!
//! All randomness in a run derives from the run seed through named
//! sub-streams (`env`, `policy-sample`, `shuffle`, `eval`, `init`), so
//! evaluation settings can change without perturbing training, and identical
//! `(config, seed)` pairs produce byte-identical artifacts.

use super::config::{ExperimentConfig, Method};
use crate::consensus::{
    allocate_budget, best_of_k_index, expert_fanout, run_generation, swa_average, CapoConfig,
    DiagSettings,
};
use crate::envs::{EnvKind, EnvState, VecEnv};
use crate::error::{Error, Result};
use crate::fisher::{generation_diagnostics, natural_gradient_direction, DiagnosticsRecord};
use crate::linalg::sub;
use crate::nn::{AdamState, ParamVector};
use crate::optim::{
    clipped_surrogate_loss, policy_gradient, ppo_update, ppo_update_with_snapshots, trpo_update,
    ExpertResult, FisherVectorProduct, PpoConfig,
};
use crate::policy::{self, GaussianPolicy};
use crate::rng::RngStream;
use crate::rollout::{collect_batch, compute_gae, fit_value, normalize_advantages, ValueFn};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Main,
}

impl Phase {
    pub fn id(&self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Main => "main",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GenerationRow {
    pub generation: usize,
    pub phase: Phase,
    pub frames: u64,
    pub eval_return: f64,
    /// Analytic mean KL(pi_t, pi_{t+1}) over the generation's batch states.
    pub mean_kl: f64,
    /// Clipped-surrogate objective gain of the applied update on the batch.
    pub surrogate_gain: f64,
    pub epochs_run: usize,
    /// Trust-region contract outcome where one applies (distillation guard,
    /// TRPO acceptance); empty otherwise.
    pub trust_ok: Option<bool>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceRow {
    pub generation: usize,
    pub expert: String,
    pub epoch: usize,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub surrogate: f64,
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub seed: u64,
    pub rows: Vec<GenerationRow>,
    pub diagnostics: Vec<DiagnosticsRecord>,
    pub traces: Vec<TraceRow>,
    pub final_return: f64,
}

/// Mean episodic return over deterministic mean-action episodes (sampling
/// behind the `stochastic_eval` flag).
pub fn evaluate(
    policy: &GaussianPolicy,
    params: &ParamVector,
    kind: EnvKind,
    episodes: usize,
    rng: &mut RngStream,
    stochastic: bool,
) -> Result<f64> {
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut env = EnvState::reset(kind, rng.next_u64());
        loop {
            let obs = env.observation();
            let dist = policy.dist_at(params, &obs)?;
            let action = if stochastic {
                policy::sample_action(&dist, rng)
            } else {
                dist.mean.clone()
            };
            let (next, step) = env.step(&action);
            total += step.reward;
            env = next;
            if step.terminated || step.truncated {
                break;
            }
        }
    }
    Ok(total / episodes as f64)
}

/// Outcome of one generation's policy update, before evaluation.
struct UpdateOutcome {
    params: ParamVector,
    adam: AdamState,
    epochs_run: usize,
    trust_ok: Option<bool>,
    traces: Vec<TraceRow>,
    diagnostics: Option<DiagnosticsRecord>,
}

fn expert_traces(generation: usize, label: &str, expert: &ExpertResult) -> Vec<TraceRow> {
    expert
        .trace
        .iter()
        .map(|t| TraceRow {
            generation,
            expert: label.to_string(),
            epoch: t.epoch,
            mean_kl: t.mean_kl,
            clip_fraction: t.clip_fraction,
            surrogate: t.surrogate,
        })
        .collect()
}

pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<RunRecord> {
    cfg.validate()?;
    let kind = cfg.env;
    let mut env_stream = RngStream::named(seed, "env");
    let mut sample_stream = RngStream::named(seed, "policy-sample");
    let mut shuffle_stream = RngStream::named(seed, "shuffle");
    let mut eval_stream = RngStream::named(seed, "eval");
    let mut init_stream = RngStream::named(seed, "init");

    let mut policy = GaussianPolicy::new(kind.obs_dim(), &cfg.net.hidden, kind.action_dim());
    policy.log_std_min = cfg.net.log_std_min;
    policy.log_std_max = cfg.net.log_std_max;
    let mut params = policy.init_params(
        cfg.net.hidden_gain,
        cfg.net.policy_head_gain,
        cfg.net.log_std_init,
        init_stream.next_u64(),
    );
    let mut adam = AdamState::zeros(policy.param_count());
    let value = ValueFn::new(kind.obs_dim(), &cfg.net.hidden);
    let mut value_params = value.init_params(
        cfg.net.hidden_gain,
        cfg.net.value_head_gain,
        init_stream.next_u64(),
    );
    let mut value_adam = AdamState::zeros(value.param_count());

    let batch_frames = cfg.batch_frames();
    let warmup_frac = if cfg.method.is_capo() {
        cfg.capo.warmup_frac
    } else {
        0.0
    };
    let plan = allocate_budget(cfg.total_frames, warmup_frac, batch_frames)?;
    let total_generations = plan.warmup_generations + plan.generations;

    // Resolve the anneal horizon: the step counter carried across
    // generations advances by one expert's worth of steps, so every method
    // sees the same schedule fraction at the same frame count.
    let chunks = cfg.ppo.chunks_per_epoch(batch_frames as usize) as u64;
    let per_gen_steps = match cfg.method {
        Method::PpoKx => (cfg.capo.k * cfg.ppo.epochs) as u64 * chunks,
        Method::Trpo => 0,
        _ => cfg.ppo.epochs as u64 * chunks,
    };
    let mut ppo_cfg = cfg.ppo.clone();
    ppo_cfg.anneal_total_steps = if ppo_cfg.lr_anneal {
        total_generations * per_gen_steps
    } else {
        0
    };
    let mut value_cfg = cfg.value.clone();
    // The compute-matched deep baseline forces E <- K*E; value-fit epochs
    // default to the (forced) policy epoch count unless pinned explicitly.
    if cfg.method == Method::PpoKx && value_cfg.epochs == cfg.ppo.epochs {
        value_cfg.epochs = cfg.capo.k * cfg.ppo.epochs;
    }
    let value_chunks = {
        let chunk = (batch_frames as usize).div_ceil(value_cfg.minibatches).max(1);
        (batch_frames as usize).div_ceil(chunk) as u64
    };
    value_cfg.anneal_total_steps = if cfg.ppo.lr_anneal {
        total_generations * value_cfg.epochs as u64 * value_chunks
    } else {
        0
    };

    let mut vec_env = VecEnv::new(kind, env_stream.next_u64(), cfg.num_envs);
    let mut rows = Vec::with_capacity(total_generations as usize);
    let mut diagnostics = Vec::new();
    let mut traces = Vec::new();
    let mut frames = 0u64;

    for generation in 0..total_generations as usize {
        let warmup = (generation as u64) < plan.warmup_generations;
        let phase = if warmup { Phase::Warmup } else { Phase::Main };
        let batch = collect_batch(
            &policy,
            &params,
            &value,
            &value_params,
            &mut vec_env,
            cfg.horizon,
            &mut sample_stream,
        )?;
        let advantages = compute_gae(&batch, cfg.gamma, cfg.gae_lambda)?;
        let incumbent = params.clone();

        // Random-policy Fisher norms are uninformative; skip the first
        // generation in trajectory diagnostics.
        let diag_settings = if cfg.diagnostics && generation >= 1 {
            Some(DiagSettings {
                damping: cfg.fisher.damping,
                cg_iters: cfg.fisher.cg_iters,
                generation,
            })
        } else {
            None
        };

        let outcome = if warmup || cfg.method == Method::Ppo {
            let expert_cfg = PpoConfig {
                shuffle_seed: shuffle_stream.next_u64(),
                ..ppo_cfg.clone()
            };
            let expert = ppo_update(&policy, &incumbent, &adam, &batch, &advantages, &expert_cfg)?;
            let label = if warmup { "warmup" } else { "policy" };
            single_update_outcome(
                &policy, &incumbent, &batch, &advantages, expert, label, generation,
                diag_settings,
            )?
        } else {
            match cfg.method {
                Method::Ppo => unreachable!("handled above"),
                Method::PpoKx => {
                    let expert_cfg = PpoConfig {
                        shuffle_seed: shuffle_stream.next_u64(),
                        epochs: cfg.capo.k * ppo_cfg.epochs,
                        ..ppo_cfg.clone()
                    };
                    let expert =
                        ppo_update(&policy, &incumbent, &adam, &batch, &advantages, &expert_cfg)?;
                    single_update_outcome(
                        &policy, &incumbent, &batch, &advantages, expert, "policy", generation,
                        diag_settings,
                    )?
                }
                Method::Trpo => {
                    let expert =
                        trpo_update(&policy, &incumbent, &adam, &batch, &advantages, &cfg.trpo)?;
                    let accepted = expert.epochs_run == 1;
                    let mut out = single_update_outcome(
                        &policy, &incumbent, &batch, &advantages, expert, "policy", generation,
                        diag_settings,
                    )?;
                    out.trust_ok = Some(if accepted {
                        out.traces
                            .last()
                            .is_none_or(|t| t.mean_kl <= cfg.trpo.max_kl + 1e-12)
                    } else {
                        true // rejected step leaves the incumbent: KL 0
                    });
                    out
                }
                Method::PpoSwa => {
                    let expert_cfg = PpoConfig {
                        shuffle_seed: shuffle_stream.next_u64(),
                        ..ppo_cfg.clone()
                    };
                    let mut snapshots = Vec::new();
                    let expert = ppo_update_with_snapshots(
                        &policy,
                        &incumbent,
                        &adam,
                        &batch,
                        &advantages,
                        &expert_cfg,
                        Some(&mut snapshots),
                    )?;
                    let averaged = if snapshots.is_empty() {
                        expert.params.clone()
                    } else {
                        swa_average(&snapshots)?
                    };
                    let mut out = single_update_outcome(
                        &policy, &incumbent, &batch, &advantages, expert, "policy", generation,
                        diag_settings,
                    )?;
                    // Deploy the trajectory average; keep the run's end-state
                    // optimizer moments.
                    out.diagnostics = match diag_settings {
                        Some(s) => single_delta_diagnostics(
                            &policy,
                            &incumbent,
                            &batch,
                            &advantages,
                            &[sub(averaged.as_slice(), incumbent.as_slice())],
                            &sub(averaged.as_slice(), incumbent.as_slice()),
                            s,
                        )?,
                        None => None,
                    };
                    out.params = averaged;
                    out
                }
                Method::BestOfK => {
                    let experts = expert_fanout(
                        &policy,
                        &incumbent,
                        &adam,
                        &batch,
                        &advantages,
                        &ppo_cfg,
                        cfg.capo.k,
                    )?;
                    let best = best_of_k_index(&experts)?;
                    let mut traces = Vec::new();
                    for (i, e) in experts.iter().enumerate() {
                        traces.extend(expert_traces(generation, &format!("{}", i + 1), e));
                    }
                    let diag = match diag_settings {
                        Some(s) => {
                            let deltas: Vec<Vec<f64>> = experts
                                .iter()
                                .map(|e| sub(e.params.as_slice(), incumbent.as_slice()))
                                .collect();
                            let winner = deltas[best].clone();
                            single_delta_diagnostics(
                                &policy,
                                &incumbent,
                                &batch,
                                &advantages,
                                &deltas,
                                &winner,
                                s,
                            )?
                        }
                        None => None,
                    };
                    let winner = &experts[best];
                    UpdateOutcome {
                        params: winner.params.clone(),
                        adam: winner.adam_state.clone(),
                        epochs_run: winner.epochs_run,
                        trust_ok: None,
                        traces,
                        diagnostics: diag,
                    }
                }
                Method::CapoAvg | Method::CapoLogop => {
                    let capo_cfg = CapoConfig {
                        aggregation: cfg.method.aggregation().expect("capo method"),
                        ..cfg.capo.clone()
                    };
                    let gen_out = run_generation(
                        &policy,
                        &incumbent,
                        &adam,
                        &batch,
                        &advantages,
                        &capo_cfg,
                        &ppo_cfg,
                        diag_settings,
                    )?;
                    let mut traces = Vec::new();
                    for (i, e) in gen_out.experts.iter().enumerate() {
                        traces.extend(expert_traces(generation, &format!("{}", i + 1), e));
                    }
                    let epochs_run =
                        gen_out.experts.iter().map(|e| e.epochs_run).max().unwrap_or(0);
                    UpdateOutcome {
                        params: gen_out.consensus.params.clone(),
                        adam: gen_out.carried_adam.clone(),
                        epochs_run,
                        trust_ok: if cfg.method == Method::CapoLogop {
                            Some(gen_out.consensus.trust_region_ok)
                        } else {
                            None
                        },
                        traces,
                        diagnostics: gen_out.diagnostics,
                    }
                }
            }
        };

        params = outcome.params;
        adam = outcome.adam;
        traces.extend(outcome.traces);
        if let Some(d) = outcome.diagnostics {
            diagnostics.push(d);
        }

        // Uniform post-update metrics against the incumbent.
        let old_dists = policy.dists_for(&incumbent, &batch.observations)?;
        let new_dists = policy.dists_for(&params, &batch.observations)?;
        let mean_kl = policy::mean_kl_over_states(&old_dists, &new_dists)?;
        let adv_norm = normalize_advantages(&advantages.advantages);
        let (loss_old, _) =
            clipped_surrogate_loss(&policy, &incumbent, &batch, &adv_norm, cfg.ppo.clip_eps)?;
        let (loss_new, _) =
            clipped_surrogate_loss(&policy, &params, &batch, &adv_norm, cfg.ppo.clip_eps)?;
        let surrogate_gain = loss_old - loss_new;

        // Value function trained once per generation, shared by all experts.
        let fit = fit_value(
            &value,
            &value_params,
            &value_adam,
            &batch.observations,
            &advantages.returns,
            &value_cfg,
            shuffle_stream.next_u64(),
        )?;
        value_params = fit.params;
        value_adam = fit.adam;

        frames += batch_frames;
        let eval_return = evaluate(
            &policy,
            &params,
            kind,
            cfg.eval_episodes,
            &mut eval_stream,
            cfg.stochastic_eval,
        )?;
        rows.push(GenerationRow {
            generation,
            phase,
            frames,
            eval_return,
            mean_kl,
            surrogate_gain,
            epochs_run: outcome.epochs_run,
            trust_ok: outcome.trust_ok,
        });
    }

    let final_return = rows.last().map_or(f64::NAN, |r| r.eval_return);
    Ok(RunRecord {
        seed,
        rows,
        diagnostics,
        traces,
        final_return,
    })
}

/// Run every seed in the config, sequentially and independently.
pub fn run_seeds(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    cfg.seeds.iter().map(|&s| run_experiment(cfg, s)).collect()
}

#[allow(clippy::too_many_arguments)]
fn single_update_outcome(
    policy: &GaussianPolicy,
    incumbent: &ParamVector,
    batch: &crate::rollout::Batch,
    advantages: &crate::rollout::AdvantageSet,
    expert: ExpertResult,
    label: &str,
    generation: usize,
    diag: Option<DiagSettings>,
) -> Result<UpdateOutcome> {
    let traces = expert_traces(generation, label, &expert);
    let diagnostics = match diag {
        Some(s) => {
            let delta = sub(expert.params.as_slice(), incumbent.as_slice());
            single_delta_diagnostics(
                policy,
                incumbent,
                batch,
                advantages,
                std::slice::from_ref(&delta),
                &delta,
                s,
            )?
        }
        None => None,
    };
    Ok(UpdateOutcome {
        params: expert.params,
        adam: expert.adam_state,
        epochs_run: expert.epochs_run,
        trust_ok: None,
        traces,
        diagnostics,
    })
}

fn single_delta_diagnostics(
    policy: &GaussianPolicy,
    incumbent: &ParamVector,
    batch: &crate::rollout::Batch,
    advantages: &crate::rollout::AdvantageSet,
    deltas: &[Vec<f64>],
    consensus_delta: &[f64],
    settings: DiagSettings,
) -> Result<Option<DiagnosticsRecord>> {
    let adv_norm = normalize_advantages(&advantages.advantages);
    let g = policy_gradient(policy, incumbent, batch, &adv_norm)?;
    let fvp = FisherVectorProduct::new(policy, incumbent, &batch.observations, settings.damping)?;
    match natural_gradient_direction(&fvp, g.as_slice(), settings.cg_iters, 1e-10) {
        Ok(dir) => Ok(Some(generation_diagnostics(
            &fvp,
            &dir,
            settings.generation,
            deltas,
            consensus_delta,
        )?)),
        Err(Error::ZeroGradient) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Mean and standard error (sample std over sqrt(n)) of final returns.
#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub se: Option<f64>,
    pub finals: Vec<f64>,
}

pub fn summarize(records: &[RunRecord]) -> Result<Summary> {
    summarize_finals(&records.iter().map(|r| r.final_return).collect::<Vec<_>>())
}

pub fn summarize_finals(finals: &[f64]) -> Result<Summary> {
    if finals.is_empty() {
        return Err(Error::Empty("run records"));
    }
    let n = finals.len();
    let mean = crate::linalg::mean(finals);
    let se = if n >= 2 {
        let var =
            finals.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n as f64 - 1.0);
        Some(var.sqrt() / (n as f64).sqrt())
    } else {
        None
    };
    Ok(Summary {
        mean,
        se,
        finals: finals.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(method: Method) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::for_method(method, EnvKind::PointMass);
        cfg.total_frames = 3 * 128;
        cfg.num_envs = 2;
        cfg.horizon = 64;
        cfg.eval_episodes = 2;
        cfg.ppo.epochs = 2;
        cfg.ppo.minibatches = 4;
        cfg.capo.k = 2;
        cfg.capo.warmup_frac = 0.0;
        cfg
    }

    #[test]
    fn tiny_budget_gives_exact_generation_count() {
        let cfg = tiny_cfg(Method::Ppo);
        let record = run_experiment(&cfg, 1).unwrap();
        assert_eq!(record.rows.len(), 3);
        let frames: Vec<u64> = record.rows.iter().map(|r| r.frames).collect();
        assert_eq!(frames, vec![128, 256, 384]);
        assert!(record.final_return.is_finite());
    }

    #[test]
    fn all_methods_run_a_tiny_budget() {
        let mut frame_sequences = Vec::new();
        for method in Method::ALL {
            let record = run_experiment(&tiny_cfg(method), 2)
                .unwrap_or_else(|e| panic!("{}: {e}", method.id()));
            assert_eq!(record.rows.len(), 3, "{}", method.id());
            for row in &record.rows {
                assert!(row.eval_return.is_finite());
                assert!(row.mean_kl >= 0.0);
            }
            frame_sequences.push(record.rows.iter().map(|r| r.frames).collect::<Vec<_>>());
        }
        // Frame-budget parity: every method consumes identical env frames.
        for seq in &frame_sequences {
            assert_eq!(seq, &frame_sequences[0]);
        }
    }

    #[test]
    fn capo_warmup_rows_are_marked() {
        let mut cfg = tiny_cfg(Method::CapoAvg);
        cfg.total_frames = 4 * 128;
        cfg.capo.warmup_frac = 0.25;
        let record = run_experiment(&cfg, 3).unwrap();
        assert_eq!(record.rows[0].phase, Phase::Warmup);
        assert!(record.rows[1..].iter().all(|r| r.phase == Phase::Main));
    }

    #[test]
    fn logop_rows_carry_the_trust_flag() {
        let mut cfg = tiny_cfg(Method::CapoLogop);
        cfg.capo.distill_epochs = 5;
        let record = run_experiment(&cfg, 4).unwrap();
        for row in &record.rows {
            assert_eq!(row.trust_ok, Some(true));
            assert!(row.mean_kl <= cfg.capo.trust_delta + 1e-12);
        }
    }

    #[test]
    fn determinism_across_runs() {
        let cfg = tiny_cfg(Method::CapoLogop);
        let a = run_experiment(&cfg, 9).unwrap();
        let b = run_experiment(&cfg, 9).unwrap();
        assert_eq!(a.rows.len(), b.rows.len());
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!(x.eval_return.to_bits(), y.eval_return.to_bits());
            assert_eq!(x.mean_kl.to_bits(), y.mean_kl.to_bits());
        }
    }

    #[test]
    fn eval_episode_count_does_not_touch_training() {
        let mut a_cfg = tiny_cfg(Method::Ppo);
        a_cfg.eval_episodes = 2;
        let mut b_cfg = tiny_cfg(Method::Ppo);
        b_cfg.eval_episodes = 5;
        let a = run_experiment(&a_cfg, 7).unwrap();
        let b = run_experiment(&b_cfg, 7).unwrap();
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!(x.mean_kl.to_bits(), y.mean_kl.to_bits());
            assert_eq!(x.surrogate_gain.to_bits(), y.surrogate_gain.to_bits());
        }
    }

    #[test]
    fn diagnostics_skip_the_first_generation() {
        let mut cfg = tiny_cfg(Method::CapoAvg);
        cfg.diagnostics = true;
        let record = run_experiment(&cfg, 5).unwrap();
        assert!(!record.diagnostics.is_empty());
        assert!(record.diagnostics.iter().all(|d| d.generation >= 1));
    }

    #[test]
    fn ppo_kx_multiplies_epochs() {
        let mut cfg = tiny_cfg(Method::PpoKx);
        cfg.capo.k = 4;
        cfg.ppo.target_kl = 0.0;
        let record = run_experiment(&cfg, 6).unwrap();
        assert!(record.rows.iter().all(|r| r.epochs_run == 8));
        let max_epoch = record.traces.iter().map(|t| t.epoch).max().unwrap();
        assert_eq!(max_epoch, 7);
    }

    #[test]
    fn summaries() {
        let s = summarize_finals(&[1.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert!((s.se.unwrap() - 1.0).abs() < 1e-12);
        let s = summarize_finals(&[5.0]).unwrap();
        assert_eq!(s.mean, 5.0);
        assert!(s.se.is_none());
        assert!(summarize_finals(&[]).is_err());

        // Independent mean/SE computation on synthetic 8-seed data.
        let finals = [3.0, -1.0, 2.5, 0.5, 4.0, 1.5, -0.5, 2.0];
        let s = summarize_finals(&finals).unwrap();
        let mean = finals.iter().sum::<f64>() / 8.0;
        let var = finals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 7.0;
        assert!((s.mean - mean).abs() < 1e-12);
        assert!((s.se.unwrap() - (var / 8.0).sqrt()).abs() < 1e-12);
    }
}
