//! Acceptance suite: one test per criterion, property checks first, then the
//! desk-scale trend reproductions (PointMass, 100k frames, 3 seeds). The
//! trend tests share fixtures through `OnceLock` so each training
//! configuration runs exactly once per suite invocation.
//!
//! Run with `cargo test --test acceptance` (add `-- --nocapture` for the
//! per-criterion detail lines). The full suite trains several complete
//! agents and takes tens of minutes on a laptop core.

use capo_core::consensus::logop_pool;
use capo_core::envs::EnvKind;
use capo_core::fisher::dense::{dense_fisher, DenseMatrix};
use capo_core::fisher::{decompose_update, FisherOp, NatGradDirection};
use capo_core::harness::{
    epoch_sweep, progress_csv, run_experiment, summarize_finals, EpochSweep, ExperimentConfig,
    Method, Phase, RunRecord,
};
use capo_core::linalg::{dot, norm2, sub};
use capo_core::nn::{loss_gradient, mlp_forward, orthogonal_init, MlpSpec, ParamVector};
use capo_core::optim::conjugate_gradient;
use capo_core::oracle::theorem_sweep;
use capo_core::policy::{log_prob, GaussianDist, GaussianPolicy};
use capo_core::rng::RngStream;
use capo_core::rollout::{compute_gae, Batch};
use std::sync::OnceLock;

const SEEDS: [u64; 3] = [1, 2, 3];

fn pass(id: u32, name: &str, detail: String) {
    println!("ACCEPTANCE {id:02} {name}: PASS ({detail})");
}

// ---------------------------------------------------------------------------
// Criterion 1: theorem certification over 1e4 randomized Gaussian instances,
// zero violations at 1e-12 tolerance, under 10 seconds.

#[test]
fn c01_theorem_certification() {
    let report = theorem_sweep(10_000, 0);
    assert_eq!(
        report.violations, 0,
        "violations with worst margins {:?}",
        report.worst_margins
    );
    assert!(
        report.elapsed_seconds < 10.0,
        "sweep took {:.2} s",
        report.elapsed_seconds
    );
    pass(
        1,
        "theorem_certification",
        format!(
            "10000 instances, 0 violations, {:.3} s, worst margins {:?}",
            report.elapsed_seconds, report.worst_margins
        ),
    );
}

// ---------------------------------------------------------------------------
// Dense-oracle instances shared by criteria 2 and 3: small policies with the
// exact (finite-difference) Fisher, no damping.

struct DenseInstance {
    fisher: DenseMatrix,
    dir: NatGradDirection,
    g: Vec<f64>,
    delta: Vec<f64>,
}

fn dense_instances() -> Vec<DenseInstance> {
    let mut rng = RngStream::named(2024, "dense-instances");
    let mut out = Vec::with_capacity(100);
    let mut case = 0usize;
    while out.len() < 100 {
        case += 1;
        let hidden: &[usize] = match case % 3 {
            0 => &[6],
            1 => &[8, 6],
            _ => &[10, 8],
        };
        let obs_dim = 3 + case % 2;
        let policy = GaussianPolicy::new(obs_dim, hidden, 2);
        let n = policy.param_count();
        assert!(n <= 200, "instance has {n} params");
        let mut params = policy.init_params(1.0, 1.0, 0.0, rng.next_u64());
        let mlp_len = policy.mean_net.param_count();
        for d in 0..policy.action_dim {
            params.0[mlp_len + d] = rng.range(-0.5, 0.5);
        }
        // Rank needs states * action_dim + action_dim >= param count (the
        // log-std rows repeat across states).
        let states: Vec<Vec<f64>> = (0..96)
            .map(|_| (0..obs_dim).map(|_| rng.normal()).collect())
            .collect();
        let fisher = dense_fisher(&policy, &params, &states, 0.0, 1e-5).unwrap();
        let g: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let x = fisher.solve_refined(&g, 3).unwrap();
        if fisher.relative_residual(&x, &g) > 1e-10 {
            continue; // numerically singular Fisher: F^{-1} g is not well posed
        }
        let fx = fisher.matvec(&x);
        let norm = dot(&x, &fx).sqrt();
        let dir = NatGradDirection {
            d_hat: x.iter().map(|v| v / norm).collect(),
            f_d_hat: fx.iter().map(|v| v / norm).collect(),
            nat_grad_norm: norm,
        };
        let delta: Vec<f64> = (0..n).map(|_| 0.1 * rng.normal()).collect();
        out.push(DenseInstance {
            fisher,
            dir,
            g,
            delta,
        });
    }
    out
}

static DENSE: OnceLock<Vec<DenseInstance>> = OnceLock::new();

fn dense() -> &'static [DenseInstance] {
    DENSE.get_or_init(dense_instances)
}

#[test]
fn c02_fisher_pythagoras() {
    let mut worst = 0.0f64;
    for (i, inst) in dense().iter().enumerate() {
        let d = decompose_update(&inst.fisher, &inst.dir, &inst.delta);
        let quad = dot(&inst.delta, &inst.fisher.apply_vec(&inst.delta));
        let split = d.c * d.c + d.waste_norm_sq;
        let rel = (quad - split).abs() / quad;
        assert!(rel < 1e-6, "instance {i}: relative gap {rel}");
        worst = worst.max(rel);
    }
    pass(
        2,
        "fisher_pythagoras",
        format!("100 dense instances, worst relative gap {worst:.3e}"),
    );
}

#[test]
fn c03_first_order_identity() {
    let mut worst = 0.0f64;
    for (i, inst) in dense().iter().enumerate() {
        let d = decompose_update(&inst.fisher, &inst.dir, &inst.delta);
        let lhs = dot(&inst.g, &inst.delta);
        let rhs = d.c * inst.dir.nat_grad_norm;
        let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-12);
        assert!(rel < 1e-6, "instance {i}: {lhs} vs {rhs} (rel {rel})");
        worst = worst.max(rel);
    }
    pass(
        3,
        "first_order_identity",
        format!("100 dense instances, worst relative error {worst:.3e}"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: the closed-form pool matches grid product-and-normalize.

fn grid_pool(dists: &[GaussianDist]) -> (f64, f64) {
    let (lo, hi, n) = (-24.0, 24.0, 48_001);
    let h = (hi - lo) / (n - 1) as f64;
    let k = dists.len() as f64;
    let (mut mass, mut mean, mut second) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let x = lo + i as f64 * h;
        let log_g: f64 = dists.iter().map(|d| log_prob(d, &[x]) / k).sum();
        let g = log_g.exp();
        let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        mass += w * g;
        mean += w * g * x;
        second += w * g * x * x;
    }
    mean /= mass;
    second /= mass;
    (mean, (second - mean * mean).sqrt())
}

#[test]
fn c04_logop_matches_grid_quadrature() {
    let mut rng = RngStream::named(4, "logop-grid");
    let mut worst = 0.0f64;
    for case in 0..100 {
        let (a, b) = if case % 10 == 0 {
            // Equal-variance degeneracy: the pool must coincide with plain
            // averaging of the dists.
            let s = rng.range(0.3, 2.0);
            (
                GaussianDist::new(vec![rng.range(-2.0, 2.0)], vec![s]),
                GaussianDist::new(vec![rng.range(-2.0, 2.0)], vec![s]),
            )
        } else {
            (
                GaussianDist::new(vec![rng.range(-2.0, 2.0)], vec![rng.range(0.3, 2.0)]),
                GaussianDist::new(vec![rng.range(-2.0, 2.0)], vec![rng.range(0.3, 2.0)]),
            )
        };
        let pooled = logop_pool(&[a.clone(), b.clone()]).unwrap();
        if (a.std[0] - b.std[0]).abs() < 1e-12 {
            let avg_mean = 0.5 * (a.mean[0] + b.mean[0]);
            assert!((pooled.mean[0] - avg_mean).abs() < 1e-12);
            assert!((pooled.std[0] - a.std[0]).abs() < 1e-12);
        }
        let (gm, gs) = grid_pool(&[a, b]);
        let dm = (pooled.mean[0] - gm).abs();
        let ds = (pooled.std[0] - gs).abs();
        assert!(dm < 1e-4 && ds < 1e-4, "case {case}: dm {dm} ds {ds}");
        worst = worst.max(dm).max(ds);
    }
    pass(
        4,
        "logop_grid_quadrature",
        format!("100 pairs incl. equal-variance degeneracy, worst gap {worst:.3e}"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: reverse-mode gradients vs central finite differences.

#[test]
fn c05_gradient_correctness() {
    let mut rng = RngStream::named(5, "grad-fd");
    let mut worst = 0.0f64;
    for case in 0..50 {
        let dims: Vec<usize> = match case % 4 {
            0 => vec![4],
            1 => vec![6, 3],
            2 => vec![3, 5, 2],
            _ => vec![8],
        };
        let spec = MlpSpec::new(2 + case % 3, &dims, 1 + case % 3);
        let mut params = orthogonal_init(&spec, &vec![1.0; spec.num_layers()], case as u64);
        for p in &mut params.0 {
            *p += 0.2 * rng.normal();
        }
        let inputs: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..spec.input_dim).map(|_| rng.normal()).collect())
            .collect();
        let weights: Vec<f64> = (0..spec.output_dim).map(|_| rng.range(0.4, 1.6)).collect();
        let shift: Vec<f64> = (0..spec.output_dim).map(|_| rng.range(-0.5, 0.5)).collect();
        let value_of = |outs: &[Vec<f64>]| -> f64 {
            outs.iter()
                .map(|o| {
                    o.iter()
                        .zip(weights.iter().zip(&shift))
                        .map(|(y, (w, s))| w * (y - s) * (y - s) + 0.1 * (y * 1.3).sin())
                        .sum::<f64>()
                })
                .sum()
        };
        let (_, grad) = loss_gradient(&spec, &params, &inputs, |outs| {
            let v = value_of(outs);
            let d = outs
                .iter()
                .map(|o| {
                    o.iter()
                        .zip(weights.iter().zip(&shift))
                        .map(|(y, (w, s))| 2.0 * w * (y - s) + 0.13 * (y * 1.3).cos())
                        .collect()
                })
                .collect();
            (v, d)
        })
        .unwrap();
        let h = 1e-5;
        for j in 0..params.len() {
            let mut plus = params.clone();
            plus.0[j] += h;
            let mut minus = params.clone();
            minus.0[j] -= h;
            let eval = |p: &ParamVector| -> f64 {
                let outs: Vec<Vec<f64>> = inputs
                    .iter()
                    .map(|x| mlp_forward(&spec, p.as_slice(), x).unwrap())
                    .collect();
                value_of(&outs)
            };
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = grad[j];
            let rel = (a - fd).abs() / (a.abs() + fd.abs() + 1e-6);
            assert!(rel < 1e-4, "net {case} coord {j}: ad {a} fd {fd} rel {rel}");
            worst = worst.max(rel);
        }
    }
    pass(
        5,
        "gradient_correctness",
        format!("50 nets, every coordinate within 1e-4 (worst {worst:.3e})"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: GAE equals the O(N^2) brute-force sum.

fn random_episode_batch(rng: &mut RngStream, horizon: usize) -> Batch {
    let n = horizon;
    let mut terminated = vec![false; n];
    let mut truncated = vec![false; n];
    let mut bootstrap = vec![None; n];
    for f in 0..n {
        let u = rng.uniform();
        if u < 0.1 {
            terminated[f] = true;
        } else if u < 0.2 {
            truncated[f] = true;
            bootstrap[f] = Some(rng.normal());
        }
    }
    if !terminated[n - 1] && bootstrap[n - 1].is_none() {
        bootstrap[n - 1] = Some(rng.normal());
    }
    Batch {
        num_envs: 1,
        horizon,
        obs_dim: 1,
        action_dim: 1,
        observations: vec![vec![0.0]; n],
        actions: vec![vec![0.0]; n],
        old_log_probs: vec![0.0; n],
        rewards: (0..n).map(|_| rng.normal()).collect(),
        value_predictions: (0..n).map(|_| rng.normal()).collect(),
        terminated,
        truncated,
        bootstrap_values: bootstrap,
    }
}

/// Independent oracle: explicit forward sum of (gamma*lambda)^l * delta_{t+l}
/// up to and including the episode boundary.
fn gae_double_loop(batch: &Batch, gamma: f64, lambda: f64) -> Vec<f64> {
    let h = batch.horizon;
    let mut adv = vec![0.0; h];
    for t in 0..h {
        let mut acc = 0.0;
        let mut w = 1.0;
        for l in t..h {
            let v_next = if batch.terminated[l] {
                0.0
            } else if batch.truncated[l] || l == h - 1 {
                batch.bootstrap_values[l].unwrap()
            } else {
                batch.value_predictions[l + 1]
            };
            let delta = batch.rewards[l] + gamma * v_next - batch.value_predictions[l];
            acc += w * delta;
            if batch.terminated[l] || batch.truncated[l] {
                break;
            }
            w *= gamma * lambda;
        }
        adv[t] = acc;
    }
    adv
}

#[test]
fn c06_gae_brute_force() {
    let mut rng = RngStream::named(6, "gae-acceptance");
    let mut worst = 0.0f64;
    for case in 0..200 {
        let horizon = 1 + (rng.below(64) as usize);
        let batch = random_episode_batch(&mut rng, horizon);
        let fast = compute_gae(&batch, 0.99, 0.95).unwrap();
        let slow = gae_double_loop(&batch, 0.99, 0.95);
        for f in 0..horizon {
            let gap = (fast.advantages[f] - slow[f]).abs();
            assert!(gap < 1e-12, "case {case} frame {f}: gap {gap}");
            worst = worst.max(gap);
        }
    }
    pass(
        6,
        "gae_brute_force",
        format!("200 episodes (len <= 64, random done flags), worst gap {worst:.3e}"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: conjugate gradient residuals on random SPD systems.

#[test]
fn c07_cg_residuals() {
    let mut rng = RngStream::named(7, "cg-acceptance");
    let mut worst = 0.0f64;
    for case in 0..100 {
        let n = 2 + (rng.below(49) as usize);
        let b_mat: Vec<f64> = (0..n * n).map(|_| rng.normal()).collect();
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += b_mat[k * n + i] * b_mat[k * n + j];
                }
                a[i * n + j] = acc / n as f64 + if i == j { 0.1 } else { 0.0 };
            }
        }
        let apply = |v: &[f64]| -> Vec<f64> {
            (0..n).map(|i| dot(&a[i * n..(i + 1) * n], v)).collect()
        };
        let rhs: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let x = conjugate_gradient(&apply, &rhs, 20 * n, 1e-10);
        let rel = norm2(&sub(&apply(&x), &rhs)) / norm2(&rhs);
        assert!(rel < 1e-8, "case {case} dim {n}: residual {rel}");
        worst = worst.max(rel);
    }
    pass(
        7,
        "cg_residuals",
        format!("100 SPD systems (dim <= 50), worst relative residual {worst:.3e}"),
    );
}

// ---------------------------------------------------------------------------
// Trend fixtures: full PointMass runs at 100k frames, 3 seeds.

fn pointmass_cfg(method: Method) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::for_method(method, EnvKind::PointMass);
    cfg.total_frames = 100_000;
    cfg.seeds = SEEDS.to_vec();
    cfg
}

fn mean_final(records: &[RunRecord]) -> f64 {
    summarize_finals(&records.iter().map(|r| r.final_return).collect::<Vec<_>>())
        .unwrap()
        .mean
}

static EPOCH_SWEEP: OnceLock<EpochSweep> = OnceLock::new();

/// PPO on PointMass at E in {4, 10, 40} with diagnostics; also the PPO and
/// compute-matched deep baselines for criterion 11 (diagnostics never touch
/// the random streams, and the K*E epoch path is byte-compatible with plain
/// PPO at E' = K*E, which `c09` asserts bitwise).
fn epoch_sweep_fixture() -> &'static EpochSweep {
    EPOCH_SWEEP.get_or_init(|| {
        epoch_sweep(&pointmass_cfg(Method::Ppo), &[4, 10, 40], &SEEDS).expect("epoch sweep")
    })
}

static CAPO_AVG_PM: OnceLock<Vec<RunRecord>> = OnceLock::new();

fn capo_avg_fixture() -> &'static [RunRecord] {
    CAPO_AVG_PM.get_or_init(|| {
        let mut cfg = pointmass_cfg(Method::CapoAvg);
        cfg.diagnostics = true;
        SEEDS
            .iter()
            .map(|&s| run_experiment(&cfg, s).expect("capo_avg run"))
            .collect()
    })
}

static CAPO_LOGOP_K2: OnceLock<Vec<RunRecord>> = OnceLock::new();
static CAPO_LOGOP_K8: OnceLock<Vec<RunRecord>> = OnceLock::new();

fn capo_logop_fixture(k: usize) -> &'static [RunRecord] {
    let cell = if k == 2 { &CAPO_LOGOP_K2 } else { &CAPO_LOGOP_K8 };
    cell.get_or_init(|| {
        let mut cfg = pointmass_cfg(Method::CapoLogop);
        cfg.capo.k = k;
        SEEDS
            .iter()
            .map(|&s| run_experiment(&cfg, s).expect("capo_logop run"))
            .collect()
    })
}

// ---------------------------------------------------------------------------
// Criterion 8: trust-region contracts across full PointMass runs.

#[test]
fn c08_trust_region_contract() {
    // TRPO: every accepted step ends with mean KL <= max_kl.
    let trpo_cfg = {
        let mut cfg = pointmass_cfg(Method::Trpo);
        cfg.seeds = vec![1];
        cfg
    };
    let trpo_run = run_experiment(&trpo_cfg, 1).unwrap();
    let mut accepted = 0;
    for row in &trpo_run.rows {
        assert_eq!(row.trust_ok, Some(true), "generation {}", row.generation);
        if row.epochs_run == 1 {
            accepted += 1;
            assert!(
                row.mean_kl <= trpo_cfg.trpo.max_kl + 1e-12,
                "generation {}: KL {} over {}",
                row.generation,
                row.mean_kl,
                trpo_cfg.trpo.max_kl
            );
        }
    }
    assert!(accepted > 0, "no TRPO step was ever accepted");

    // CAPO-LogOP: every generation ends within the distillation guard.
    let logop_runs = capo_logop_fixture(2);
    let delta = pointmass_cfg(Method::CapoLogop).capo.trust_delta;
    let mut guarded = 0;
    for record in logop_runs {
        for row in &record.rows {
            if row.phase == Phase::Main {
                assert_eq!(row.trust_ok, Some(true), "generation {}", row.generation);
                assert!(
                    row.mean_kl <= delta + 1e-12,
                    "generation {}: KL {} over {}",
                    row.generation,
                    row.mean_kl,
                    delta
                );
                guarded += 1;
            }
        }
    }
    pass(
        8,
        "trust_region_contract",
        format!("{accepted} accepted TRPO steps, {guarded} guarded consensus generations"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: byte-identical progress.csv for identical (config, seed).

#[test]
fn c09_determinism() {
    for method in Method::ALL {
        let mut cfg = ExperimentConfig::for_method(method, EnvKind::PointMass);
        cfg.total_frames = 3 * 1024;
        cfg.num_envs = 4;
        cfg.horizon = 256;
        cfg.eval_episodes = 3;
        cfg.ppo.epochs = 3;
        cfg.ppo.minibatches = 8;
        cfg.capo.k = 2;
        cfg.capo.warmup_frac = if method.is_capo() { 0.34 } else { 0.0 };
        cfg.diagnostics = true;
        let a = progress_csv(&run_experiment(&cfg, 17).unwrap());
        let b = progress_csv(&run_experiment(&cfg, 17).unwrap());
        assert_eq!(a.as_bytes(), b.as_bytes(), "{} diverged", method.id());
    }

    // The compute-matched deep baseline is byte-compatible with plain PPO at
    // K*E epochs (shared code path, differing config) — the premise for
    // sharing the epoch-sweep fixture in criteria 10 and 11. Value-fit
    // epochs track the forced policy epoch count in both framings.
    let mut kx = ExperimentConfig::for_method(Method::PpoKx, EnvKind::PointMass);
    kx.total_frames = 3 * 1024;
    kx.num_envs = 4;
    kx.horizon = 256;
    kx.eval_episodes = 3;
    kx.ppo.epochs = 3;
    kx.ppo.minibatches = 8;
    kx.value.epochs = 3;
    kx.capo.k = 2;
    let mut deep = kx.clone();
    deep.method = Method::Ppo;
    deep.ppo.epochs = kx.capo.k * kx.ppo.epochs;
    deep.value.epochs = deep.ppo.epochs;
    let a = progress_csv(&run_experiment(&kx, 23).unwrap());
    let b = progress_csv(&run_experiment(&deep, 23).unwrap());
    assert_eq!(a.as_bytes(), b.as_bytes(), "K*E path diverged from deep PPO");

    pass(
        9,
        "determinism",
        "all 7 methods byte-identical across reruns; K*E path byte-compatible with deep PPO"
            .to_string(),
    );
}

// ---------------------------------------------------------------------------
// Criterion 10: the depth dilemma at desk scale. The waste half holds with
// two orders of magnitude to spare. The return half is a KNOWN RED on the
// built-in tasks: they are smooth and truncation-only, the final-update KL
// at E=40 stays an order of magnitude below trust-region scale, and measured
// returns improve monotonically with depth at this budget (every seed, both
// tasks, with and without value-fit coupling). The assertion is kept as the
// documented contract rather than weakened to match the measurement.

#[test]
fn c10_depth_dilemma() {
    let sweep = epoch_sweep_fixture();
    let row = |e: usize| {
        sweep
            .rows
            .iter()
            .find(|r| r.epochs == e)
            .unwrap_or_else(|| panic!("missing E={e}"))
    };
    let (e4, e10, e40) = (row(4), row(10), row(40));
    assert!(
        e40.waste >= 3.0 * e4.waste,
        "waste grew only {:.2}x (E=4: {:.3e}, E=40: {:.3e})",
        e40.waste / e4.waste,
        e4.waste,
        e40.waste
    );
    assert!(
        e40.return_mean < e10.return_mean,
        "return at E=40 ({:.3}) did not fall below E=10 ({:.3})",
        e40.return_mean,
        e10.return_mean
    );
    pass(
        10,
        "depth_dilemma",
        format!(
            "waste x{:.1} from E=4 to E=40; returns E10 {:.2} vs E40 {:.2}",
            e40.waste / e4.waste,
            e10.return_mean,
            e40.return_mean
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 11: compute-matched depth degrades on both tasks. KNOWN RED for
// the same reason as the return half of c10: on these benign tasks the
// deeper baseline converges faster instead of collapsing (PPO-4x beat PPO on
// every seed of both tasks in calibration). Kept as the documented contract.

#[test]
fn c11_compute_matched_depth_degrades() {
    // PointMass: reuse the sweep fixture (E=10 is the PPO default; E=40 is
    // the byte-compatible K*E path, asserted in c09).
    let sweep = epoch_sweep_fixture();
    let ppo_pm = sweep.rows.iter().find(|r| r.epochs == 10).unwrap().return_mean;
    let kx_pm = sweep.rows.iter().find(|r| r.epochs == 40).unwrap().return_mean;
    assert!(
        kx_pm <= ppo_pm,
        "PointMass: deep {kx_pm:.3} did not degrade vs PPO {ppo_pm:.3}"
    );

    // Pendulum: direct runs of both methods.
    let mut ppo_cfg = ExperimentConfig::for_method(Method::Ppo, EnvKind::Pendulum);
    ppo_cfg.total_frames = 100_000;
    let ppo_pd: Vec<RunRecord> = SEEDS
        .iter()
        .map(|&s| run_experiment(&ppo_cfg, s).unwrap())
        .collect();
    let mut kx_cfg = ExperimentConfig::for_method(Method::PpoKx, EnvKind::Pendulum);
    kx_cfg.total_frames = 100_000;
    let kx_pd: Vec<RunRecord> = SEEDS
        .iter()
        .map(|&s| run_experiment(&kx_cfg, s).unwrap())
        .collect();
    let (ppo_pd, kx_pd) = (mean_final(&ppo_pd), mean_final(&kx_pd));
    assert!(
        kx_pd <= ppo_pd,
        "Pendulum: deep {kx_pd:.3} did not degrade vs PPO {ppo_pd:.3}"
    );
    pass(
        11,
        "compute_matched_depth_degrades",
        format!(
            "PointMass {kx_pm:.2} <= {ppo_pm:.2}; Pendulum {kx_pd:.2} <= {ppo_pd:.2}"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 12: parameter averaging reduces waste in most generations.

#[test]
fn c12_waste_reduction() {
    let runs = capo_avg_fixture();
    let mut below_one = 0usize;
    let mut total = 0usize;
    for record in runs {
        for diag in &record.diagnostics {
            if let Some(ratio) = diag.waste_reduction_ratio {
                total += 1;
                if ratio < 1.0 {
                    below_one += 1;
                }
            }
        }
    }
    assert!(total > 0, "no post-warmup consensus generations recorded");
    let share = below_one as f64 / total as f64;
    assert!(
        share >= 0.80,
        "waste reduced in only {below_one}/{total} generations ({share:.2})"
    );
    pass(
        12,
        "waste_reduction",
        format!("ratio < 1 in {below_one}/{total} post-warmup generations ({share:.2})"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 13: consensus quadratic KL never exceeds the expert mean.

#[test]
fn c13_consensus_kl_contraction() {
    let runs = capo_avg_fixture();
    let mut checked = 0usize;
    for record in runs {
        for diag in &record.diagnostics {
            if diag.experts.len() < 2 {
                continue;
            }
            let mean_quad: f64 = diag.experts.iter().map(|d| d.total_kl_quad).sum::<f64>()
                / diag.experts.len() as f64;
            assert!(
                diag.consensus.total_kl_quad <= mean_quad * (1.0 + 1e-9) + 1e-15,
                "generation {}: consensus {} vs expert mean {}",
                diag.generation,
                diag.consensus.total_kl_quad,
                mean_quad
            );
            checked += 1;
        }
    }
    assert!(checked > 0);
    pass(
        13,
        "consensus_kl_contraction",
        format!("{checked} generations, zero violations"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 14: width does not degrade.

#[test]
fn c14_width_does_not_degrade() {
    let k2 = mean_final(capo_logop_fixture(2));
    let k8 = mean_final(capo_logop_fixture(8));
    // "At least 90% of the K=2 return": with the nonpositive returns of
    // these tasks that bound is return(K8) >= return(K2) / 0.9.
    let bound = if k2 >= 0.0 { 0.9 * k2 } else { k2 / 0.9 };
    assert!(
        k8 >= bound,
        "K=8 return {k8:.3} degraded below the 90% bound {bound:.3} (K=2: {k2:.3})"
    );
    pass(
        14,
        "width_does_not_degrade",
        format!("K=2 {k2:.2}, K=8 {k8:.2}, bound {bound:.2}"),
    );
}
