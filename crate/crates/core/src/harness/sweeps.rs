//! The ablation sweeps: epoch count, expert width, clip threshold, KL early
//! stopping, warmup budget, and optimizer-state carry. Each sweep runs full
//! experiments over a grid and emits a summary table plus plot-ready
//! long-format rows.

use super::config::{ExperimentConfig, Method};
use super::runner::{run_experiment, summarize_finals, RunRecord};
use crate::consensus::CarryMode;
use crate::error::{Error, Result};
use crate::linalg::mean;
use std::fmt::Write as _;

pub const EPOCH_SWEEP_VALUES: [usize; 7] = [2, 4, 6, 10, 15, 20, 40];
pub const K_SWEEP_VALUES: [usize; 4] = [2, 4, 8, 16];
pub const CLIP_SWEEP_VALUES: [f64; 4] = [0.1, 0.2, 0.3, 0.5];
pub const TARGET_KL_SWEEP_VALUES: [f64; 4] = [0.0, 0.02, 0.04, 0.08];
pub const WARMUP_SWEEP_VALUES: [f64; 4] = [0.0, 0.05, 0.10, 0.20];

/// One per-generation observation for the long-format CSV.
#[derive(Debug, Clone)]
pub struct LongRow {
    pub method: &'static str,
    pub param: &'static str,
    pub value: String,
    pub seed: u64,
    pub generation: usize,
    pub frames: u64,
    pub eval_return: f64,
}

fn long_rows(
    method: &'static str,
    param: &'static str,
    value: &str,
    records: &[RunRecord],
) -> Vec<LongRow> {
    let mut rows = Vec::new();
    for record in records {
        for r in &record.rows {
            rows.push(LongRow {
                method,
                param,
                value: value.to_string(),
                seed: record.seed,
                generation: r.generation,
                frames: r.frames,
                eval_return: r.eval_return,
            });
        }
    }
    rows
}

pub fn long_csv(rows: &[LongRow]) -> String {
    let mut out = String::from("method,param,value,seed,generation,frames,eval_return\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.method, r.param, r.value, r.seed, r.generation, r.frames, r.eval_return
        )
        .expect("string write");
    }
    out
}

/// Final-update Fisher decomposition and final return at each epoch count.
#[derive(Debug, Clone)]
pub struct EpochSweepRow {
    pub epochs: usize,
    pub return_mean: f64,
    pub return_se: Option<f64>,
    /// Mean over seeds of the signal coefficient squared, `c^2`.
    pub signal_c2: f64,
    /// Mean over seeds of `||eps||_F^2`.
    pub waste: f64,
    /// `signal_c2 + waste`.
    pub total_kl: f64,
    pub alpha: f64,
    pub cos_f: f64,
}

#[derive(Debug, Clone, Default)]
pub struct EpochSweep {
    pub rows: Vec<EpochSweepRow>,
    pub long: Vec<LongRow>,
}

/// PPO with diagnostics at each epoch count; the decomposition of the final
/// update (last diagnosed generation) is averaged across seeds.
pub fn epoch_sweep(
    base: &ExperimentConfig,
    epoch_values: &[usize],
    seeds: &[u64],
) -> Result<EpochSweep> {
    let mut sweep = EpochSweep::default();
    for &epochs in epoch_values {
        let mut cfg = base.clone();
        cfg.method = Method::Ppo;
        cfg.diagnostics = true;
        // Value-fit epochs default to the policy epoch count, so the sweep
        // varies the optimization depth of both heads together unless the
        // base config pinned [value] epochs explicitly.
        if cfg.value.epochs == cfg.ppo.epochs {
            cfg.value.epochs = epochs;
        }
        cfg.ppo.epochs = epochs;
        cfg.seeds = seeds.to_vec();

        let mut finals = Vec::new();
        let mut c2 = Vec::new();
        let mut waste = Vec::new();
        let mut alpha = Vec::new();
        let mut cos_f = Vec::new();
        let mut records = Vec::new();
        for &seed in seeds {
            let record = run_experiment(&cfg, seed)?;
            finals.push(record.final_return);
            let last = record
                .diagnostics
                .last()
                .ok_or_else(|| Error::Config("epoch sweep needs diagnostics".into()))?;
            let d = &last.consensus;
            c2.push(d.c * d.c);
            waste.push(d.waste_norm_sq);
            alpha.push(d.alpha);
            cos_f.push(d.cos_f);
            records.push(record);
        }
        let summary = summarize_finals(&finals)?;
        sweep.rows.push(EpochSweepRow {
            epochs,
            return_mean: summary.mean,
            return_se: summary.se,
            signal_c2: mean(&c2),
            waste: mean(&waste),
            total_kl: mean(&c2) + mean(&waste),
            alpha: mean(&alpha),
            cos_f: mean(&cos_f),
        });
        sweep
            .long
            .extend(long_rows("ppo", "epochs", &epochs.to_string(), &records));
    }
    Ok(sweep)
}

pub fn epoch_sweep_csv(sweep: &EpochSweep) -> String {
    let mut out = String::from("E,return_mean,return_se,signal_c2,waste,total_kl,alpha,cos_f\n");
    for r in &sweep.rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epochs,
            r.return_mean,
            r.return_se.map(|s| s.to_string()).unwrap_or_default(),
            r.signal_c2,
            r.waste,
            r.total_kl,
            r.alpha,
            r.cos_f
        )
        .expect("string write");
    }
    out
}

/// A generic grid cell: one method at one parameter value.
#[derive(Debug, Clone)]
pub struct GridRow {
    pub method: &'static str,
    pub value: String,
    pub return_mean: f64,
    pub return_se: Option<f64>,
    /// Extra named columns (e.g. gradient-step accounting).
    pub extra: Vec<(&'static str, f64)>,
}

#[derive(Debug, Clone, Default)]
pub struct GridSweep {
    pub param: &'static str,
    pub rows: Vec<GridRow>,
    pub long: Vec<LongRow>,
}

pub fn grid_csv(sweep: &GridSweep) -> String {
    let extra_names: Vec<&str> = sweep
        .rows
        .first()
        .map(|r| r.extra.iter().map(|(n, _)| *n).collect())
        .unwrap_or_default();
    let mut out = format!("method,{},return_mean,return_se", sweep.param);
    for name in &extra_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for r in &sweep.rows {
        write!(
            out,
            "{},{},{},{}",
            r.method,
            r.value,
            r.return_mean,
            r.return_se.map(|s| s.to_string()).unwrap_or_default()
        )
        .expect("string write");
        for (_, v) in &r.extra {
            write!(out, ",{v}").expect("string write");
        }
        out.push('\n');
    }
    out
}

fn run_cell(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    method: Method,
    param: &'static str,
    value: &str,
    extra: Vec<(&'static str, f64)>,
    sweep: &mut GridSweep,
) -> Result<()> {
    let mut finals = Vec::new();
    let mut records = Vec::new();
    for &seed in seeds {
        let record = run_experiment(cfg, seed)?;
        finals.push(record.final_return);
        records.push(record);
    }
    let summary = summarize_finals(&finals)?;
    sweep.rows.push(GridRow {
        method: method.id(),
        value: value.to_string(),
        return_mean: summary.mean,
        return_se: summary.se,
        extra,
    });
    sweep.long.extend(long_rows(method.id(), param, value, &records));
    Ok(())
}

/// Width scaling at fixed epoch count: consensus methods across `K`.
pub fn k_sweep(
    base: &ExperimentConfig,
    k_values: &[usize],
    seeds: &[u64],
    methods: &[Method],
) -> Result<GridSweep> {
    let mut sweep = GridSweep {
        param: "k",
        ..GridSweep::default()
    };
    for &method in methods {
        for &k in k_values {
            let mut cfg = base.clone();
            cfg.method = method;
            if let Some(agg) = method.aggregation() {
                cfg.capo.aggregation = agg;
            }
            cfg.capo.k = k;
            cfg.seeds = seeds.to_vec();
            let grad_steps = (k * cfg.ppo.epochs * cfg.ppo.minibatches) as f64;
            run_cell(
                &cfg,
                seeds,
                method,
                "k",
                &k.to_string(),
                vec![("grad_steps_per_gen", grad_steps)],
                &mut sweep,
            )?;
        }
    }
    Ok(sweep)
}

/// Clip-threshold ablation across methods.
pub fn clip_sweep(
    base: &ExperimentConfig,
    clip_values: &[f64],
    seeds: &[u64],
    methods: &[Method],
) -> Result<GridSweep> {
    let mut sweep = GridSweep {
        param: "clip_eps",
        ..GridSweep::default()
    };
    for &method in methods {
        for &clip in clip_values {
            let mut cfg = base.clone();
            cfg.method = method;
            if let Some(agg) = method.aggregation() {
                cfg.capo.aggregation = agg;
            }
            cfg.ppo.clip_eps = clip;
            cfg.seeds = seeds.to_vec();
            run_cell(&cfg, seeds, method, "clip_eps", &clip.to_string(), vec![], &mut sweep)?;
        }
    }
    Ok(sweep)
}

/// KL early-stopping ablation (0 disables the stop).
pub fn target_kl_sweep(
    base: &ExperimentConfig,
    kl_values: &[f64],
    seeds: &[u64],
    methods: &[Method],
) -> Result<GridSweep> {
    let mut sweep = GridSweep {
        param: "target_kl",
        ..GridSweep::default()
    };
    for &method in methods {
        for &tkl in kl_values {
            let mut cfg = base.clone();
            cfg.method = method;
            if let Some(agg) = method.aggregation() {
                cfg.capo.aggregation = agg;
            }
            cfg.ppo.target_kl = tkl;
            cfg.seeds = seeds.to_vec();
            run_cell(&cfg, seeds, method, "target_kl", &tkl.to_string(), vec![], &mut sweep)?;
        }
    }
    Ok(sweep)
}

/// Warmup-budget ablation for the consensus methods.
pub fn warmup_sweep(
    base: &ExperimentConfig,
    warmup_values: &[f64],
    seeds: &[u64],
    methods: &[Method],
) -> Result<GridSweep> {
    let mut sweep = GridSweep {
        param: "warmup_frac",
        ..GridSweep::default()
    };
    for &method in methods {
        if !method.is_capo() {
            return Err(Error::Config(format!(
                "warmup sweep applies to consensus methods, got {}",
                method.id()
            )));
        }
        for &frac in warmup_values {
            let mut cfg = base.clone();
            cfg.method = method;
            cfg.capo.aggregation = method.aggregation().expect("capo method");
            cfg.capo.warmup_frac = frac;
            cfg.seeds = seeds.to_vec();
            run_cell(&cfg, seeds, method, "warmup_frac", &frac.to_string(), vec![], &mut sweep)?;
        }
    }
    Ok(sweep)
}

/// Optimizer-state carry ablation for the consensus methods.
pub fn carry_sweep(
    base: &ExperimentConfig,
    seeds: &[u64],
    methods: &[Method],
) -> Result<GridSweep> {
    let mut sweep = GridSweep {
        param: "carry_mode",
        ..GridSweep::default()
    };
    for &method in methods {
        if !method.is_capo() {
            return Err(Error::Config(format!(
                "carry sweep applies to consensus methods, got {}",
                method.id()
            )));
        }
        for mode in CarryMode::ALL {
            let mut cfg = base.clone();
            cfg.method = method;
            cfg.capo.aggregation = method.aggregation().expect("capo method");
            cfg.capo.carry_mode = mode;
            cfg.seeds = seeds.to_vec();
            run_cell(&cfg, seeds, method, "carry_mode", mode.id(), vec![], &mut sweep)?;
        }
    }
    Ok(sweep)
}
