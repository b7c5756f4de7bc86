//! Command-line harness for the consensus policy-optimization laboratory.

use anyhow::{bail, Context, Result};
use capo_core::envs::EnvKind;
use capo_core::harness::{self, apply_overrides, parse_sections, ExperimentConfig, Method};
use capo_core::oracle;
use clap::{Args, Parser, Subcommand};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "capo",
    version,
    about = "Consensus aggregation for trust-region policy optimization: train, sweep, and verify at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one method on one environment across seeds.
    Run(RunArgs),
    /// PPO epoch-count sweep with final-update Fisher decomposition.
    SweepEpochs(SweepArgs),
    /// Expert-width sweep at fixed epoch count.
    SweepK(SweepArgs),
    /// Clip-threshold ablation.
    SweepClip(SweepArgs),
    /// KL early-stopping ablation.
    SweepTargetKl(SweepArgs),
    /// Warmup-budget ablation for the consensus methods.
    SweepWarmup(SweepArgs),
    /// Optimizer-state carry ablation for the consensus methods.
    SweepCarry(SweepArgs),
    /// Certify the consensus-improvement clauses on randomized
    /// exponential-family instances; exits nonzero on any violation.
    CheckTheory {
        #[arg(long, default_value_t = 10_000)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Derive the surrogate gradient from a quadratic toy objective
        /// instead of a random linear functional.
        #[arg(long)]
        toy_objective: bool,
    },
    /// Aggregate summary.json files from run directories into a comparison
    /// table.
    Summarize {
        /// Run directories (each containing summary.json).
        dirs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config file (sectioned key = value text).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated seed list override.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Config overrides, section.key=value (repeatable).
    #[arg(long = "set", value_name = "section.key=value")]
    sets: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Environment id (pointmass | pendulum).
    #[arg(long)]
    env: Option<String>,
    /// Total frame budget per run.
    #[arg(long)]
    frames: Option<u64>,
    /// Grid values override (comma-separated).
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<String>>,
    /// Methods to sweep (repeatable); defaults depend on the sweep.
    #[arg(long = "method")]
    methods: Vec<String>,
}

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut map: BTreeMap<(String, String), String> = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            parse_sections(&text)?
        }
        None => BTreeMap::new(),
    };
    apply_overrides(&mut map, &common.sets)?;
    let mut cfg = ExperimentConfig::from_map(&map)?;
    if let Some(seeds) = &common.seeds {
        cfg.seeds = seeds.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    Ok(cfg)
}

fn apply_sweep_overrides(cfg: &mut ExperimentConfig, args: &SweepArgs) -> Result<()> {
    if let Some(env) = &args.env {
        cfg.env = EnvKind::from_id(env)?;
    }
    if let Some(frames) = args.frames {
        cfg.total_frames = frames;
    }
    Ok(())
}

fn parse_methods(args: &SweepArgs, default: &[Method]) -> Result<Vec<Method>> {
    if args.methods.is_empty() {
        return Ok(default.to_vec());
    }
    args.methods
        .iter()
        .map(|m| Method::parse(m).map_err(Into::into))
        .collect()
}

fn parse_values<T>(args: &SweepArgs, default: &[T]) -> Result<Vec<T>>
where
    T: std::str::FromStr + Clone,
    <T as std::str::FromStr>::Err: std::fmt::Display,
{
    match &args.values {
        None => Ok(default.to_vec()),
        Some(raw) => raw
            .iter()
            .map(|s| {
                s.parse()
                    .map_err(|e| anyhow::anyhow!("bad sweep value '{s}': {e}"))
            })
            .collect(),
    }
}

fn fmt_se(se: Option<f64>) -> String {
    se.map(|s| format!("{s:.3}")).unwrap_or_else(|| "-".into())
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    cfg.validate()?;
    println!(
        "running {} on {} for {} frames, seeds {:?}",
        cfg.method.id(),
        cfg.env.id(),
        cfg.total_frames,
        cfg.seeds
    );
    let records = harness::run_seeds(&cfg)?;
    let summary = harness::summarize(&records)?;
    harness::write_experiment(&args.common.out, &cfg, &records, &summary)?;
    for r in &records {
        println!("  seed {}: final return {:.3}", r.seed, r.final_return);
    }
    println!(
        "final return {:.3} +/- {} ({} seeds) -> {}",
        summary.mean,
        fmt_se(summary.se),
        records.len(),
        args.common.out.display()
    );
    Ok(())
}

fn write_sweep_outputs(
    out: &Path,
    name: &str,
    table_csv: String,
    long: &[harness::LongRow],
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let table_path = out.join(format!("sweep_{name}.csv"));
    std::fs::write(&table_path, &table_csv)?;
    std::fs::write(
        out.join(format!("sweep_{name}_long.csv")),
        harness::long_csv(long),
    )?;
    print!("{table_csv}");
    println!("-> {}", table_path.display());
    Ok(())
}

fn cmd_sweep_epochs(args: &SweepArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    apply_sweep_overrides(&mut cfg, args)?;
    let values = parse_values(args, &harness::EPOCH_SWEEP_VALUES)?;
    let seeds = cfg.seeds.clone();
    let sweep = harness::epoch_sweep(&cfg, &values, &seeds)?;
    write_sweep_outputs(
        &args.common.out,
        "epochs",
        harness::epoch_sweep_csv(&sweep),
        &sweep.long,
    )
}

fn grid_sweep_cmd(
    args: &SweepArgs,
    name: &str,
    default_methods: &[Method],
    run: impl FnOnce(&ExperimentConfig, &[u64], &[Method]) -> capo_core::Result<harness::GridSweep>,
) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    apply_sweep_overrides(&mut cfg, args)?;
    let methods = parse_methods(args, default_methods)?;
    let seeds = cfg.seeds.clone();
    let sweep = run(&cfg, &seeds, &methods)?;
    write_sweep_outputs(&args.common.out, name, harness::grid_csv(&sweep), &sweep.long)
}

fn cmd_check_theory(instances: usize, seed: u64, toy_objective: bool) -> Result<()> {
    let mode = if toy_objective {
        oracle::GradientMode::QuadraticToy
    } else {
        oracle::GradientMode::Random
    };
    let report = oracle::theorem_sweep_with(instances, seed, mode);
    println!(
        "consensus-improvement certification: {} randomized instances (seed {}, {} gradients)",
        report.instances,
        seed,
        if toy_objective { "toy-objective" } else { "random" }
    );
    println!("{:<34} {:>8} {:>14}", "clause", "status", "worst margin");
    let names = [
        "a_linear_surrogate_averages",
        "b_kl_contraction",
        "c_penalized_improvement",
        "d_trust_region_membership",
    ];
    for (name, margin) in names.iter().zip(&report.worst_margins) {
        let status = if *margin >= -oracle::THEOREM_TOL {
            "PASS"
        } else {
            "FAIL"
        };
        println!("{name:<34} {status:>8} {margin:>14.3e}");
    }
    println!(
        "{} violations in {:.2} s",
        report.violations, report.elapsed_seconds
    );
    if !report.passed() {
        bail!(
            "{} instances violated the certified clauses",
            report.violations
        );
    }
    Ok(())
}

fn cmd_summarize(dirs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    if dirs.is_empty() {
        bail!("no run directories given");
    }
    let mut csv = String::from("method,env,seeds,mean,se\n");
    println!(
        "{:<12} {:<10} {:>6} {:>12} {:>10}",
        "method", "env", "seeds", "mean", "se"
    );
    for dir in dirs {
        let path = dir.join("summary.json");
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        let json: serde_json::Value = serde_json::from_str(&text)?;
        let method = json["method"].as_str().unwrap_or("?");
        let env = json["env"].as_str().unwrap_or("?");
        let finals: Vec<f64> = json["final_returns"]
            .as_array()
            .map(|a| a.iter().filter_map(|v| v.as_f64()).collect())
            .unwrap_or_default();
        if finals.is_empty() {
            bail!("{}: no final returns", path.display());
        }
        let summary = harness::summarize_finals(&finals)?;
        println!(
            "{:<12} {:<10} {:>6} {:>12.3} {:>10}",
            method,
            env,
            finals.len(),
            summary.mean,
            fmt_se(summary.se)
        );
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            method,
            env,
            finals.len(),
            summary.mean,
            summary.se.map(|s| s.to_string()).unwrap_or_default()
        ));
    }
    if let Some(out) = out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("comparison.csv"), csv)?;
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.cmd {
        Cmd::Run(args) => cmd_run(args),
        Cmd::SweepEpochs(args) => cmd_sweep_epochs(args),
        Cmd::SweepK(args) => {
            let values = parse_values(args, &harness::K_SWEEP_VALUES)?;
            grid_sweep_cmd(
                args,
                "k",
                &[Method::CapoLogop, Method::CapoAvg],
                move |cfg, seeds, methods| harness::k_sweep(cfg, &values, seeds, methods),
            )
        }
        Cmd::SweepClip(args) => {
            let values = parse_values(args, &harness::CLIP_SWEEP_VALUES)?;
            grid_sweep_cmd(
                args,
                "clip",
                &[Method::Ppo, Method::CapoAvg, Method::CapoLogop],
                move |cfg, seeds, methods| harness::clip_sweep(cfg, &values, seeds, methods),
            )
        }
        Cmd::SweepTargetKl(args) => {
            let values = parse_values(args, &harness::TARGET_KL_SWEEP_VALUES)?;
            grid_sweep_cmd(
                args,
                "target_kl",
                &[Method::Ppo, Method::CapoAvg, Method::CapoLogop],
                move |cfg, seeds, methods| harness::target_kl_sweep(cfg, &values, seeds, methods),
            )
        }
        Cmd::SweepWarmup(args) => {
            let values = parse_values(args, &harness::WARMUP_SWEEP_VALUES)?;
            grid_sweep_cmd(
                args,
                "warmup",
                &[Method::CapoAvg, Method::CapoLogop],
                move |cfg, seeds, methods| harness::warmup_sweep(cfg, &values, seeds, methods),
            )
        }
        Cmd::SweepCarry(args) => grid_sweep_cmd(
            args,
            "carry",
            &[Method::CapoAvg, Method::CapoLogop],
            harness::carry_sweep,
        ),
        Cmd::CheckTheory {
            instances,
            seed,
            toy_objective,
        } => cmd_check_theory(*instances, *seed, *toy_objective),
        Cmd::Summarize { dirs, out } => cmd_summarize(dirs, out.as_deref()),
    }
}
