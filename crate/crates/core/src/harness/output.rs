//! Artifact writers: one directory per run with `config.resolved`,
//! `progress.csv`, `diagnostics.csv`, `traces.jsonl`, `summary.json`, plus
//! seed-aggregated summaries. Float cells use Rust's shortest round-trip
//! formatting, so identical runs write identical bytes.

use super::config::ExperimentConfig;
use super::runner::{RunRecord, Summary};
use crate::error::Result;
use crate::fisher::DiagnosticsRecord;
use std::fmt::Write as _;
use std::path::Path;

pub const PROGRESS_HEADER: &str =
    "generation,phase,frames,eval_return,mean_kl,surrogate_gain,epochs_run,trust_ok";
pub const DIAGNOSTICS_HEADER: &str =
    "generation,expert_id,c,waste_norm_sq,signal_kl,waste_kl,alpha,cos_f,ratio,rho_c,rho_eps,rho_total";

fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

pub fn progress_csv(record: &RunRecord) -> String {
    let mut out = String::from(PROGRESS_HEADER);
    out.push('\n');
    for r in &record.rows {
        let trust = match r.trust_ok {
            Some(true) => "1",
            Some(false) => "0",
            None => "",
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.generation,
            r.phase.id(),
            r.frames,
            fmt_f64(r.eval_return),
            fmt_f64(r.mean_kl),
            fmt_f64(r.surrogate_gain),
            r.epochs_run,
            trust
        )
        .expect("string write");
    }
    out
}

pub fn diagnostics_csv(records: &[DiagnosticsRecord]) -> String {
    let mut out = String::from(DIAGNOSTICS_HEADER);
    out.push('\n');
    for rec in records {
        // Expert rows (ids follow the shuffle seeds 1..=K), then the
        // consensus row carrying the cross-expert aggregates.
        let multi = rec.experts.len() >= 2;
        if multi {
            for (i, d) in rec.experts.iter().enumerate() {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},,,,",
                    rec.generation,
                    i + 1,
                    fmt_f64(d.c),
                    fmt_f64(d.waste_norm_sq),
                    fmt_f64(d.signal_kl),
                    fmt_f64(d.waste_kl),
                    fmt_f64(d.alpha),
                    fmt_f64(d.cos_f),
                )
                .expect("string write");
            }
        }
        let c = &rec.consensus;
        writeln!(
            out,
            "{},consensus,{},{},{},{},{},{},{},{},{},{}",
            rec.generation,
            fmt_f64(c.c),
            fmt_f64(c.waste_norm_sq),
            fmt_f64(c.signal_kl),
            fmt_f64(c.waste_kl),
            fmt_f64(c.alpha),
            fmt_f64(c.cos_f),
            fmt_opt(rec.waste_reduction_ratio),
            fmt_opt(rec.rho_c),
            fmt_opt(rec.rho_eps),
            fmt_opt(rec.rho_total),
        )
        .expect("string write");
    }
    out
}

pub fn traces_jsonl(record: &RunRecord) -> String {
    let mut out = String::new();
    for t in &record.traces {
        out.push_str(&serde_json::to_string(t).expect("trace row serializes"));
        out.push('\n');
    }
    out
}

/// Write one seed's artifacts into `dir`.
pub fn write_run_dir(dir: &Path, cfg: &ExperimentConfig, record: &RunRecord) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.resolved"), cfg.resolved_text())?;
    std::fs::write(dir.join("progress.csv"), progress_csv(record))?;
    std::fs::write(dir.join("diagnostics.csv"), diagnostics_csv(&record.diagnostics))?;
    std::fs::write(dir.join("traces.jsonl"), traces_jsonl(record))?;
    let summary = serde_json::json!({
        "method": cfg.method.id(),
        "env": cfg.env.id(),
        "seed": record.seed,
        "generations": record.rows.len(),
        "frames": record.rows.last().map_or(0, |r| r.frames),
        "final_return": record.final_return,
    });
    std::fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    Ok(())
}

/// Write all seeds of one experiment under `out/seed_<s>/` plus a top-level
/// cross-seed `summary.json`.
pub fn write_experiment(
    out: &Path,
    cfg: &ExperimentConfig,
    records: &[RunRecord],
    summary: &Summary,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    for record in records {
        write_run_dir(&out.join(format!("seed_{}", record.seed)), cfg, record)?;
    }
    let json = serde_json::json!({
        "method": cfg.method.id(),
        "env": cfg.env.id(),
        "seeds": records.iter().map(|r| r.seed).collect::<Vec<_>>(),
        "final_returns": summary.finals,
        "mean": summary.mean,
        "se": summary.se,
    });
    std::fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&json).expect("summary serializes"),
    )?;
    Ok(())
}
