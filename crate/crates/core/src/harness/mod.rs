//! Experiment orchestration: configs, seeded training loops for all seven
//! methods, the ablation sweeps, evaluation, and artifact emission.

mod config;
mod output;
mod runner;
mod sweeps;

pub use config::{apply_overrides, parse_sections, ExperimentConfig, FisherSettings, Method, NetConfig};
pub use output::{
    diagnostics_csv, progress_csv, traces_jsonl, write_experiment, write_run_dir,
    DIAGNOSTICS_HEADER, PROGRESS_HEADER,
};
pub use runner::{
    evaluate, run_experiment, run_seeds, summarize, summarize_finals, GenerationRow, Phase,
    RunRecord, Summary, TraceRow,
};
pub use sweeps::{
    carry_sweep, clip_sweep, epoch_sweep, epoch_sweep_csv, grid_csv, k_sweep, long_csv,
    target_kl_sweep, warmup_sweep, EpochSweep, EpochSweepRow, GridRow, GridSweep, LongRow,
    CLIP_SWEEP_VALUES, EPOCH_SWEEP_VALUES, K_SWEEP_VALUES, TARGET_KL_SWEEP_VALUES,
    WARMUP_SWEEP_VALUES,
};
