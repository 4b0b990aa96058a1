//! Experiment plumbing: configs, metrics tables, checkpoints, seeded runs,
//! evaluation metrics and the shipped presets.

mod bench;
mod checkpoint;
mod config;
mod eval;
mod experiment;
mod gradsuite;
mod metrics;
mod presets;

pub use bench::{bench, BenchReport, SeedOutcome};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::{parse_config, split_top_level, EvalConfig, ExperimentConfig, SourceSpec};
pub use eval::{
    compute_cost_report, evaluate, generalization_gap, normalized_robustness, robustness_score, Policy, TabularPolicy,
    ROBUSTNESS_DENOM,
};
pub use experiment::{
    assemble_library, build_library, load_library, load_source, pretrain_sources, run_seed, run_seed_into, run_seeds,
    save_source, source_path, RunOutput,
};
pub use gradsuite::{grad_check_suite, GRAD_CHECK_STEP};
pub use metrics::{read_metrics_csv, write_metrics_csv, RunMetrics, CSV_HEADER};
pub use presets::Preset;
