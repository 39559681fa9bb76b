//! Experiment configuration, the continual training loop and run artifacts.

mod config;
mod run;

pub use config::{
    expand_grid, parse_grid, parse_kv, DataSource, EvalMode, ExperimentConfig, REQUIRED_KEYS,
};
pub use run::{
    audit_csv, evaluate, losses_csv, metrics_csv, prepare_data, run_experiment, summary_json,
    train_task, weight_norms_csv, write_artifacts, BufferSnapshot, Data, LossLog, ModeResult,
    RunArtifacts, RunOptions, RunRecord,
};
