//! Experiment orchestration: configs and presets, run execution, cross-seed
//! summaries and the gating report.

mod analysis;
mod config;
mod run;
mod summary;

pub use analysis::{
    analyze_checkpoints, analyze_run_dir, checkpoint_profile, load_checkpoints, CheckpointSparsity, GatingReport,
    TaskConsistency, TaskSparsity, GATING_FILE,
};
pub use config::{method_text, ExperimentConfig, Preset, ProfileMode};
pub use run::{
    execute_run, heatmap_file, profile_file, run_dir, run_experiment, run_experiment_on, run_snapshot, RunOutcome,
    RunRecord, RunStatus, CONFIG_FILE, CURVES_FILE, EXPERIMENT_FILE, MATRIX_FILE, RUN_FILE,
};
pub use summary::{
    is_experiment_dir, load_artifacts, summarize, summarize_dir, summarize_out_dir, FailedRun, MethodSummary,
    RunArtifact, Stat, Summary, BAND_STDS, SUMMARY_FILE,
};
