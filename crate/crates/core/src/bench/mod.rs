//! Grid-search benchmark over the three model families.

pub mod config;
pub mod protocol;
pub mod report;
pub mod run;

pub use config::{nssm_downsample_factor, BenchConfig, Family, GridSpec, Profile, Trial, TrialParams};
pub use protocol::{
    forecast_mse, measure_inference, open_loop_mse, run_trial, train_trial_model, evaluate_model, select_best, sensitivity, Forecaster, InferenceTiming, Sensitivity, SystemData,
    TrainedModel, TrialResult,
};
pub use report::{build_report, emit_report, read_results, render_summary, render_timing, BenchmarkReport, TimingRecord};
pub use run::{run_benchmark, RunOptions, RunOutcome};
