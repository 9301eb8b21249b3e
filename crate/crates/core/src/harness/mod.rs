//! Experiment runner: configuration, training loop, diagnostics and CSV export.

pub mod config;
mod csv_out;
pub mod diagnostic;
pub mod run;
pub mod summary;

pub use config::{Config, CurriculumOverrides, ExperimentConfig};
pub use csv_out::{csv_reader, write_csv, SCHEMA_VERSION};
pub use diagnostic::{buffer_steps_diagnostic, cell_stats, diagnostic_trial, DiagnosticRow, DIAGNOSTIC_MODES};
pub use run::{
    run_experiment, run_experiment_with, run_round, run_scratch_baseline, run_seed, ActMode, CurriculumRow, EpisodeOutcome,
    EpisodeRow, Execution, PolicyIo, RunRecord, UpdateRow, Worker,
};
pub use summary::{export_summary, final_success, read_eval_points, summarize_dir, EvalPoint, FinalRow, SummaryRow};
