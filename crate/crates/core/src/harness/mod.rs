//! Experiment harness: configuration, training regimes, evaluation, lambda
//! sweeps and report emission.

pub mod config;
pub mod eval;
pub mod report;
pub mod sweep;
pub mod train;

pub use config::{apply_override, DatasetSource, ExperimentConfig, ExplainerConfig, Regime, Splits, OUTPUT_ENV};
pub use eval::{evaluate, Evaluation};
pub use report::{emit_report, format_g6, parse_report_csv, render_table, report_csv, ReportRow, REPORT_HEADER};
pub use sweep::{parse_sweep_csv, sweep_csv, sweep_lambda, write_sweep, SweepRow, SWEEP_HEADER};
pub use train::{
    accuracy, initial_model, select_lambda_for, train, train_epoch, train_model, EpochLog, EpochStats, Snapshot,
    TrainOutcome,
};
