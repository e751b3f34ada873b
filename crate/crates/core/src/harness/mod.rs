//! Experiment configuration, orchestration and reporting.

pub mod config;
pub mod report;
pub mod run;

pub use config::{Algorithm, Budget, EnvSource, ExperimentConfig, InitialSampler, InitialStateMode};
pub use report::{emit_plot_data, CurvePoint, SeedSeries};
pub use run::{run_experiment, run_seed, Environment, FederatedRun, RoundRecord, RunSummary, SeedRun};
