//! Experiment orchestration behind the `uast` binary: config parsing,
//! per-seed runs, artifact emission and checkpoint evaluation.

pub mod experiment;

pub use experiment::{
    eval_report, run_experiment, DatasetSpec, ExperimentConfig, SeedSummary,
};
