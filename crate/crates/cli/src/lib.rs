//! Experiment runner for `enmpc-core`: configuration files, seeded
//! closed-loop runs, run directories (CSV + summary), common-random-number
//! comparisons and the oracle batteries.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod compare;
pub mod config;
pub mod error;
pub mod experiment;
pub mod oracle;
pub mod report;

pub use compare::{compare_runs, CompareError, Comparison};
pub use config::{ExperimentConfig, ExperimentKind};
pub use error::CliError;
pub use experiment::{resume_experiment, run_experiment, RunError, RunLog, StepRow, Summary};
pub use report::{emit_report, read_log};
