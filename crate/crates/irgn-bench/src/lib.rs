//! Benchmark harness for the `irgn` solver: noise sweeps, convergence-rate
//! regression, oracle-inequality and bound verification, stopping-rule
//! comparison, and deterministic report emission. The `irgn-bench` binary is
//! a thin CLI over this library.

// `!(x > 0.0)` validation rejects NaN; `x <= 0.0` would not.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod experiment;
pub mod report;
pub mod selfcheck;

pub use config::{ExperimentConfig, ProblemKind, RuleKind, SourceFormKind};
pub use experiment::{
    build_setup, run_oracle_check, run_rate_experiment, run_rule_comparison, Cell, CellOutcome,
    ExperimentOutput, Setup,
};
pub use report::{emit_report, fit_power_law, median, Summary};
pub use selfcheck::{run_selfcheck, Check};
