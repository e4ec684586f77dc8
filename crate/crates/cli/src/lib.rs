//! Experiment harness for `funnel-select`: configuration, the check
//! pipeline and report output.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod pipeline;
pub mod plot;

pub use config::{ConfigError, ExperimentConfig, Overrides, Problem};
pub use pipeline::{run, CheckResult, Phase, RunReport, Status, Timings};
pub use plot::emit_plot_data;
