//! Discrete-event simulator and experiment harness for the reputation IDS in
//! `repsim-core`.
//!
//! [`engine::run`] executes a validated [`scenario::Scenario`] and returns the
//! event trace, its SHA-256 digest and the metrics computed from that trace.
//! The `repsim` binary wraps this in `run`, `batch` and `replay` subcommands.

pub mod cli;
pub mod engine;
pub mod medium;
pub mod metrics;
pub mod output;
pub mod scenario;
pub mod trace;

pub use engine::{run, RunOptions, RunOutput};
pub use metrics::{compute_metrics, MetricsReport};
pub use scenario::{Behavior, Scenario, ScenarioError};
