//! Experiment harness: config, the round-driving event loop, wire
//! payloads, and metrics emission.

pub mod config;
mod experiment;
pub mod metrics;
pub mod wire;

pub use config::{ConfigError, ConfigErrors, ConsensusKind, ExperimentConfig};
pub use experiment::{run_experiment, HarnessError, RunArtifacts};
pub use metrics::{emit_metrics, from_jsonl, to_jsonl, to_summary_csv, MetricsRow, MsgKind};
