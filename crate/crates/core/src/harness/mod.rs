//! Closed-loop simulation, Monte Carlo campaigns, metrics and file output.

pub mod campaign;
pub mod closed_loop;
pub mod config;
pub mod emit;
pub mod metrics;

use thiserror::Error;

pub use campaign::{run_mc_robustness, run_mc_ukf, PairedScenario, RobustnessReport, UkfRun, UkfSummary};
pub use closed_loop::{run_closed_loop, run_with, Controller, RunRecord, StepRecord};
pub use config::{ControllerKind, ScenarioConfig};
pub use metrics::{metrics, CampaignSummary, Improvement, RunMetrics, Stat};

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Invalid configuration or arguments.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// A run or computation failed.
    #[error("run fault: {0}")]
    Fault(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
