//! Experiment runner for the cross-chain commit protocol: baselines,
//! metrics, the scenario suite and report output.

pub mod baselines;
pub mod metrics;
pub mod report;
pub mod scenarios;

use cbt_core::ConfigError;
use cbt_transport::{LiveError, SimError};
use thiserror::Error;

pub use baselines::{effective_config, run_blocking_2pc, run_cbt, run_hub, run_protocol};
pub use metrics::{overhead_pct, scaling_factor, MetricsError, ScenarioMetrics};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Live(#[from] LiveError),
    #[error("scenario failed: {0}")]
    Scenario(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
