use cbt_core::{ProtocolKind, Tick};
use cbt_transport::{Outcome, SimResult};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("invalid baseline: t0={t0}, w0={w0} (both must be positive)")]
    InvalidBaseline { t0: u64, w0: u64 },
}

/// Normalized growth `(t/t0)/(w/w0)`, rounded to three decimals.
pub fn scaling_factor(t: u64, w: u64, t0: u64, w0: u64) -> Result<f64, MetricsError> {
    if t0 == 0 || w0 == 0 {
        return Err(MetricsError::InvalidBaseline { t0, w0 });
    }
    // Exact ratio as (t*w0)/(t0*w), then round once.
    let num = t as u128 * w0 as u128;
    let den = t0 as u128 * w as u128;
    if den == 0 {
        return Ok(f64::INFINITY);
    }
    let thousandths = (num * 1000 * 2 + den) / (den * 2);
    Ok(thousandths as f64 / 1000.0)
}

/// Tick overhead of `t` over `base`, in percent.
pub fn overhead_pct(t: Tick, base: Tick) -> f64 {
    if base == 0 {
        return 0.0;
    }
    (t as f64 - base as f64) * 100.0 / base as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMetrics {
    pub protocol: ProtocolKind,
    pub outcome: Outcome,
    pub committed_txns: u64,
    pub aborted_txns: u64,
    pub commit_messages_at_coordinator: u64,
    pub total_cross_chain_messages: u64,
    pub heartbeat_messages: u64,
    pub intra_chain_messages: u64,
    pub relayed_messages: u64,
    /// Cross-chain, heartbeat and intra-chain messages together.
    pub total_messages: u64,
    pub elapsed_ticks: Tick,
}

impl ScenarioMetrics {
    pub fn of(protocol: ProtocolKind, r: &SimResult) -> Self {
        let s = &r.stats;
        Self {
            protocol,
            outcome: r.outcome.clone(),
            committed_txns: s.committed_txns,
            aborted_txns: s.aborted_txns,
            commit_messages_at_coordinator: s.commit_messages_at_coordinator,
            total_cross_chain_messages: s.cross_chain_messages,
            heartbeat_messages: s.heartbeat_messages,
            intra_chain_messages: s.intra_chain_messages,
            relayed_messages: s.relayed_messages,
            total_messages: s.cross_chain_messages + s.heartbeat_messages + s.intra_chain_messages,
            elapsed_ticks: s.elapsed_ticks,
        }
    }
}
