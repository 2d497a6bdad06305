//! Request bodies. Field names match the CLI's live config file.

use std::collections::BTreeMap;

use cbt_core::{ChainId, ClusterConfig, ConfigError, ProtocolKind, ProtocolMode, Timeouts, Vote};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransportKind {
    /// Simulator stepped in real time at `ticks_per_second`.
    #[default]
    SimInteractive,
    /// Nodes talking over TCP loopback.
    Live,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSpec {
    pub chains: u16,
    pub nodes_per_chain: u16,
    /// Chain that relays every cross-chain message. Only with `protocol =
    /// hub`.
    pub hub: Option<u16>,
    pub protocol: ProtocolKind,
    pub mode: ProtocolMode,
    pub transport: TransportKind,
    /// Simulator speed.
    pub ticks_per_second: u32,
    /// Live tick length.
    pub tick_ms: u64,
    /// First live port; 0 picks free ports.
    pub base_port: u16,
    pub seed: u64,
    /// Tick-denominated timeouts; live mode derives them from `tick_ms`
    /// when absent.
    pub timeouts: Option<Timeouts>,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            chains: 3,
            nodes_per_chain: 2,
            hub: None,
            protocol: ProtocolKind::Cbt,
            mode: ProtocolMode::Safe,
            transport: TransportKind::SimInteractive,
            ticks_per_second: 20,
            tick_ms: 10,
            base_port: 0,
            seed: 1,
            timeouts: None,
        }
    }
}

impl ClusterSpec {
    pub fn to_config(&self) -> Result<ClusterConfig, ConfigError> {
        let mut cfg = ClusterConfig::new(self.chains, self.nodes_per_chain, self.protocol);
        cfg.mode = self.mode;
        cfg.hub = self.hub.map(ChainId);
        if self.hub.is_some() && self.protocol != ProtocolKind::Hub {
            return Err(ConfigError::Invalid("a hub chain needs protocol = hub".into()));
        }
        cfg.timeouts = match (self.timeouts, self.transport) {
            (Some(t), _) => t,
            (None, TransportKind::Live) => Timeouts::from_millis(&Timeouts::LIVE_MS, self.tick_ms),
            (None, TransportKind::SimInteractive) => Timeouts::default(),
        };
        if self.transport == TransportKind::SimInteractive && self.ticks_per_second == 0 {
            return Err(ConfigError::Invalid("ticks_per_second must be positive".into()));
        }
        cfg.validate_cross_chain()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TxnRequest {
    pub count: usize,
    /// Defaults to chain 0.
    pub coordinator: Option<u16>,
    /// Defaults to every other transaction chain.
    pub participants: Option<Vec<u16>>,
    /// Votes differing from YES, keyed by chain.
    pub votes: BTreeMap<u16, Vote>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_chain_is_rejected() {
        let spec = ClusterSpec { chains: 1, ..ClusterSpec::default() };
        assert!(spec.to_config().is_err());
    }

    #[test]
    fn hub_flag_needs_hub_protocol() {
        let spec = ClusterSpec { hub: Some(0), ..ClusterSpec::default() };
        assert!(spec.to_config().is_err());
        let spec = ClusterSpec { hub: Some(0), protocol: ProtocolKind::Hub, ..ClusterSpec::default() };
        let cfg = spec.to_config().unwrap();
        assert_eq!(cfg.all_nodes().len(), 6);
    }

    #[test]
    fn body_uses_config_field_names() {
        let spec: ClusterSpec =
            serde_json::from_str(r#"{"chains":2,"nodes_per_chain":1,"protocol":"2pc","transport":"live"}"#).unwrap();
        assert_eq!(spec.protocol, ProtocolKind::Blocking2pc);
        let cfg = spec.to_config().unwrap();
        assert_eq!(cfg.timeouts.heartbeat_interval, 50);
        assert!(serde_json::from_str::<ClusterSpec>(r#"{"chain":2}"#).is_err());
    }
}
