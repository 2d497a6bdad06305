//! Cluster and timing configuration.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{ChainId, NodeId, Tick};
use crate::protocol::ProtocolMode;
use crate::replication::HEARTBEAT_THRESHOLD;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum ProtocolKind {
    /// Improved 2PC with interactive recovery and heartbeat-driven leader
    /// replacement.
    #[default]
    #[serde(rename = "cbt")]
    Cbt,
    /// Classic 2PC: no recovery protocol, no heartbeat, no leader change.
    #[serde(rename = "2pc")]
    Blocking2pc,
    /// Blocking 2PC with every cross-chain message relayed through one
    /// witness chain.
    #[serde(rename = "hub")]
    Hub,
}

impl ProtocolKind {
    pub fn recovery_enabled(self) -> bool {
        self == ProtocolKind::Cbt
    }

    pub fn heartbeat_enabled(self) -> bool {
        self == ProtocolKind::Cbt
    }

    pub fn name(self) -> &'static str {
        match self {
            ProtocolKind::Cbt => "cbt",
            ProtocolKind::Blocking2pc => "2pc",
            ProtocolKind::Hub => "hub",
        }
    }
}

impl std::str::FromStr for ProtocolKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cbt" => Ok(ProtocolKind::Cbt),
            "2pc" => Ok(ProtocolKind::Blocking2pc),
            "hub" => Ok(ProtocolKind::Hub),
            other => Err(ConfigError::Invalid(format!("unknown protocol {other:?}"))),
        }
    }
}

/// Protocol timers, in ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Timeouts {
    pub vote_timeout: Tick,
    pub decision_timeout: Tick,
    pub recovery_interval: Tick,
    pub heartbeat_interval: Tick,
    /// How long a candidate collects rival candidacies before deciding.
    pub election_window: Tick,
}

impl Default for Timeouts {
    fn default() -> Self {
        Self {
            vote_timeout: 10,
            decision_timeout: 20,
            recovery_interval: 20,
            heartbeat_interval: 5,
            election_window: 3,
        }
    }
}

impl Timeouts {
    /// Live-mode defaults expressed in milliseconds.
    pub const LIVE_MS: Timeouts = Timeouts {
        vote_timeout: 1000,
        decision_timeout: 2000,
        recovery_interval: 2000,
        heartbeat_interval: 500,
        election_window: 300,
    };

    /// Converts millisecond settings into ticks of `tick_ms` each, rounding up.
    pub fn from_millis(ms: &Timeouts, tick_ms: u64) -> Timeouts {
        let t = |v: u64| v.div_ceil(tick_ms.max(1)).max(1);
        Timeouts {
            vote_timeout: t(ms.vote_timeout),
            decision_timeout: t(ms.decision_timeout),
            recovery_interval: t(ms.recovery_interval),
            heartbeat_interval: t(ms.heartbeat_interval),
            election_window: t(ms.election_window),
        }
    }

    /// Upper bound on the ticks between a leader crash and its replacement
    /// taking office: up to one interval until the first missed ping, the
    /// threshold of consecutive misses, then the candidacy window and the
    /// victory announcement.
    pub fn election_ticks(&self) -> Tick {
        (HEARTBEAT_THRESHOLD as Tick + 1) * self.heartbeat_interval + self.election_window + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub chains: u16,
    pub nodes_per_chain: u16,
    pub protocol: ProtocolKind,
    pub mode: ProtocolMode,
    pub timeouts: Timeouts,
    /// Witness chain for the hub protocol.
    pub hub: Option<ChainId>,
    /// Messages a node can process per tick (simulator only).
    pub node_capacity: u32,
    /// Base one-way network delay in ticks (simulator only).
    pub delivery_delay: Tick,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            chains: 3,
            nodes_per_chain: 2,
            protocol: ProtocolKind::Cbt,
            mode: ProtocolMode::Safe,
            timeouts: Timeouts::default(),
            hub: None,
            node_capacity: 4,
            delivery_delay: 1,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

impl ClusterConfig {
    pub fn new(chains: u16, nodes_per_chain: u16, protocol: ProtocolKind) -> Self {
        Self {
            chains,
            nodes_per_chain,
            protocol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.chains == 0 {
            return bad("at least one chain is required");
        }
        if self.nodes_per_chain == 0 {
            return bad("every chain needs at least one node");
        }
        if self.node_capacity == 0 || self.delivery_delay == 0 {
            return bad("node capacity and delivery delay must be positive");
        }
        if self.timeouts.heartbeat_interval == 0 || self.timeouts.election_window == 0 {
            return bad("heartbeat interval and election window must be positive");
        }
        match (self.protocol, self.hub) {
            (ProtocolKind::Hub, None) => return bad("hub protocol needs a hub chain"),
            (_, Some(h)) if h.0 >= self.chains => return bad("hub chain out of range"),
            _ => {}
        }
        Ok(())
    }

    /// Cross-chain commit needs somebody to talk to.
    pub fn validate_cross_chain(&self) -> Result<(), ConfigError> {
        self.validate()?;
        let usable = self.chains - u16::from(self.dedicated_hub());
        if usable < 2 {
            return Err(ConfigError::Invalid(
                "cross-chain protocol needs at least two chains".into(),
            ));
        }
        Ok(())
    }

    /// True when the hub is a witness chain that never coordinates or
    /// participates. By convention that is the highest-numbered chain.
    pub fn dedicated_hub(&self) -> bool {
        self.protocol == ProtocolKind::Hub && self.hub == Some(ChainId(self.chains - 1)) && self.chains > 2
    }

    pub fn chain_ids(&self) -> Vec<ChainId> {
        (0..self.chains).map(ChainId).collect()
    }

    pub fn members(&self, chain: ChainId) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.nodes_per_chain).map(move |n| NodeId { chain, node: n })
    }

    pub fn all_nodes(&self) -> Vec<NodeId> {
        self.chain_ids().into_iter().flat_map(|c| self.members(c).collect::<Vec<_>>()).collect()
    }

    /// Hub chain to relay through, if this configuration routes via a hub.
    pub fn relay_hub(&self) -> Option<ChainId> {
        match self.protocol {
            ProtocolKind::Hub => self.hub,
            _ => None,
        }
    }
}
