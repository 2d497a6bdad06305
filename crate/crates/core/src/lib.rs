//! Nonblocking cross-chain atomic commit.
//!
//! Layers, bottom up: identifiers and the message vocabulary, the per-node
//! DT log, the per-transaction protocol state machines, intra-chain
//! replication with heartbeat election, and the [`node::Node`] runtime that
//! composes them. Transports live in a separate crate and only move
//! [`message::Message`]s between nodes.

pub mod config;
pub mod dtlog;
pub mod ids;
pub mod message;
pub mod node;
pub mod protocol;
pub mod replication;
pub mod workload;

pub use config::{ClusterConfig, ConfigError, ProtocolKind, Timeouts};
pub use dtlog::{DtLog, DtLogError, DtRecord, RecordKind, RecoveredPhase};
pub use ids::{ChainId, Decision, NodeId, Tick, TxnId, Vote};
pub use message::{EntryTransfer, Message, MessageKind, Outgoing};
pub use node::{Node, NodeError, NodeEvent, NodeSnapshot, Outbox};
pub use protocol::{ProtocolError, ProtocolMode};
pub use replication::Role;
pub use workload::{TxnSpec, Workload};
