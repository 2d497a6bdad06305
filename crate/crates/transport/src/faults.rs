//! Deterministic fault scripts.

use std::str::FromStr;

use cbt_core::{ChainId, Message, MessageKind, NodeId, Tick, TxnId};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Selects messages by their logical fields. Unset fields match anything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchRule {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<MessageKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub txn: Option<TxnId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub from_chain: Option<ChainId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub to_chain: Option<ChainId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub from_node: Option<NodeId>,
    /// Let this many matching sends through before the rule bites.
    #[serde(skip_serializing_if = "is_zero")]
    pub skip: u32,
}

fn is_zero(v: &u32) -> bool {
    *v == 0
}

impl MatchRule {
    pub fn kind(kind: MessageKind) -> Self {
        Self { kind: Some(kind), ..Self::default() }
    }

    pub fn matches(&self, msg: &Message) -> bool {
        self.kind.is_none_or(|k| k == msg.kind)
            && self.txn.is_none_or(|t| msg.txn == Some(t))
            && self.from_chain.is_none_or(|c| c == msg.from.chain)
            && self.to_chain.is_none_or(|c| c == msg.to.chain)
            && self.from_node.is_none_or(|n| n == msg.from)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "fault", rename_all = "kebab-case")]
pub enum FaultEvent {
    CrashNode { node: NodeId, at: Tick },
    RestartNode { node: NodeId, at: Tick },
    /// Drops the next `count` sends matching `rule`.
    DropMessage { rule: MatchRule, count: u32 },
    /// Adds `ticks` of latency to matching sends (all of them unless
    /// `count` is given).
    DelayMessage {
        rule: MatchRule,
        ticks: Tick,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        count: Option<u32>,
    },
}

impl FaultEvent {
    /// Tick the event is tied to; message rules apply from the start.
    pub fn tick(&self) -> Tick {
        match self {
            FaultEvent::CrashNode { at, .. } | FaultEvent::RestartNode { at, .. } => *at,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultSchedule {
    pub events: Vec<FaultEvent>,
    #[serde(default)]
    pub seed: u64,
}

impl FaultSchedule {
    pub fn new(seed: u64) -> Self {
        Self { events: Vec::new(), seed }
    }

    /// Adds an event, keeping the list ordered by tick (stable for ties).
    pub fn with(mut self, event: FaultEvent) -> Self {
        self.push(event);
        self
    }

    pub fn push(&mut self, event: FaultEvent) {
        let at = event.tick();
        let pos = self.events.iter().position(|e| e.tick() > at).unwrap_or(self.events.len());
        self.events.insert(pos, event);
    }

    pub fn crash(self, node: NodeId, at: Tick) -> Self {
        self.with(FaultEvent::CrashNode { node, at })
    }

    pub fn restart(self, node: NodeId, at: Tick) -> Self {
        self.with(FaultEvent::RestartNode { node, at })
    }

    pub fn is_sorted(&self) -> bool {
        self.events.windows(2).all(|w| w[0].tick() <= w[1].tick())
    }

    /// Latest crash or restart tick.
    pub fn last_tick(&self) -> Tick {
        self.events.iter().map(FaultEvent::tick).max().unwrap_or(0)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("bad fault spec {spec:?}: {reason}")]
pub struct FaultParseError {
    pub spec: String,
    pub reason: String,
}

pub fn parse_kind(s: &str) -> Option<MessageKind> {
    MessageKind::ALL.into_iter().find(|k| k.name().eq_ignore_ascii_case(s))
}

fn parse_node(s: &str) -> Option<NodeId> {
    let (c, n) = s.split_once('.')?;
    Some(NodeId::new(c.parse().ok()?, n.parse().ok()?))
}

/// Command-line fault syntax:
///
/// - `crash:<chain>.<node>@<tick>`
/// - `restart:<chain>.<node>@<tick>`
/// - `drop:<Kind>[:<count>]`
/// - `delay:<Kind>:<ticks>`
impl FromStr for FaultEvent {
    type Err = FaultParseError;

    fn from_str(spec: &str) -> Result<Self, Self::Err> {
        let err = |reason: &str| FaultParseError { spec: spec.to_string(), reason: reason.to_string() };
        let (verb, rest) = spec.split_once(':').ok_or_else(|| err("expected <verb>:<args>"))?;
        match verb {
            "crash" | "restart" => {
                let (node, at) = rest.split_once('@').ok_or_else(|| err("expected <chain>.<node>@<tick>"))?;
                let node = parse_node(node).ok_or_else(|| err("bad node id"))?;
                let at = at.parse().map_err(|_| err("bad tick"))?;
                Ok(if verb == "crash" {
                    FaultEvent::CrashNode { node, at }
                } else {
                    FaultEvent::RestartNode { node, at }
                })
            }
            "drop" => {
                let mut parts = rest.split(':');
                let kind = parts.next().and_then(parse_kind).ok_or_else(|| err("unknown message kind"))?;
                let count = match parts.next() {
                    Some(c) => c.parse().map_err(|_| err("bad count"))?,
                    None => 1,
                };
                Ok(FaultEvent::DropMessage { rule: MatchRule::kind(kind), count })
            }
            "delay" => {
                let (kind, ticks) = rest.split_once(':').ok_or_else(|| err("expected <Kind>:<ticks>"))?;
                let kind = parse_kind(kind).ok_or_else(|| err("unknown message kind"))?;
                let ticks = ticks.parse().map_err(|_| err("bad tick count"))?;
                Ok(FaultEvent::DelayMessage { rule: MatchRule::kind(kind), ticks, count: None })
            }
            _ => Err(err("unknown verb")),
        }
    }
}
