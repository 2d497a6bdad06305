//! Exhaustive single-fault schedule enumeration for small instances.

use std::collections::{BTreeMap, HashMap};

use cbt_core::{ChainId, ClusterConfig, MessageKind, NodeId, Tick, TxnId, Workload};
use serde::{Deserialize, Serialize};

use crate::faults::{FaultEvent, FaultSchedule, MatchRule};
use crate::sim::{sim_run, Outcome, SimError, SimOptions, SimResult};
use crate::trace::TraceEvent;

pub const MAX_CHAINS: u16 = 3;
pub const MAX_NODES_PER_CHAIN: u16 = 2;
pub const MAX_TXNS: usize = 1;

/// Base faults every enumerated schedule starts from, plus what to vary.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FaultTemplate {
    /// Message rules (delays, drops) and the seed shared by all schedules.
    pub base: FaultSchedule,
    /// Nodes to crash. Empty means every node.
    pub crash_nodes: Vec<NodeId>,
    /// Also try dropping each single message of the fault-free run.
    pub single_drops: bool,
}

impl FaultTemplate {
    pub fn crashes_only(seed: u64) -> Self {
        Self { base: FaultSchedule::new(seed), ..Self::default() }
    }

    pub fn with_delay(mut self, kind: MessageKind, ticks: Tick) -> Self {
        self.base.push(FaultEvent::DelayMessage { rule: MatchRule::kind(kind), ticks, count: None });
        self
    }

    /// Largest extra latency the base rules can add to one message.
    pub fn max_extra_delay(&self) -> Tick {
        self.base
            .events
            .iter()
            .map(|e| match e {
                FaultEvent::DelayMessage { ticks, .. } => *ticks,
                _ => 0,
            })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    AgreementDecided,
    AgreementBlocked,
    Disagreement,
}

impl Verdict {
    pub fn of(outcome: &Outcome) -> Self {
        match outcome {
            Outcome::Completed => Verdict::AgreementDecided,
            Outcome::Blocked { .. } => Verdict::AgreementBlocked,
            Outcome::Disagreement { .. } => Verdict::Disagreement,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "fault", rename_all = "kebab-case")]
pub enum VariedFault {
    Crash { node: NodeId, at: Tick },
    /// `index`-th send of the fault-free run.
    Drop { index: usize, kind: MessageKind, from: NodeId, to: NodeId },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleVerdict {
    pub varied: VariedFault,
    pub schedule: FaultSchedule,
    pub verdict: Verdict,
    pub outcome: Outcome,
    /// Latest first-decision tick over the chains that decided.
    pub last_decision: Option<Tick>,
    /// Crash schedules only: every involved chain decided every transaction
    /// no later than the liveness bound after the crash.
    pub within_bound: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnumReport {
    pub config: ClusterConfig,
    pub template: FaultTemplate,
    /// Final tick of the run with only the base faults.
    pub horizon: Tick,
    /// Ticks allowed between a crash and the decisions that follow it.
    pub liveness_bound: Tick,
    pub schedules: Vec<ScheduleVerdict>,
}

impl EnumReport {
    pub fn count(&self, v: Verdict) -> usize {
        self.schedules.iter().filter(|s| s.verdict == v).count()
    }

    pub fn first(&self, v: Verdict) -> Option<&ScheduleVerdict> {
        self.schedules.iter().find(|s| s.verdict == v)
    }

    pub fn liveness_violations(&self) -> impl Iterator<Item = &ScheduleVerdict> {
        self.schedules.iter().filter(|s| s.within_bound == Some(false))
    }

    pub fn tally(&self) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for s in &self.schedules {
            *m.entry(format!("{:?}", s.verdict)).or_default() += 1;
        }
        m
    }
}

pub fn check_size(cfg: &ClusterConfig, workload: &Workload) -> Result<(), SimError> {
    if cfg.chains > MAX_CHAINS || cfg.nodes_per_chain > MAX_NODES_PER_CHAIN || workload.len() > MAX_TXNS {
        return Err(SimError::TooLarge(format!(
            "{} chains x {} nodes, {} txns (limit {MAX_CHAINS} x {MAX_NODES_PER_CHAIN}, {MAX_TXNS})",
            cfg.chains,
            cfg.nodes_per_chain,
            workload.len()
        )));
    }
    Ok(())
}

/// Liveness bound for a configuration and template.
pub fn liveness_bound(cfg: &ClusterConfig, template: &FaultTemplate) -> Tick {
    cfg.timeouts.election_ticks() + cfg.timeouts.recovery_interval + cfg.delivery_delay + template.max_extra_delay()
}

fn opts() -> SimOptions {
    SimOptions { max_ticks: None, record_trace: false }
}

fn last_decision(r: &SimResult) -> Option<Tick> {
    r.stats.decided_at.values().flat_map(|m| m.values()).map(|(_, t)| *t).max()
}

/// Runs every single-crash schedule (each node at each tick up to one past
/// the fault-free horizon) and, if asked, every single-drop schedule.
pub fn sim_enumerate(
    cfg: &ClusterConfig,
    workload: &Workload,
    template: &FaultTemplate,
) -> Result<EnumReport, SimError> {
    check_size(cfg, workload)?;
    let base = sim_run(cfg, workload, &template.base, SimOptions { max_ticks: None, record_trace: true })?;
    let horizon = base.final_tick;
    let bound = liveness_bound(cfg, template);
    let nodes = if template.crash_nodes.is_empty() { cfg.all_nodes() } else { template.crash_nodes.clone() };

    let mut schedules = Vec::new();
    for &node in &nodes {
        for at in 0..=horizon + 1 {
            let schedule = template.base.clone().crash(node, at);
            let r = sim_run(cfg, workload, &schedule, opts())?;
            let within = r.outcome.is_completed()
                && workload.txns.iter().all(|t| {
                    let decided = r.stats.decided_at.get(&t.id);
                    std::iter::once(t.coordinator)
                        .chain(t.participants.iter().copied())
                        .all(|c| decided.and_then(|m| m.get(&c)).is_some_and(|(_, tick)| *tick <= at + bound))
                });
            schedules.push(ScheduleVerdict {
                varied: VariedFault::Crash { node, at },
                verdict: Verdict::of(&r.outcome),
                last_decision: last_decision(&r),
                outcome: r.outcome,
                within_bound: Some(within),
                schedule,
            });
        }
    }

    if template.single_drops {
        let mut seen: HashMap<(MessageKind, Option<TxnId>, NodeId, ChainId), u32> = HashMap::new();
        let sends = base.trace.iter().filter_map(|e| match &e.event {
            TraceEvent::Send { msg, .. } => Some(msg.clone()),
            _ => None,
        });
        for (index, msg) in sends.enumerate() {
            // Identify the send by its position among look-alikes; the run is
            // deterministic up to the drop, so the same message is hit.
            let key = (msg.kind, msg.txn, msg.from, msg.to.chain);
            let skip = *seen.get(&key).unwrap_or(&0);
            seen.insert(key, skip + 1);
            let rule = MatchRule {
                kind: Some(msg.kind),
                txn: msg.txn,
                from_chain: None,
                to_chain: Some(msg.to.chain),
                from_node: Some(msg.from),
                skip,
            };
            let schedule = template.base.clone().with(FaultEvent::DropMessage { rule, count: 1 });
            let r = sim_run(cfg, workload, &schedule, opts())?;
            schedules.push(ScheduleVerdict {
                varied: VariedFault::Drop { index, kind: msg.kind, from: msg.from, to: msg.to },
                verdict: Verdict::of(&r.outcome),
                last_decision: last_decision(&r),
                outcome: r.outcome,
                within_bound: None,
                schedule,
            });
        }
    }

    Ok(EnumReport { config: cfg.clone(), template: template.clone(), horizon, liveness_bound: bound, schedules })
}
