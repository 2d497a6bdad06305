//! Deterministic discrete-event simulator.
//!
//! Each tick runs, in order: scheduled crashes and restarts, client
//! submissions, message deliveries, and one timer tick on every live node.
//! Messages between a pair of nodes arrive in send order; which ready
//! message a node handles next is drawn from a seeded generator, and a node
//! handles at most `node_capacity` messages per tick.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use cbt_core::{
    ChainId, ClusterConfig, ConfigError, Decision, DtLog, Message, MessageKind, Node, NodeEvent, NodeId, NodeSnapshot,
    Outbox, RecoveredPhase, Role, Tick, TxnId, TxnSpec, Workload,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::faults::{FaultEvent, FaultSchedule, MatchRule};
use crate::trace::{MsgSummary, Trace, TraceEntry, TraceEvent};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("workload error: {0}")]
    Workload(String),
    #[error("instance too large for exhaustive enumeration: {0}")]
    TooLarge(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimOptions {
    /// Hard stop. `None` picks a budget from the workload size.
    pub max_ticks: Option<Tick>,
    pub record_trace: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self { max_ticks: None, record_trace: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "kebab-case")]
pub enum Outcome {
    Completed,
    /// Transactions never submitted, or still undecided at a live node.
    Blocked { undecided: Vec<TxnId> },
    Disagreement { txns: Vec<TxnId>, detail: String },
}

impl Outcome {
    pub fn is_disagreement(&self) -> bool {
        matches!(self, Outcome::Disagreement { .. })
    }

    pub fn is_completed(&self) -> bool {
        matches!(self, Outcome::Completed)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimStats {
    pub cross_chain_messages: u64,
    pub heartbeat_messages: u64,
    pub intra_chain_messages: u64,
    /// Distinct (transaction, destination chain) COMMIT messages sent by the
    /// coordinator chain.
    pub commit_messages_at_coordinator: u64,
    /// Cross-chain hops that went through a relay node.
    pub relayed_messages: u64,
    pub dropped_messages: u64,
    pub committed_txns: u64,
    pub aborted_txns: u64,
    pub submitted_txns: u64,
    /// Tick of the last decision anywhere.
    pub elapsed_ticks: Tick,
    pub stale_messages: u64,
    /// First decision of each chain on each transaction.
    pub decided_at: BTreeMap<TxnId, BTreeMap<ChainId, (Decision, Tick)>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimResult {
    pub outcome: Outcome,
    pub stats: SimStats,
    pub final_tick: Tick,
    pub nodes: Vec<NodeSnapshot>,
    pub crashed: BTreeSet<NodeId>,
    #[serde(skip)]
    pub trace: Trace,
}

#[derive(Debug, Clone)]
struct InFlight {
    id: u64,
    ready_at: Tick,
    msg: Message,
}

#[derive(Debug, Clone)]
struct DropRule {
    rule: MatchRule,
    skip: u32,
    remaining: u32,
}

#[derive(Debug, Clone)]
struct DelayRule {
    rule: MatchRule,
    skip: u32,
    ticks: Tick,
    remaining: Option<u32>,
}

pub struct Simulator {
    cfg: ClusterConfig,
    opts: SimOptions,
    nodes: BTreeMap<NodeId, Node>,
    crashed: BTreeSet<NodeId>,
    /// In-flight messages by destination, then by sending hop.
    queues: BTreeMap<NodeId, BTreeMap<NodeId, VecDeque<InFlight>>>,
    next_msg: u64,
    rng: ChaCha8Rng,
    now: Tick,
    started: bool,
    trace: Trace,
    timed: VecDeque<FaultEvent>,
    drops: Vec<DropRule>,
    delays: Vec<DelayRule>,
    client: BTreeMap<ChainId, VecDeque<TxnSpec>>,
    coordinator_of: BTreeMap<TxnId, ChainId>,
    workload_txns: Vec<TxnId>,
    submitted: BTreeSet<TxnId>,
    commit_pairs: BTreeSet<(TxnId, ChainId)>,
    violations: Vec<(NodeId, Option<TxnId>, String)>,
    stats: SimStats,
    budget: Tick,
}

impl Simulator {
    pub fn new(cfg: &ClusterConfig, workload: &Workload, faults: &FaultSchedule, opts: SimOptions) -> Result<Self, SimError> {
        cfg.validate()?;
        let mut nodes = BTreeMap::new();
        for id in cfg.all_nodes() {
            nodes.insert(id, Node::new(cfg, id, DtLog::in_memory()));
        }
        let mut sim = Self {
            cfg: cfg.clone(),
            opts,
            nodes,
            crashed: BTreeSet::new(),
            queues: BTreeMap::new(),
            next_msg: 0,
            rng: ChaCha8Rng::seed_from_u64(faults.seed),
            now: 0,
            started: false,
            trace: Trace::default(),
            timed: VecDeque::new(),
            drops: Vec::new(),
            delays: Vec::new(),
            client: BTreeMap::new(),
            coordinator_of: BTreeMap::new(),
            workload_txns: Vec::new(),
            submitted: BTreeSet::new(),
            commit_pairs: BTreeSet::new(),
            violations: Vec::new(),
            stats: SimStats::default(),
            budget: 0,
        };
        let mut timed: Vec<FaultEvent> = Vec::new();
        for e in &faults.events {
            match e {
                FaultEvent::CrashNode { node, .. } | FaultEvent::RestartNode { node, .. } => {
                    if !sim.nodes.contains_key(node) {
                        return Err(SimError::Workload(format!("fault names unknown node {node}")));
                    }
                    timed.push(e.clone());
                }
                FaultEvent::DropMessage { rule, count } => {
                    sim.drops.push(DropRule { rule: rule.clone(), skip: rule.skip, remaining: *count })
                }
                FaultEvent::DelayMessage { rule, ticks, count } => sim.delays.push(DelayRule {
                    rule: rule.clone(),
                    skip: rule.skip,
                    ticks: *ticks,
                    remaining: *count,
                }),
            }
        }
        timed.sort_by_key(FaultEvent::tick);
        sim.timed = timed.into();
        for spec in &workload.txns {
            sim.add_txn(spec.clone())?;
        }
        sim.budget = opts.max_ticks.unwrap_or_else(|| 2_000 + 60 * workload.len() as Tick + faults.last_tick());
        Ok(sim)
    }

    /// Queues a transaction for the client, scripting its votes on every
    /// node of the chains involved.
    pub fn add_txn(&mut self, spec: TxnSpec) -> Result<(), SimError> {
        let chains = self.cfg.chains;
        let bad = spec.coordinator.0 >= chains
            || spec.participants.is_empty()
            || spec.participants.iter().any(|p| p.0 >= chains || *p == spec.coordinator);
        if bad {
            return Err(SimError::Workload(format!("{} names invalid chains", spec.id)));
        }
        if self.coordinator_of.contains_key(&spec.id) {
            return Err(SimError::Workload(format!("duplicate transaction {}", spec.id)));
        }
        for (chain, vote) in &spec.votes {
            for id in self.cfg.members(*chain).collect::<Vec<_>>() {
                self.nodes.get_mut(&id).unwrap().script_vote(spec.id, *vote);
            }
        }
        self.coordinator_of.insert(spec.id, spec.coordinator);
        self.workload_txns.push(spec.id);
        self.client.entry(spec.coordinator).or_default().push_back(spec);
        Ok(())
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.cfg
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn trace_since(&self, from: usize) -> &[TraceEntry] {
        &self.trace.entries[from.min(self.trace.len())..]
    }

    pub fn stats(&self) -> &SimStats {
        &self.stats
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(&id)
    }

    pub fn is_crashed(&self, id: NodeId) -> bool {
        self.crashed.contains(&id)
    }

    pub fn snapshots(&self) -> Vec<NodeSnapshot> {
        self.nodes.values().map(Node::snapshot).collect()
    }

    /// Live node currently leading `chain` at the highest term, if any.
    pub fn leader_of(&self, chain: ChainId) -> Option<NodeId> {
        self.nodes
            .values()
            .filter(|n| n.id().chain == chain && n.is_leader() && !self.crashed.contains(&n.id()))
            .max_by_key(|n| (n.term(), std::cmp::Reverse(n.id())))
            .map(Node::id)
    }

    fn record(&mut self, event: TraceEvent) {
        if self.opts.record_trace {
            self.trace.push(self.now, event);
        }
    }

    pub fn crash_now(&mut self, id: NodeId) {
        if !self.nodes.contains_key(&id) || !self.crashed.insert(id) {
            return;
        }
        self.nodes.get_mut(&id).unwrap().crash();
        self.record(TraceEvent::Crash { node: id });
        if let Some(inbound) = self.queues.remove(&id) {
            for (_, q) in inbound {
                for f in q {
                    self.stats.dropped_messages += 1;
                    self.record(TraceEvent::Drop {
                        dst: id,
                        msg: MsgSummary::of(f.id, &f.msg),
                        reason: "receiver crashed".into(),
                    });
                }
            }
        }
    }

    pub fn restart_now(&mut self, id: NodeId) {
        if !self.crashed.remove(&id) {
            return;
        }
        self.record(TraceEvent::Restart { node: id });
        let mut out = Outbox::new();
        self.nodes.get_mut(&id).unwrap().restart(self.now, &mut out);
        self.dispatch(id, out);
    }

    /// Advances one tick.
    pub fn step(&mut self) {
        if self.started {
            self.now += 1;
        }
        self.started = true;
        while self.timed.front().is_some_and(|e| e.tick() <= self.now) {
            match self.timed.pop_front().unwrap() {
                FaultEvent::CrashNode { node, .. } => self.crash_now(node),
                FaultEvent::RestartNode { node, .. } => self.restart_now(node),
                _ => {}
            }
        }
        self.client_step();
        self.deliver_step();
        let ids: Vec<NodeId> = self.nodes.keys().copied().filter(|n| !self.crashed.contains(n)).collect();
        for id in ids {
            let mut out = Outbox::new();
            self.nodes.get_mut(&id).unwrap().on_tick(self.now, &mut out);
            self.dispatch(id, out);
        }
    }

    fn client_step(&mut self) {
        let chains: Vec<ChainId> = self.client.keys().copied().collect();
        for chain in chains {
            let Some(head) = self.client[&chain].front() else { continue };
            if head.submit_at > self.now {
                continue;
            }
            let Some(leader) = self.leader_of(chain) else { continue };
            if !self.nodes[&leader].ready_for_txn() {
                continue;
            }
            let spec = self.client.get_mut(&chain).unwrap().pop_front().unwrap();
            let mut out = Outbox::new();
            match self.nodes.get_mut(&leader).unwrap().submit(self.now, &spec, &mut out) {
                Ok(()) => {
                    self.submitted.insert(spec.id);
                    self.stats.submitted_txns += 1;
                    self.record(TraceEvent::Submit { node: leader, txn: spec.id });
                    self.dispatch(leader, out);
                    for p in &spec.participants {
                        for id in self.cfg.members(*p).collect::<Vec<_>>() {
                            if !self.crashed.contains(&id) {
                                self.nodes.get_mut(&id).unwrap().expect_txn(self.now, spec.id, spec.coordinator);
                            }
                        }
                    }
                }
                Err(e) => {
                    log::warn!("submit of {} to {} failed: {}", spec.id, leader, e);
                    self.client.get_mut(&chain).unwrap().push_front(spec);
                }
            }
        }
    }

    fn deliver_step(&mut self) {
        let dsts: Vec<NodeId> = self.queues.keys().copied().collect();
        for dst in dsts {
            if self.crashed.contains(&dst) {
                continue;
            }
            for _ in 0..self.cfg.node_capacity {
                let now = self.now;
                let Some(inbound) = self.queues.get_mut(&dst) else { break };
                let ready: Vec<NodeId> = inbound
                    .iter()
                    .filter(|(_, q)| q.front().is_some_and(|f| f.ready_at <= now))
                    .map(|(src, _)| *src)
                    .collect();
                if ready.is_empty() {
                    break;
                }
                let src = if ready.len() == 1 { ready[0] } else { ready[self.rng.gen_range(0..ready.len())] };
                let q = inbound.get_mut(&src).unwrap();
                let f = q.pop_front().unwrap();
                if q.is_empty() {
                    inbound.remove(&src);
                }
                self.record(TraceEvent::Deliver { dst, msg: MsgSummary::of(f.id, &f.msg) });
                let mut out = Outbox::new();
                self.nodes.get_mut(&dst).unwrap().on_message(now, f.msg, &mut out);
                self.dispatch(dst, out);
            }
        }
        self.queues.retain(|_, q| !q.is_empty());
    }

    fn dispatch(&mut self, hop: NodeId, out: Outbox) {
        for ev in out.events {
            match ev {
                NodeEvent::LogAppend { record } => self.record(TraceEvent::LogAppend { node: hop, record }),
                NodeEvent::Decide { txn, decision } => {
                    let now = self.now;
                    self.stats.decided_at.entry(txn).or_default().entry(hop.chain).or_insert((decision, now));
                    self.stats.elapsed_ticks = self.stats.elapsed_ticks.max(now);
                    self.record(TraceEvent::Decide { node: hop, txn, decision });
                }
                NodeEvent::Truncate { len } => self.record(TraceEvent::Truncate { node: hop, len }),
                NodeEvent::Elected { term } => self.record(TraceEvent::Election { node: hop, term, role: Role::Leader }),
                NodeEvent::Violation { txn, detail } => {
                    log::debug!("{hop}: violation on {txn:?}: {detail}");
                    self.violations.push((hop, txn, detail.clone()));
                    self.record(TraceEvent::Violation { node: hop, txn, detail });
                }
            }
        }
        for o in out.sends {
            let id = self.next_msg;
            self.next_msg += 1;
            let kind = o.msg.kind;
            if kind.is_cross_chain() {
                self.stats.cross_chain_messages += 1;
                if o.msg.from != hop {
                    self.stats.relayed_messages += 1;
                }
            } else if kind.is_heartbeat() {
                self.stats.heartbeat_messages += 1;
            } else {
                self.stats.intra_chain_messages += 1;
            }
            if kind == MessageKind::Commit && o.msg.from == hop {
                if let Some(txn) = o.msg.txn {
                    if self.coordinator_of.get(&txn) == Some(&hop.chain) {
                        self.commit_pairs.insert((txn, o.msg.to.chain));
                        self.stats.commit_messages_at_coordinator = self.commit_pairs.len() as u64;
                    }
                }
            }
            let summary = MsgSummary::of(id, &o.msg);
            self.record(TraceEvent::Send { hop, dst: o.dst, msg: summary.clone() });
            if self.take_drop(&o.msg) {
                self.stats.dropped_messages += 1;
                self.record(TraceEvent::Drop { dst: o.dst, msg: summary, reason: "fault".into() });
                continue;
            }
            if self.crashed.contains(&o.dst) {
                self.stats.dropped_messages += 1;
                self.record(TraceEvent::Drop { dst: o.dst, msg: summary, reason: "receiver crashed".into() });
                continue;
            }
            let delay = self.cfg.delivery_delay + self.take_delay(&o.msg);
            let q = self.queues.entry(o.dst).or_default().entry(hop).or_default();
            let ready_at = q.back().map_or(0, |b| b.ready_at).max(self.now + delay);
            q.push_back(InFlight { id, ready_at, msg: o.msg });
        }
    }

    fn take_drop(&mut self, msg: &Message) -> bool {
        for d in &mut self.drops {
            if d.remaining == 0 || !d.rule.matches(msg) {
                continue;
            }
            if d.skip > 0 {
                d.skip -= 1;
                continue;
            }
            d.remaining -= 1;
            return true;
        }
        false
    }

    fn take_delay(&mut self, msg: &Message) -> Tick {
        let mut extra = 0;
        for d in &mut self.delays {
            if d.remaining == Some(0) || !d.rule.matches(msg) {
                continue;
            }
            if d.skip > 0 {
                d.skip -= 1;
                continue;
            }
            if let Some(r) = d.remaining.as_mut() {
                *r -= 1;
            }
            extra += d.ticks;
        }
        extra
    }

    /// True when nothing can happen any more without outside input.
    pub fn is_quiescent(&self) -> bool {
        let busy_net = self
            .queues
            .values()
            .flat_map(|m| m.values())
            .flatten()
            .any(|f| !f.msg.kind.is_heartbeat());
        if busy_net || !self.timed.is_empty() {
            return false;
        }
        let live = || self.nodes.values().filter(|n| !self.crashed.contains(&n.id()));
        if live().any(Node::has_pending_work) {
            return false;
        }
        if self.cfg.protocol.heartbeat_enabled() {
            // A chain with survivors but no leader will hold an election.
            for chain in self.cfg.chain_ids() {
                let members = live().filter(|n| n.id().chain == chain).count();
                if members > 0 && self.leader_of(chain).is_none() {
                    return false;
                }
            }
        }
        for (chain, q) in &self.client {
            let Some(head) = q.front() else { continue };
            if head.submit_at > self.now {
                return false;
            }
            if self.leader_of(*chain).is_some_and(|l| self.nodes[&l].ready_for_txn()) {
                return false;
            }
        }
        true
    }

    /// Steps until quiescence or the tick budget.
    pub fn run_to_end(&mut self) {
        loop {
            self.step();
            if self.is_quiescent() || self.now >= self.budget {
                break;
            }
        }
    }

    pub fn outcome(&self) -> Outcome {
        let mut conflicting = Vec::new();
        for &txn in &self.workload_txns {
            let decisions: BTreeSet<Decision> = self.nodes.values().filter_map(|n| n.dt_log().decision(txn)).collect();
            if decisions.len() > 1 {
                conflicting.push(txn);
            }
        }
        if !conflicting.is_empty() || !self.violations.is_empty() {
            let detail = match self.violations.first() {
                Some((node, _, d)) => format!("{node}: {d}"),
                None => "nodes hold conflicting decision records".into(),
            };
            for (_, txn, _) in &self.violations {
                if let Some(t) = txn {
                    if !conflicting.contains(t) {
                        conflicting.push(*t);
                    }
                }
            }
            conflicting.sort();
            return Outcome::Disagreement { txns: conflicting, detail };
        }
        let mut undecided = Vec::new();
        for &txn in &self.workload_txns {
            let open = !self.submitted.contains(&txn)
                || self.nodes.values().filter(|n| !self.crashed.contains(&n.id())).any(|n| {
                    matches!(n.dt_log().phase(txn), Some(RecoveredPhase::VotedYes | RecoveredPhase::Started))
                });
            if open {
                undecided.push(txn);
            }
        }
        if undecided.is_empty() {
            Outcome::Completed
        } else {
            Outcome::Blocked { undecided }
        }
    }

    /// Final accounting; the simulator can keep running afterwards.
    pub fn result(&self) -> SimResult {
        let mut stats = self.stats.clone();
        stats.committed_txns = 0;
        stats.aborted_txns = 0;
        for (&txn, &coord) in &self.coordinator_of {
            let d = self
                .nodes
                .values()
                .filter(|n| n.id().chain == coord)
                .find_map(|n| n.dt_log().decision(txn));
            match d {
                Some(Decision::Commit) => stats.committed_txns += 1,
                Some(Decision::Abort) => stats.aborted_txns += 1,
                None => {}
            }
        }
        stats.stale_messages = self.nodes.values().map(Node::stale_messages).sum();
        SimResult {
            outcome: self.outcome(),
            stats,
            final_tick: self.now,
            nodes: self.snapshots(),
            crashed: self.crashed.clone(),
            trace: self.trace.clone(),
        }
    }

    pub fn into_result(mut self) -> SimResult {
        let mut r = self.result();
        r.trace = std::mem::take(&mut self.trace);
        r
    }
}

/// Runs a whole scenario to quiescence or budget.
pub fn sim_run(
    cfg: &ClusterConfig,
    workload: &Workload,
    faults: &FaultSchedule,
    opts: SimOptions,
) -> Result<SimResult, SimError> {
    let mut sim = Simulator::new(cfg, workload, faults, opts)?;
    sim.run_to_end();
    Ok(sim.into_result())
}
