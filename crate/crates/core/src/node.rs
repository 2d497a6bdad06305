//! One blockchain node: the commit-protocol tables, its DT log and its share
//! of the chain's replicated log, driven by messages and ticks.
//!
//! The node never performs I/O. Each entry point takes the current tick and
//! fills an [`Outbox`] with messages to send and events for the trace. Every
//! cross-chain message the leader produces is held back until the log entry
//! it depends on is durable in the chain (acknowledged by a majority of the
//! leader's live view).

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ClusterConfig, ProtocolKind};
use crate::dtlog::{DtLog, DtRecord, RecordKind, RecoveredPhase};
use crate::ids::{ChainId, Decision, NodeId, Tick, TxnId, Vote};
use crate::message::{Message, MessageKind, Outgoing};
use crate::protocol::{
    recovery_respond, Coordinator, CoordinatorPhase, CoordinatorState, Outbound, Participant, ParticipantPhase,
    ParticipantState, ProtocolError, ProtocolMode, ResponderView, TxnLog,
};
use crate::replication::{
    follower_on_replicate, run_election, AckOutcome, FollowerAction, HeartbeatCounters, ReplicatedLog, Replicator,
    Role, HEARTBEAT_THRESHOLD,
};
use crate::workload::TxnSpec;

/// Transaction membership, carried in the chain log next to the start and
/// yes records so a new leader can resume without asking anyone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxnMeta {
    pub coordinator: ChainId,
    pub participants: Vec<ChainId>,
    pub local_vote: Vote,
}

/// Payload of one chain-log entry: the DT record it mirrors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainEntry {
    pub txn: TxnId,
    pub kind: RecordKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<TxnMeta>,
}

impl ChainEntry {
    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("chain entries always serialize")
    }

    pub fn decode(bytes: &[u8]) -> Option<Self> {
        serde_json::from_slice(bytes).ok()
    }
}

/// Observable side effects of a node step, in the order they happened.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum NodeEvent {
    LogAppend { record: DtRecord },
    Decide { txn: TxnId, decision: Decision },
    /// DT log cut back to `len` records while rejoining a leader.
    Truncate { len: u64 },
    Elected { term: u64 },
    Violation { txn: Option<TxnId>, detail: String },
}

#[derive(Debug, Default)]
pub struct Outbox {
    pub sends: Vec<Outgoing>,
    pub events: Vec<NodeEvent>,
}

impl Outbox {
    pub fn new() -> Self {
        Self::default()
    }

    fn send(&mut self, msg: Message) {
        self.sends.push(Outgoing { dst: msg.to, msg });
    }

    pub fn is_empty(&self) -> bool {
        self.sends.is_empty() && self.events.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("not the leader; believed leader is {0:?}")]
    NotLeader(Option<NodeId>),
    #[error("leader is still working on another transaction")]
    Busy,
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeSnapshot {
    pub id: NodeId,
    pub role: Role,
    pub term: u64,
    pub leader: Option<NodeId>,
    pub log_len: u64,
    pub committed_len: u64,
    pub phases: BTreeMap<TxnId, RecoveredPhase>,
}

#[derive(Debug, Clone)]
struct Gated {
    /// Log length that must be durable before the message may leave.
    required: u64,
    msg: Message,
}

#[derive(Debug, Clone, Default)]
struct PingState {
    counters: HeartbeatCounters,
    next_ping: Tick,
    outstanding: bool,
    responded: bool,
}

#[derive(Debug, Clone, Copy)]
struct FollowerSeen {
    last: Tick,
    reported: Option<u64>,
}

#[derive(Debug, Clone)]
struct ElectionRound {
    term: u64,
    deadline: Tick,
    candidates: BTreeMap<NodeId, u64>,
}

/// Protocol log used by the leader: every record goes to the DT log and is
/// shipped to the followers as a chain-log entry at the same position.
struct ChainLog<'a> {
    term: u64,
    dt: &'a mut DtLog,
    log: &'a mut ReplicatedLog,
    rep: &'a mut Replicator,
    meta: &'a BTreeMap<TxnId, TxnMeta>,
    out: &'a mut Outbox,
}

impl TxnLog for ChainLog<'_> {
    fn append(&mut self, txn: TxnId, kind: RecordKind) -> Result<(), ProtocolError> {
        self.dt.check(txn, kind)?;
        let meta = match kind {
            RecordKind::Start2PC | RecordKind::VotedYes => self.meta.get(&txn).cloned(),
            _ => None,
        };
        let payload = ChainEntry { txn, kind, meta }.encode();
        let seq = self.dt.append(txn, kind, self.term)?;
        let (_, msgs) = self.rep.leader_replicate(self.log, self.term, payload);
        for m in msgs {
            self.out.send(m);
        }
        record_events(self.out, DtRecord { txn, kind, term: self.term, seq });
        Ok(())
    }
}

fn record_events(out: &mut Outbox, record: DtRecord) {
    out.events.push(NodeEvent::LogAppend { record });
    if let Some(decision) = record.kind.decision() {
        out.events.push(NodeEvent::Decide { txn: record.txn, decision });
    }
}

pub struct Node {
    id: NodeId,
    cfg: ClusterConfig,
    /// Chains that take part in transactions (the dedicated hub does not).
    txn_chains: Vec<ChainId>,
    dt: DtLog,
    log: ReplicatedLog,
    meta: BTreeMap<TxnId, TxnMeta>,
    votes: BTreeMap<TxnId, Vote>,
    /// Announced transactions this chain takes part in, with the tick after
    /// which it stops waiting for a vote request.
    expected: BTreeMap<TxnId, (ChainId, Tick)>,
    term: u64,
    role: Role,
    leader: Option<NodeId>,
    hints: BTreeMap<ChainId, (NodeId, u64)>,
    coordinator: Coordinator,
    participant: Participant,
    replicator: Option<Replicator>,
    gated: VecDeque<Gated>,
    ping: PingState,
    seen: BTreeMap<NodeId, FollowerSeen>,
    election: Option<ElectionRound>,
    /// Prefix of the log verified against the current leader.
    acked_len: u64,
    stale: u64,
}

impl Node {
    /// A node at cluster boot: member 0 of every chain leads at term 1.
    pub fn new(cfg: &ClusterConfig, id: NodeId, dt: DtLog) -> Self {
        let log = rebuild_log(&dt);
        let term = log.last_term().max(1);
        let hints = cfg.chain_ids().into_iter().map(|c| (c, (NodeId { chain: c, node: 0 }, 1))).collect();
        let txn_chains = cfg
            .chain_ids()
            .into_iter()
            .filter(|c| !(cfg.dedicated_hub() && Some(*c) == cfg.hub))
            .collect();
        let mut node = Self {
            id,
            cfg: cfg.clone(),
            txn_chains,
            dt,
            log,
            meta: BTreeMap::new(),
            votes: BTreeMap::new(),
            expected: BTreeMap::new(),
            term,
            role: Role::Follower,
            leader: Some(NodeId { chain: id.chain, node: 0 }),
            hints,
            coordinator: Coordinator::default(),
            participant: Participant::new(id.chain),
            replicator: None,
            gated: VecDeque::new(),
            ping: PingState { next_ping: cfg.timeouts.heartbeat_interval, ..PingState::default() },
            seen: BTreeMap::new(),
            election: None,
            acked_len: 0,
            stale: 0,
        };
        if id.node == 0 {
            let peers: Vec<NodeId> = node.peers().collect();
            node.take_office(0, peers, false, &mut Outbox::new());
        }
        node
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn term(&self) -> u64 {
        self.term
    }

    pub fn is_leader(&self) -> bool {
        self.role == Role::Leader
    }

    pub fn leader(&self) -> Option<NodeId> {
        self.leader
    }

    pub fn dt_log(&self) -> &DtLog {
        &self.dt
    }

    pub fn chain_log(&self) -> &ReplicatedLog {
        &self.log
    }

    pub fn coordinator(&self) -> &Coordinator {
        &self.coordinator
    }

    pub fn participant(&self) -> &Participant {
        &self.participant
    }

    /// Messages ignored because they concerned finished or unknown work.
    pub fn stale_messages(&self) -> u64 {
        self.stale + self.coordinator.stale_messages() + self.participant.stale_messages()
    }

    /// Scripts this chain's vote on `txn` (YES when unset).
    pub fn script_vote(&mut self, txn: TxnId, vote: Vote) {
        self.votes.insert(txn, vote);
    }

    /// The client announces `txn` to every member of a participant chain when
    /// the coordinator starts it. Without a vote request by the deadline the
    /// chain aborts unilaterally.
    pub fn expect_txn(&mut self, now: Tick, txn: TxnId, coordinator: ChainId) {
        let t = &self.cfg.timeouts;
        let deadline = now + t.vote_timeout + t.decision_timeout;
        self.expected.entry(txn).or_insert((coordinator, deadline));
        if self.is_leader() {
            self.arm_expected(txn);
        }
    }

    fn arm_expected(&mut self, txn: TxnId) {
        let Some(&(coordinator, deadline)) = self.expected.get(&txn) else { return };
        if self.participant.get(txn).is_none() && self.dt.phase(txn).is_none() {
            self.participant.insert(ParticipantState::expect(txn, Some(coordinator), deadline));
        }
    }

    pub fn snapshot(&self) -> NodeSnapshot {
        NodeSnapshot {
            id: self.id,
            role: self.role,
            term: self.term,
            leader: self.leader,
            log_len: self.log.len(),
            committed_len: self.log.committed_len(),
            phases: self.dt.replay(),
        }
    }

    fn peers(&self) -> impl Iterator<Item = NodeId> + '_ {
        let me = self.id;
        self.cfg.members(me.chain).filter(move |n| *n != me)
    }

    fn decision_timeout(&self) -> Option<Tick> {
        self.cfg.protocol.recovery_enabled().then_some(self.cfg.timeouts.decision_timeout)
    }

    fn heartbeat(&self) -> bool {
        self.cfg.protocol.heartbeat_enabled()
    }

    /// Whether the client may hand this node a new transaction.
    pub fn ready_for_txn(&self) -> bool {
        self.is_leader() && self.gated.is_empty() && self.coordinator.iter().all(CoordinatorState::is_decided)
    }

    /// Timers, queued sends or an election that will act without any further
    /// input from outside.
    pub fn has_pending_work(&self) -> bool {
        if self.election.is_some() {
            return true;
        }
        match self.role {
            Role::Leader => {
                !self.gated.is_empty()
                    || self.coordinator.next_deadline().is_some()
                    || self.participant.next_deadline().is_some()
                    || self.replicator.as_ref().is_some_and(|r| r.lagging(&self.log))
            }
            _ => self.heartbeat() && (self.leader.is_none() || self.ping.counters.failure > 0),
        }
    }

    // ----- client side -----

    pub fn submit(&mut self, now: Tick, spec: &TxnSpec, out: &mut Outbox) -> Result<(), NodeError> {
        if !self.is_leader() {
            return Err(NodeError::NotLeader(self.leader));
        }
        if spec.coordinator != self.id.chain {
            return Err(ProtocolError::InvalidRequest(format!("{} is coordinated by {}", spec.id, spec.coordinator)).into());
        }
        if !self.ready_for_txn() {
            return Err(NodeError::Busy);
        }
        let local_vote = self.votes.get(&spec.id).copied().unwrap_or_else(|| spec.vote_of(self.id.chain));
        self.meta.insert(
            spec.id,
            TxnMeta { coordinator: self.id.chain, participants: spec.participants.clone(), local_vote },
        );
        let participants: BTreeSet<ChainId> = spec.participants.iter().copied().collect();
        let vote_timeout = self.cfg.timeouts.vote_timeout;
        let sent = self
            .with_log(out, |c, _, log| c.begin(spec.id, participants, local_vote, now, vote_timeout, log))
            .ok_or(NodeError::NotLeader(self.leader))??;
        self.emit(sent, out);
        Ok(())
    }

    // ----- failures -----

    /// Loses everything except the logs and the term.
    pub fn crash(&mut self) {
        self.role = Role::Follower;
        self.leader = None;
        self.reset_volatile();
    }

    /// Comes back as a follower and looks for the current leader. The only
    /// member of a chain resumes leadership at once.
    pub fn restart(&mut self, now: Tick, out: &mut Outbox) {
        self.crash();
        self.ping = PingState { next_ping: now, ..PingState::default() };
        if self.cfg.nodes_per_chain == 1 {
            self.term += 1;
            self.take_office(now, Vec::new(), true, out);
            out.events.push(NodeEvent::Elected { term: self.term });
        }
    }

    fn reset_volatile(&mut self) {
        self.coordinator.clear();
        self.participant.clear();
        self.replicator = None;
        self.gated.clear();
        self.seen.clear();
        self.election = None;
        self.acked_len = 0;
        self.ping = PingState { next_ping: self.ping.next_ping, ..PingState::default() };
    }

    // ----- role changes -----

    fn follow(&mut self, now: Tick, term: u64, leader: Option<NodeId>) {
        let changed = self.role != Role::Follower || self.leader != leader || term != self.term;
        self.term = self.term.max(term);
        if !changed {
            return;
        }
        self.role = Role::Follower;
        self.leader = leader;
        if let Some(l) = leader {
            self.hints.insert(l.chain, (l, self.term));
        }
        self.reset_volatile();
        self.ping.next_ping = now + self.cfg.timeouts.heartbeat_interval;
    }

    /// Becomes leader of `self.term` with `view` as the live followers.
    /// `announce` broadcasts the victory; `presume_abort` aborts transactions
    /// this chain started but never decided instead of resuming them.
    fn take_office(&mut self, now: Tick, view: Vec<NodeId>, presume_abort: bool, out: &mut Outbox) {
        self.reset_volatile();
        self.role = Role::Leader;
        self.leader = Some(self.id);
        self.hints.insert(self.id.chain, (self.id, self.term));
        let rep = Replicator::new(self.id, view.iter().copied());
        for &f in &view {
            self.seen.insert(f, FollowerSeen { last: now, reported: None });
        }
        let mut announce = Vec::new();
        for f in self.peers().collect::<Vec<_>>() {
            let mut win = Message::new(MessageKind::ElectionWin, self.id, f, self.term);
            win.log_len = Some(self.log.len());
            announce.push(win);
        }
        if now > 0 || presume_abort {
            for m in announce {
                out.send(m);
            }
            for &f in &view {
                for m in rep.sync(&self.log, self.term, f, 0) {
                    out.send(m);
                }
            }
        }
        self.replicator = Some(rep);
        // A lone leader's log is durable as soon as it is written.
        if view.is_empty() {
            self.log.set_committed(self.log.len());
        }
        self.resume(now, presume_abort, out);
    }

    /// Rebuilds the protocol tables from the DT log and picks up where the
    /// previous leader stopped.
    fn resume(&mut self, now: Tick, presume_abort: bool, out: &mut Outbox) {
        let started: BTreeSet<TxnId> = self
            .dt
            .records()
            .iter()
            .filter(|r| r.kind == RecordKind::Start2PC)
            .map(|r| r.txn)
            .collect();
        let mut sends = Vec::new();
        let mut presumed = Vec::new();
        for (txn, phase) in self.dt.replay() {
            let meta = self.meta.get(&txn).cloned();
            if started.contains(&txn) {
                let participants: BTreeSet<ChainId> =
                    meta.as_ref().map(|m| m.participants.iter().copied().collect()).unwrap_or_default();
                let local_vote = meta.as_ref().map_or(Vote::Yes, |m| m.local_vote);
                let mut state =
                    CoordinatorState::resume(txn, participants, local_vote, now, self.cfg.timeouts.vote_timeout);
                match phase {
                    RecoveredPhase::Decided(d) => {
                        state.phase = CoordinatorPhase::Decided(d);
                        // Commit goes to everybody; the YES set that abort is
                        // owed to was never logged, so uncertain voters learn
                        // of an abort through recovery.
                        sends.extend(state.decision_messages());
                    }
                    _ if presume_abort || state.participants.is_empty() => presumed.push(txn),
                    _ => sends.extend(state.vote_requests()),
                }
                self.coordinator.insert(state);
                continue;
            }
            match phase {
                RecoveredPhase::Decided(d) => self.participant.insert(ParticipantState::decided(txn, d)),
                RecoveredPhase::VotedYes => {
                    let mut state = ParticipantState::uncertain(
                        txn,
                        meta.as_ref().map(|m| m.coordinator),
                        meta.as_ref().map(|m| m.participants.clone()),
                    );
                    if let Some(m) = &meta {
                        sends.push(Outbound::new(MessageKind::VoteYes, txn, m.coordinator));
                    }
                    if self.cfg.protocol.recovery_enabled() {
                        let peers = state.peers(self.id.chain, &self.txn_chains);
                        sends.extend(state.recovery_initiate(&peers, now, self.cfg.timeouts.recovery_interval));
                    }
                    self.participant.insert(state);
                }
                RecoveredPhase::Started => {}
            }
        }
        for txn in self.expected.keys().copied().collect::<Vec<_>>() {
            self.arm_expected(txn);
        }
        for txn in presumed {
            let aborted = self.with_log(out, |c, _, log| {
                log.append(txn, RecordKind::Abort)?;
                let mut state = c.get(txn).cloned().expect("resumed above");
                state.phase = CoordinatorPhase::Decided(Decision::Abort);
                c.insert(state);
                Ok::<_, ProtocolError>(())
            });
            if let Some(Err(e)) = aborted {
                out.events.push(NodeEvent::Violation { txn: Some(txn), detail: e.to_string() });
            }
        }
        self.emit(sends, out);
    }

    fn start_election(&mut self, now: Tick, term: u64, out: &mut Outbox) {
        self.reset_volatile();
        self.role = Role::Candidate;
        self.leader = None;
        self.term = term;
        let mut candidates = BTreeMap::new();
        candidates.insert(self.id, self.log.len());
        self.election = Some(ElectionRound { term, deadline: now + self.cfg.timeouts.election_window, candidates });
        for p in self.peers().collect::<Vec<_>>() {
            let mut m = Message::new(MessageKind::ElectionStart, self.id, p, term);
            m.log_len = Some(self.log.len());
            out.send(m);
        }
    }

    fn finish_election(&mut self, now: Tick, out: &mut Outbox) {
        let Some(round) = self.election.take() else { return };
        let mut candidates = round.candidates;
        candidates.insert(self.id, self.log.len());
        let list: Vec<(NodeId, u64)> = candidates.iter().map(|(n, l)| (*n, *l)).collect();
        let Ok((winner, _)) = run_election(&list, round.term - 1) else { return };
        if winner == self.id {
            let view = candidates.keys().copied().filter(|n| *n != self.id).collect();
            self.take_office(now, view, false, out);
            out.events.push(NodeEvent::Elected { term: self.term });
        } else {
            self.follow(now, round.term, Some(winner));
        }
    }

    // ----- protocol plumbing -----

    /// Runs `f` against the protocol tables with the chain log as the
    /// record sink. `None` when this node is not the leader.
    fn with_log<R>(
        &mut self,
        out: &mut Outbox,
        f: impl FnOnce(&mut Coordinator, &mut Participant, &mut ChainLog<'_>) -> R,
    ) -> Option<R> {
        let rep = self.replicator.as_mut()?;
        let mut log = ChainLog {
            term: self.term,
            dt: &mut self.dt,
            log: &mut self.log,
            rep,
            meta: &self.meta,
            out,
        };
        Some(f(&mut self.coordinator, &mut self.participant, &mut log))
    }

    /// Queues protocol output behind everything logged so far.
    fn emit(&mut self, outbound: Vec<Outbound>, out: &mut Outbox) {
        let required = self.log.len();
        for ob in outbound {
            for msg in self.address(&ob) {
                self.gated.push_back(Gated { required, msg });
            }
        }
        self.release(out);
    }

    fn release(&mut self, out: &mut Outbox) {
        let durable = self.log.committed_len();
        while self.gated.front().is_some_and(|g| g.required <= durable) {
            let g = self.gated.pop_front().unwrap();
            let dst = self.first_hop(g.msg.to);
            out.sends.push(Outgoing { dst, msg: g.msg });
        }
    }

    fn address(&self, ob: &Outbound) -> Vec<Message> {
        let targets: Vec<NodeId> = if ob.kind == MessageKind::DecisionRequire {
            self.cfg.members(ob.to).collect()
        } else {
            vec![self.hint(ob.to)]
        };
        targets
            .into_iter()
            .map(|to| {
                let mut m = Message::for_txn(ob.kind, ob.txn, self.id, to, self.term);
                m.participants = ob.participants.clone();
                m
            })
            .collect()
    }

    /// Where a cross-chain message to `to` physically goes: straight there,
    /// or through the hub chain's leader.
    fn first_hop(&self, to: NodeId) -> NodeId {
        match self.cfg.relay_hub() {
            Some(hub) if hub != self.id.chain && hub != to.chain => self.hint(hub),
            _ => to,
        }
    }

    fn hint(&self, chain: ChainId) -> NodeId {
        self.hints.get(&chain).map_or(NodeId { chain, node: 0 }, |h| h.0)
    }

    fn learn_leader(&mut self, node: NodeId, term: u64) {
        let entry = self.hints.entry(node.chain).or_insert((node, term));
        if term >= entry.1 {
            *entry = (node, term);
        }
    }

    /// A chain that let a vote deadline pass may have lost its leader: try
    /// the next member next time.
    fn rotate_hint(&mut self, chain: ChainId) {
        let (node, term) = self.hint_entry(chain);
        let next = NodeId { chain, node: (node.node + 1) % self.cfg.nodes_per_chain.max(1) };
        self.hints.insert(chain, (next, term));
    }

    fn hint_entry(&self, chain: ChainId) -> (NodeId, u64) {
        self.hints.get(&chain).copied().unwrap_or((NodeId { chain, node: 0 }, 0))
    }

    fn violation(out: &mut Outbox, txn: Option<TxnId>, e: impl ToString) {
        out.events.push(NodeEvent::Violation { txn, detail: e.to_string() });
    }

    // ----- inputs -----

    pub fn on_message(&mut self, now: Tick, msg: Message, out: &mut Outbox) {
        if msg.kind.is_cross_chain() {
            self.on_cross_chain(now, msg, out);
            return;
        }
        match msg.kind {
            MessageKind::HeartbeatPing => self.on_ping(now, msg, out),
            MessageKind::HeartbeatAck => self.on_ping_ack(now, msg),
            MessageKind::ElectionStart => self.on_election_start(now, msg, out),
            MessageKind::ElectionWin => self.on_election_win(now, msg, out),
            MessageKind::Replicate => self.on_replicate(now, msg, out),
            MessageKind::ReplicateAck => self.on_replicate_ack(now, msg, out),
            _ => unreachable!("cross-chain kinds handled above"),
        }
    }

    fn on_cross_chain(&mut self, now: Tick, mut msg: Message, out: &mut Outbox) {
        if msg.to.chain != self.id.chain {
            // Relay duty on the hub chain.
            if self.is_leader() {
                self.learn_leader(msg.from, msg.term);
                out.sends.push(Outgoing { dst: msg.to, msg });
            } else {
                self.forward(msg, out);
            }
            return;
        }
        if !self.is_leader() {
            if msg.kind == MessageKind::DecisionRequire {
                // Every member got its own copy; the leader answers.
                self.stale += 1;
            } else {
                msg.to = self.leader.unwrap_or(msg.to);
                self.forward(msg, out);
            }
            return;
        }
        self.learn_leader(msg.from, msg.term);
        let Some(txn) = msg.txn else {
            self.stale += 1;
            return;
        };
        let from = msg.from.chain;
        match msg.kind {
            MessageKind::VoteRequest => self.on_vote_request(now, txn, from, msg.participants, out),
            MessageKind::VoteYes | MessageKind::VoteNo => {
                let vote = if msg.kind == MessageKind::VoteYes { Vote::Yes } else { Vote::No };
                match self.with_log(out, |c, _, log| c.on_vote(txn, from, vote, log)) {
                    Some(Ok(sent)) => self.emit(sent, out),
                    Some(Err(e)) => Self::violation(out, Some(txn), e),
                    None => {}
                }
            }
            MessageKind::Commit | MessageKind::Abort | MessageKind::DecisionReply(_) => {
                let decision = msg.kind.decision().expect("decision kinds");
                if self.coordinator.get(txn).is_some() {
                    self.stale += 1;
                    return;
                }
                if let Some(Err(e)) = self.with_log(out, |_, p, log| p.on_decision(txn, decision, log)) {
                    Self::violation(out, Some(txn), e);
                }
            }
            MessageKind::DecisionRequire => self.on_decision_require(txn, from, msg.participants, out),
            _ => unreachable!(),
        }
    }

    /// Passes a misdirected message on to whoever this node believes leads.
    fn forward(&mut self, mut msg: Message, out: &mut Outbox) {
        match self.leader {
            Some(l) if l != self.id => {
                if msg.to.chain == self.id.chain {
                    msg.to = l;
                }
                out.sends.push(Outgoing { dst: l, msg });
            }
            _ => self.stale += 1,
        }
    }

    fn on_vote_request(
        &mut self,
        now: Tick,
        txn: TxnId,
        coordinator: ChainId,
        participants: Option<Vec<ChainId>>,
        out: &mut Outbox,
    ) {
        if self.coordinator.get(txn).is_some() {
            self.stale += 1;
            return;
        }
        let vote = self.votes.get(&txn).copied().unwrap_or_default();
        self.meta.entry(txn).or_insert_with(|| TxnMeta {
            coordinator,
            participants: participants.clone().unwrap_or_default(),
            local_vote: vote,
        });
        let timeout = self.decision_timeout();
        match self.with_log(out, |_, p, log| {
            p.on_vote_request(txn, coordinator, participants, vote, now, timeout, log)
        }) {
            Some(Ok(reply)) => self.emit(vec![reply], out),
            Some(Err(e)) => Self::violation(out, Some(txn), e),
            None => {}
        }
    }

    fn on_decision_require(
        &mut self,
        txn: TxnId,
        from: ChainId,
        participants: Option<Vec<ChainId>>,
        out: &mut Outbox,
    ) {
        let view = match self.coordinator.get(txn) {
            Some(c) => ResponderView::Coordinator(c.phase),
            None => ResponderView::of_participant(self.participant.get(txn)),
        };
        let me = self.id.chain;
        let res = self.with_log(out, |_, _, log| recovery_respond(me, view, txn, from, participants.as_deref(), log));
        match res {
            Some(Ok(Some(reply))) => {
                if matches!(view, ResponderView::Unknown | ResponderView::Participant(ParticipantPhase::Init)) {
                    self.participant.insert(ParticipantState::decided(txn, Decision::Abort));
                }
                self.emit(vec![reply], out);
            }
            Some(Ok(None)) => {}
            Some(Err(e)) => Self::violation(out, Some(txn), e),
            None => {}
        }
    }

    fn on_ping(&mut self, now: Tick, msg: Message, out: &mut Outbox) {
        if !self.is_leader() || msg.from.chain != self.id.chain {
            return;
        }
        let f = msg.from;
        let term = self.term;
        let rep = self.replicator.as_mut().expect("leader has a replicator");
        let mut sends = Vec::new();
        if !rep.is_live(f) {
            sends.extend(rep.mark_up(&self.log, term, f, 0));
        }
        let reported = msg.log_len.unwrap_or(0);
        let seen = self.seen.entry(f).or_insert(FollowerSeen { last: now, reported: None });
        seen.last = now;
        if msg.term == term {
            if reported > 0 {
                let mut ack = Message::new(MessageKind::ReplicateAck, f, self.id, term);
                ack.log_len = Some(reported);
                ack.accepted = Some(true);
                if let AckOutcome::Progress { resend, .. } = rep.on_ack(&mut self.log, term, &ack) {
                    sends.extend(resend);
                }
            }
            // No progress across two pings while behind: something was lost.
            if reported < self.log.len() && seen.reported == Some(reported) {
                sends.extend(rep.sync(&self.log, term, f, reported));
            }
            seen.reported = Some(reported);
        }
        for m in sends {
            out.send(m);
        }
        let mut ack = Message::new(MessageKind::HeartbeatAck, self.id, f, term);
        ack.log_len = Some(self.log.len());
        out.send(ack);
        self.release(out);
    }

    fn on_ping_ack(&mut self, now: Tick, msg: Message) {
        if self.role == Role::Leader || self.election.is_some() || msg.term < self.term {
            return;
        }
        if msg.term > self.term || self.leader.is_none() {
            self.follow(now, msg.term, Some(msg.from));
        }
        if self.leader != Some(msg.from) {
            return;
        }
        self.ping.responded = true;
        let len = msg.log_len.unwrap_or(0);
        if self.log.len() > len {
            // Anything past the leader's end was never made durable.
            self.log.truncate(len);
            if self.dt.truncate(len as usize).is_err() {
                log::error!("{}: DT log truncation failed", self.id);
            }
            self.acked_len = self.acked_len.min(len);
        }
    }

    fn on_election_start(&mut self, now: Tick, msg: Message, out: &mut Outbox) {
        if msg.from.chain != self.id.chain {
            return;
        }
        let len = msg.log_len.unwrap_or(0);
        let joined = self.election.as_ref().map(|e| e.term);
        if msg.term > self.term || (joined.is_none() && msg.term == self.term && self.role != Role::Leader) {
            if joined != Some(msg.term) {
                self.start_election(now, msg.term, out);
            }
            if let Some(e) = self.election.as_mut() {
                e.candidates.insert(msg.from, len);
            }
        } else if joined == Some(msg.term) {
            self.election.as_mut().unwrap().candidates.insert(msg.from, len);
        } else if self.is_leader() {
            let mut win = Message::new(MessageKind::ElectionWin, self.id, msg.from, self.term);
            win.log_len = Some(self.log.len());
            out.send(win);
        }
    }

    fn on_election_win(&mut self, now: Tick, msg: Message, out: &mut Outbox) {
        if msg.from.chain != self.id.chain {
            return;
        }
        let theirs = (msg.from, msg.log_len.unwrap_or(0));
        if msg.term > self.term {
            self.follow(now, msg.term, Some(msg.from));
        } else if msg.term == self.term {
            if self.is_leader() {
                if crate::replication::outranks(theirs, (self.id, self.log.len())) {
                    self.follow(now, msg.term, Some(msg.from));
                } else {
                    let mut win = Message::new(MessageKind::ElectionWin, self.id, msg.from, self.term);
                    win.log_len = Some(self.log.len());
                    out.send(win);
                }
            } else {
                self.follow(now, msg.term, Some(msg.from));
            }
        } else if self.is_leader() {
            let mut win = Message::new(MessageKind::ElectionWin, self.id, msg.from, self.term);
            win.log_len = Some(self.log.len());
            out.send(win);
        }
    }

    fn on_replicate(&mut self, now: Tick, msg: Message, out: &mut Outbox) {
        if msg.term > self.term || (msg.term == self.term && self.role != Role::Leader && self.leader != Some(msg.from)) {
            self.follow(now, msg.term, Some(msg.from));
        }
        let (action, mut ack) = match follower_on_replicate(&mut self.log, self.term, &msg) {
            Ok(r) => r,
            Err(e) => {
                Self::violation(out, None, e);
                return;
            }
        };
        let entry = msg.entry.as_ref().expect("checked by follower_on_replicate");
        match action {
            FollowerAction::Appended => self.apply_entry(entry.index, &mut ack, out),
            FollowerAction::Replaced { from } => {
                if let Err(e) = self.dt.truncate(from as usize) {
                    Self::violation(out, None, e);
                }
                out.events.push(NodeEvent::Truncate { len: from });
                self.acked_len = self.acked_len.min(from);
                self.apply_entry(entry.index, &mut ack, out);
            }
            FollowerAction::Matched | FollowerAction::Gap | FollowerAction::StaleLeader => {}
        }
        if ack.accepted == Some(true) && self.leader == Some(msg.from) {
            self.acked_len = self.acked_len.max(entry.index + 1);
        }
        out.send(ack);
    }

    /// Mirrors chain-log entry `index` into the DT log.
    fn apply_entry(&mut self, index: u64, ack: &mut Message, out: &mut Outbox) {
        let e = self.log.get(index).expect("just written").clone();
        let Some(entry) = ChainEntry::decode(&e.payload) else {
            Self::violation(out, None, "undecodable chain entry");
            self.log.truncate(index);
            ack.accepted = Some(false);
            ack.log_len = Some(index);
            return;
        };
        if let Some(meta) = entry.meta {
            self.meta.insert(entry.txn, meta);
        }
        debug_assert_eq!(self.dt.len() as u64, index);
        match self.dt.append(entry.txn, entry.kind, e.term) {
            Ok(seq) => record_events(out, DtRecord { txn: entry.txn, kind: entry.kind, term: e.term, seq }),
            Err(err) => {
                Self::violation(out, Some(entry.txn), err);
                self.log.truncate(self.dt.len() as u64);
                ack.accepted = Some(false);
                ack.log_len = Some(self.log.len());
            }
        }
    }

    fn on_replicate_ack(&mut self, now: Tick, msg: Message, out: &mut Outbox) {
        if !self.is_leader() {
            return;
        }
        let now_term = self.term;
        let rep = self.replicator.as_mut().expect("leader has a replicator");
        match rep.on_ack(&mut self.log, now_term, &msg) {
            AckOutcome::Progress { resend, .. } => {
                for m in resend {
                    out.send(m);
                }
                self.release(out);
            }
            AckOutcome::StepDown { term } => self.follow(now, term, None),
        }
    }

    pub fn on_tick(&mut self, now: Tick, out: &mut Outbox) {
        if self.election.as_ref().is_some_and(|e| now >= e.deadline) {
            self.finish_election(now, out);
        }
        match self.role {
            Role::Leader => self.leader_tick(now, out),
            Role::Follower => self.follower_tick(now, out),
            Role::Candidate => {}
        }
    }

    fn leader_tick(&mut self, now: Tick, out: &mut Outbox) {
        if self.heartbeat() {
            let limit = (HEARTBEAT_THRESHOLD as Tick + 1) * self.cfg.timeouts.heartbeat_interval;
            let rep = self.replicator.as_mut().expect("leader has a replicator");
            let silent: Vec<NodeId> = rep
                .view()
                .filter(|f| self.seen.get(f).is_none_or(|s| now.saturating_sub(s.last) > limit))
                .collect();
            for f in silent {
                log::debug!("{}: follower {} silent, dropping from view", self.id, f);
                rep.mark_down(&mut self.log, f);
            }
        }
        self.release(out);

        let expired: Vec<(TxnId, Vec<ChainId>)> = self
            .coordinator
            .iter()
            .filter(|s| !s.is_decided() && now >= s.vote_deadline)
            .map(|s| (s.txn, s.participants.difference(&s.yes_received).copied().collect()))
            .collect();
        match self.with_log(out, |c, _, log| c.on_tick(now, log)) {
            Some(Ok(sent)) => self.emit(sent, out),
            Some(Err(e)) => Self::violation(out, None, e),
            None => {}
        }
        for (_, silent) in expired {
            for chain in silent {
                self.rotate_hint(chain);
            }
        }

        let mode: ProtocolMode = self.cfg.mode;
        let interval = self.cfg.timeouts.recovery_interval;
        let chains = self.txn_chains.clone();
        match self.with_log(out, |_, p, log| p.on_tick(now, mode, interval, &chains, log)) {
            Some(Ok(sent)) => self.emit(sent, out),
            Some(Err(e)) => Self::violation(out, None, e),
            None => {}
        }
    }

    fn follower_tick(&mut self, now: Tick, out: &mut Outbox) {
        if !self.heartbeat() || now < self.ping.next_ping {
            return;
        }
        if self.ping.outstanding {
            let (counters, trigger) = self.ping.counters.tick(self.ping.responded);
            self.ping.counters = counters;
            if trigger.is_some() {
                log::debug!("{}: leader {:?} unresponsive, starting election", self.id, self.leader);
                self.start_election(now, self.term + 1, out);
                return;
            }
        }
        let targets: Vec<NodeId> = match self.leader {
            Some(l) => vec![l],
            None => self.peers().collect(),
        };
        for t in targets {
            let mut ping = Message::new(MessageKind::HeartbeatPing, self.id, t, self.term);
            ping.log_len = Some(self.acked_len);
            out.send(ping);
        }
        self.ping.outstanding = true;
        self.ping.responded = false;
        self.ping.next_ping = now + self.cfg.timeouts.heartbeat_interval;
    }

    /// Hub-protocol runs only: whether this node relays for other chains.
    pub fn is_relay(&self) -> bool {
        self.cfg.protocol == ProtocolKind::Hub && self.cfg.hub == Some(self.id.chain)
    }
}

/// Chain log implied by a DT log alone (positions coincide).
fn rebuild_log(dt: &DtLog) -> ReplicatedLog {
    let mut log = ReplicatedLog::new();
    for r in dt.records() {
        let term = r.term.max(log.last_term());
        log.append(term, ChainEntry { txn: r.txn, kind: r.kind, meta: None }.encode());
    }
    log.set_committed(log.len());
    log
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ClusterConfig;

    fn cfg(chains: u16, nodes: u16) -> ClusterConfig {
        ClusterConfig::new(chains, nodes, ProtocolKind::Cbt)
    }

    fn spec(txn: u64) -> TxnSpec {
        TxnSpec {
            id: TxnId(txn),
            coordinator: ChainId(0),
            participants: vec![ChainId(1), ChainId(2)],
            votes: BTreeMap::new(),
            submit_at: 0,
        }
    }

    #[test]
    fn boot_roles() {
        let c = cfg(3, 2);
        let leader = Node::new(&c, NodeId::new(1, 0), DtLog::in_memory());
        let follower = Node::new(&c, NodeId::new(1, 1), DtLog::in_memory());
        assert!(leader.is_leader());
        assert_eq!(follower.role(), Role::Follower);
        assert_eq!(follower.leader(), Some(NodeId::new(1, 0)));
        assert_eq!((leader.term(), follower.term()), (1, 1));
    }

    #[test]
    fn follower_rejects_submission() {
        let c = cfg(3, 2);
        let mut follower = Node::new(&c, NodeId::new(0, 1), DtLog::in_memory());
        let err = follower.submit(0, &spec(1), &mut Outbox::new()).unwrap_err();
        assert!(matches!(err, NodeError::NotLeader(Some(l)) if l == NodeId::new(0, 0)));
    }

    #[test]
    fn vote_requests_wait_for_durability() {
        let c = cfg(3, 2);
        let mut leader = Node::new(&c, NodeId::new(0, 0), DtLog::in_memory());
        let mut follower = Node::new(&c, NodeId::new(0, 1), DtLog::in_memory());
        let mut out = Outbox::new();
        leader.submit(0, &spec(1), &mut out).unwrap();
        // Only the replication message leaves before the follower acks.
        assert_eq!(out.sends.len(), 1);
        assert_eq!(out.sends[0].msg.kind, MessageKind::Replicate);
        let mut fout = Outbox::new();
        follower.on_message(1, out.sends[0].msg.clone(), &mut fout);
        assert_eq!(follower.dt_log().len(), 1);
        let ack = fout.sends.pop().unwrap().msg;
        let mut out2 = Outbox::new();
        leader.on_message(2, ack, &mut out2);
        let kinds: Vec<_> = out2.sends.iter().map(|o| (o.msg.kind, o.dst)).collect();
        assert_eq!(
            kinds,
            vec![
                (MessageKind::VoteRequest, NodeId::new(1, 0)),
                (MessageKind::VoteRequest, NodeId::new(2, 0)),
            ]
        );
        assert!(!leader.ready_for_txn());
    }

    #[test]
    fn single_node_chain_sends_immediately() {
        let c = cfg(2, 1);
        let mut leader = Node::new(&c, NodeId::new(0, 0), DtLog::in_memory());
        let mut out = Outbox::new();
        let s = TxnSpec { participants: vec![ChainId(1)], ..spec(1) };
        leader.submit(0, &s, &mut out).unwrap();
        assert_eq!(out.sends.len(), 1);
        assert_eq!(out.sends[0].msg.kind, MessageKind::VoteRequest);
        assert!(matches!(out.events[0], NodeEvent::LogAppend { .. }));
    }

    #[test]
    fn chain_entry_round_trip() {
        let e = ChainEntry {
            txn: TxnId(4),
            kind: RecordKind::VotedYes,
            meta: Some(TxnMeta { coordinator: ChainId(0), participants: vec![ChainId(1)], local_vote: Vote::Yes }),
        };
        assert_eq!(ChainEntry::decode(&e.encode()), Some(e));
    }
}
