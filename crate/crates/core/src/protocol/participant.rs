use std::collections::{BTreeMap, BTreeSet};

use super::{Outbound, ProtocolError, ProtocolMode, TxnLog};
use crate::dtlog::RecordKind;
use crate::ids::{ChainId, Decision, Tick, TxnId, Vote};
use crate::message::MessageKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParticipantPhase {
    Init,
    /// The uncertain period: entered on logging YES, left only on a decision.
    VotedYes,
    Decided(Decision),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParticipantState {
    pub txn: TxnId,
    pub phase: ParticipantPhase,
    pub coordinator: Option<ChainId>,
    /// Participant chains as announced by the vote request. `None` after a
    /// restart from a bare DT log.
    pub participants: Option<Vec<ChainId>>,
    /// Init: give up waiting for a vote request at this tick.
    pub wait_deadline: Option<Tick>,
    /// VotedYes: start asking peers at this tick.
    pub decision_deadline: Option<Tick>,
    pub recovery_round: u32,
    pub recovery_deadline: Option<Tick>,
}

impl ParticipantState {
    /// A participant that knows a transaction is coming but has not been
    /// asked to vote yet.
    pub fn expect(txn: TxnId, coordinator: Option<ChainId>, wait_deadline: Tick) -> Self {
        Self {
            txn,
            phase: ParticipantPhase::Init,
            coordinator,
            participants: None,
            wait_deadline: Some(wait_deadline),
            decision_deadline: None,
            recovery_round: 0,
            recovery_deadline: None,
        }
    }

    fn fresh(txn: TxnId) -> Self {
        Self {
            txn,
            phase: ParticipantPhase::Init,
            coordinator: None,
            participants: None,
            wait_deadline: None,
            decision_deadline: None,
            recovery_round: 0,
            recovery_deadline: None,
        }
    }

    /// A participant restored from its log in the uncertain period.
    pub fn uncertain(txn: TxnId, coordinator: Option<ChainId>, participants: Option<Vec<ChainId>>) -> Self {
        Self {
            phase: ParticipantPhase::VotedYes,
            coordinator,
            participants,
            ..Self::fresh(txn)
        }
    }

    pub fn decided(txn: TxnId, decision: Decision) -> Self {
        Self {
            phase: ParticipantPhase::Decided(decision),
            ..Self::fresh(txn)
        }
    }

    /// Answers a vote request. YES is logged before the vote is returned; NO
    /// logs an abort and ends the transaction locally.
    pub fn on_vote_request(
        &mut self,
        coordinator: ChainId,
        participants: Option<Vec<ChainId>>,
        local_vote: Vote,
        now: Tick,
        decision_timeout: Option<Tick>,
        log: &mut dyn TxnLog,
    ) -> Result<Outbound, ProtocolError> {
        self.coordinator = Some(coordinator);
        if participants.is_some() {
            self.participants = participants;
        }
        if self.phase == ParticipantPhase::Init {
            match local_vote {
                Vote::Yes => {
                    log.append(self.txn, RecordKind::VotedYes)?;
                    self.phase = ParticipantPhase::VotedYes;
                    self.decision_deadline = decision_timeout.map(|t| now + t);
                }
                Vote::No => {
                    log.append(self.txn, RecordKind::Abort)?;
                    self.phase = ParticipantPhase::Decided(Decision::Abort);
                }
            }
            self.wait_deadline = None;
        }
        Ok(Outbound::new(self.recorded_vote(), self.txn, coordinator))
    }

    /// The vote this participant stands by, for replays of a vote request.
    pub fn recorded_vote(&self) -> MessageKind {
        match self.phase {
            ParticipantPhase::Decided(Decision::Abort) => MessageKind::VoteNo,
            _ => MessageKind::VoteYes,
        }
    }

    /// Gave up waiting for a vote request: abort unilaterally, say nothing.
    pub fn on_wait_timeout(&mut self, now: Tick, log: &mut dyn TxnLog) -> Result<bool, ProtocolError> {
        match (self.phase, self.wait_deadline) {
            (ParticipantPhase::Init, Some(deadline)) if now >= deadline => {
                log.append(self.txn, RecordKind::Abort)?;
                self.phase = ParticipantPhase::Decided(Decision::Abort);
                self.wait_deadline = None;
                Ok(true)
            }
            _ => Ok(false),
        }
    }

    /// Applies a decision from the coordinator or a recovery peer. Returns
    /// whether anything changed.
    pub fn on_decision(&mut self, decision: Decision, log: &mut dyn TxnLog) -> Result<bool, ProtocolError> {
        match self.phase {
            ParticipantPhase::Decided(held) if held == decision => Ok(false),
            ParticipantPhase::Decided(held) => Err(ProtocolError::InvariantViolation {
                txn: self.txn,
                held,
                got: decision,
            }),
            ParticipantPhase::Init if decision == Decision::Commit => Err(ProtocolError::ProtocolViolation {
                txn: self.txn,
                detail: "commit received before voting".into(),
            }),
            ParticipantPhase::Init | ParticipantPhase::VotedYes => {
                log.append(self.txn, decision.into())?;
                self.phase = ParticipantPhase::Decided(decision);
                self.wait_deadline = None;
                self.decision_deadline = None;
                self.recovery_deadline = None;
                Ok(true)
            }
        }
    }

    /// Chains to consult when uncertain: coordinator and the other
    /// participants, or every other chain when the transaction's membership
    /// was lost with a crash.
    pub fn peers(&self, me: ChainId, all_chains: &[ChainId]) -> BTreeSet<ChainId> {
        match (&self.participants, self.coordinator) {
            (Some(parts), Some(coord)) => parts
                .iter()
                .copied()
                .chain(std::iter::once(coord))
                .filter(|&c| c != me)
                .collect(),
            _ => all_chains.iter().copied().filter(|&c| c != me).collect(),
        }
    }

    /// Broadcasts DECISION-REQUIRE to `peers` and arms the next recovery
    /// deadline.
    pub fn recovery_initiate(
        &mut self,
        peers: &BTreeSet<ChainId>,
        now: Tick,
        recovery_interval: Tick,
    ) -> Vec<Outbound> {
        if self.phase != ParticipantPhase::VotedYes {
            return Vec::new();
        }
        self.decision_deadline = None;
        self.recovery_round += 1;
        self.recovery_deadline = Some(now + recovery_interval);
        peers
            .iter()
            .map(|&to| Outbound {
                participants: self.participants.clone(),
                ..Outbound::new(MessageKind::DecisionRequire, self.txn, to)
            })
            .collect()
    }

    /// A recovery round ended without an answer.
    pub fn recovery_on_timeout(
        &mut self,
        mode: ProtocolMode,
        peers: &BTreeSet<ChainId>,
        now: Tick,
        recovery_interval: Tick,
        log: &mut dyn TxnLog,
    ) -> Result<Vec<Outbound>, ProtocolError> {
        if self.phase != ParticipantPhase::VotedYes {
            return Ok(Vec::new());
        }
        match mode {
            ProtocolMode::PaperLiteral => {
                log.append(self.txn, RecordKind::Abort)?;
                self.phase = ParticipantPhase::Decided(Decision::Abort);
                self.recovery_deadline = None;
                Ok(Vec::new())
            }
            ProtocolMode::Safe => Ok(self.recovery_initiate(peers, now, recovery_interval)),
        }
    }

    pub fn decision(&self) -> Option<Decision> {
        match self.phase {
            ParticipantPhase::Decided(d) => Some(d),
            _ => None,
        }
    }

    fn next_deadline(&self) -> Option<Tick> {
        [self.wait_deadline, self.decision_deadline, self.recovery_deadline]
            .into_iter()
            .flatten()
            .min()
    }
}

/// Participant-side table of transactions for one chain.
#[derive(Debug, Clone)]
pub struct Participant {
    me: ChainId,
    txns: BTreeMap<TxnId, ParticipantState>,
    stale: u64,
}

impl Participant {
    pub fn new(me: ChainId) -> Self {
        Self {
            me,
            txns: BTreeMap::new(),
            stale: 0,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn on_vote_request(
        &mut self,
        txn: TxnId,
        coordinator: ChainId,
        participants: Option<Vec<ChainId>>,
        local_vote: Vote,
        now: Tick,
        decision_timeout: Option<Tick>,
        log: &mut dyn TxnLog,
    ) -> Result<Outbound, ProtocolError> {
        let state = self.txns.entry(txn).or_insert_with(|| ParticipantState::fresh(txn));
        state.on_vote_request(coordinator, participants, local_vote, now, decision_timeout, log)
    }

    /// Applies a decision. Unknown transactions accept an abort and reject a
    /// commit, matching the never-voted case.
    pub fn on_decision(&mut self, txn: TxnId, decision: Decision, log: &mut dyn TxnLog) -> Result<bool, ProtocolError> {
        let state = self.txns.entry(txn).or_insert_with(|| ParticipantState::fresh(txn));
        let changed = state.on_decision(decision, log);
        if matches!(changed, Ok(false)) {
            self.stale += 1;
        }
        if state.phase == ParticipantPhase::Init && state.wait_deadline.is_none() {
            self.txns.remove(&txn);
        }
        changed
    }

    /// Drives every armed timer that has expired.
    pub fn on_tick(
        &mut self,
        now: Tick,
        mode: ProtocolMode,
        recovery_interval: Tick,
        all_chains: &[ChainId],
        log: &mut dyn TxnLog,
    ) -> Result<Vec<Outbound>, ProtocolError> {
        let mut out = Vec::new();
        for state in self.txns.values_mut() {
            if state.wait_deadline.is_some_and(|d| now >= d) {
                state.on_wait_timeout(now, log)?;
            }
            if state.decision_deadline.is_some_and(|d| now >= d) {
                let peers = state.peers(self.me, all_chains);
                out.extend(state.recovery_initiate(&peers, now, recovery_interval));
            } else if state.recovery_deadline.is_some_and(|d| now >= d) {
                let peers = state.peers(self.me, all_chains);
                out.extend(state.recovery_on_timeout(mode, &peers, now, recovery_interval, log)?);
            }
        }
        Ok(out)
    }

    pub fn insert(&mut self, state: ParticipantState) {
        self.txns.insert(state.txn, state);
    }

    pub fn get(&self, txn: TxnId) -> Option<&ParticipantState> {
        self.txns.get(&txn)
    }

    pub fn get_mut(&mut self, txn: TxnId) -> Option<&mut ParticipantState> {
        self.txns.get_mut(&txn)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParticipantState> {
        self.txns.values()
    }

    pub fn stale_messages(&self) -> u64 {
        self.stale
    }

    pub fn next_deadline(&self) -> Option<Tick> {
        self.txns.values().filter_map(ParticipantState::next_deadline).min()
    }

    pub fn me(&self) -> ChainId {
        self.me
    }

    pub fn clear(&mut self) {
        self.txns.clear();
    }
}
