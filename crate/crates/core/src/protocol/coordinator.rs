use std::collections::{BTreeMap, BTreeSet};

use super::{Outbound, ProtocolError, TxnLog};
use crate::dtlog::RecordKind;
use crate::ids::{ChainId, Decision, Tick, TxnId, Vote};
use crate::message::MessageKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoordinatorPhase {
    AwaitingVotes,
    Decided(Decision),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoordinatorState {
    pub txn: TxnId,
    pub participants: BTreeSet<ChainId>,
    /// Chains that answered YES; the only chains owed an abort.
    pub yes_received: BTreeSet<ChainId>,
    pub phase: CoordinatorPhase,
    pub vote_deadline: Tick,
    pub local_vote: Vote,
}

impl CoordinatorState {
    /// Starts the commit-request phase: logs the start record and returns one
    /// vote request per participant chain.
    pub fn begin(
        txn: TxnId,
        participants: BTreeSet<ChainId>,
        local_vote: Vote,
        now: Tick,
        vote_timeout: Tick,
        log: &mut dyn TxnLog,
    ) -> Result<(Self, Vec<Outbound>), ProtocolError> {
        if participants.is_empty() {
            return Err(ProtocolError::InvalidRequest(format!(
                "{txn} has no participants"
            )));
        }
        log.append(txn, RecordKind::Start2PC)?;
        let state = Self {
            txn,
            participants,
            yes_received: BTreeSet::new(),
            phase: CoordinatorPhase::AwaitingVotes,
            vote_deadline: now + vote_timeout,
            local_vote,
        };
        let out = state.vote_requests();
        Ok((state, out))
    }

    /// Rebuilds an undecided coordinator from its start record after a leader
    /// change. The caller re-sends the vote requests.
    pub fn resume(
        txn: TxnId,
        participants: BTreeSet<ChainId>,
        local_vote: Vote,
        now: Tick,
        vote_timeout: Tick,
    ) -> Self {
        Self {
            txn,
            participants,
            yes_received: BTreeSet::new(),
            phase: CoordinatorPhase::AwaitingVotes,
            vote_deadline: now + vote_timeout,
            local_vote,
        }
    }

    pub fn vote_requests(&self) -> Vec<Outbound> {
        let list: Vec<ChainId> = self.participants.iter().copied().collect();
        self.participants
            .iter()
            .map(|&to| Outbound {
                participants: Some(list.clone()),
                ..Outbound::new(MessageKind::VoteRequest, self.txn, to)
            })
            .collect()
    }

    pub fn is_decided(&self) -> bool {
        matches!(self.phase, CoordinatorPhase::Decided(_))
    }

    pub fn decision(&self) -> Option<Decision> {
        match self.phase {
            CoordinatorPhase::Decided(d) => Some(d),
            CoordinatorPhase::AwaitingVotes => None,
        }
    }

    /// Handles a YES or NO from `from`. Votes arriving after the decision, or
    /// from chains outside the participant set, return `Ok(None)` so the
    /// caller can count them as stale; the exception is a YES that lost the
    /// race with the vote timeout, which gets the ABORT it would otherwise
    /// wait for.
    pub fn on_vote(
        &mut self,
        from: ChainId,
        vote: Vote,
        log: &mut dyn TxnLog,
    ) -> Result<Option<Vec<Outbound>>, ProtocolError> {
        if !self.participants.contains(&from) {
            return Ok(None);
        }
        if self.is_decided() {
            let late_yes = vote == Vote::Yes
                && self.phase == CoordinatorPhase::Decided(Decision::Abort)
                && self.yes_received.insert(from);
            return Ok(late_yes.then(|| vec![Outbound::new(MessageKind::Abort, self.txn, from)]));
        }
        match vote {
            Vote::Yes => {
                self.yes_received.insert(from);
                if self.yes_received == self.participants {
                    let decision = match self.local_vote {
                        Vote::Yes => Decision::Commit,
                        Vote::No => Decision::Abort,
                    };
                    return self.decide(decision, log).map(Some);
                }
                Ok(Some(Vec::new()))
            }
            Vote::No => self.decide(Decision::Abort, log).map(Some),
        }
    }

    /// Vote collection timed out: abort and tell every YES voter.
    pub fn on_timeout(&mut self, now: Tick, log: &mut dyn TxnLog) -> Result<Vec<Outbound>, ProtocolError> {
        if self.is_decided() || now < self.vote_deadline {
            return Ok(Vec::new());
        }
        self.decide(Decision::Abort, log)
    }

    fn decide(&mut self, decision: Decision, log: &mut dyn TxnLog) -> Result<Vec<Outbound>, ProtocolError> {
        log.append(self.txn, decision.into())?;
        self.phase = CoordinatorPhase::Decided(decision);
        Ok(self.decision_messages())
    }

    /// Messages announcing the decision: COMMIT to every participant, ABORT
    /// only to chains that voted YES.
    pub fn decision_messages(&self) -> Vec<Outbound> {
        match self.phase {
            CoordinatorPhase::AwaitingVotes => Vec::new(),
            CoordinatorPhase::Decided(Decision::Commit) => self
                .participants
                .iter()
                .map(|&to| Outbound::new(MessageKind::Commit, self.txn, to))
                .collect(),
            CoordinatorPhase::Decided(Decision::Abort) => self
                .yes_received
                .iter()
                .map(|&to| Outbound::new(MessageKind::Abort, self.txn, to))
                .collect(),
        }
    }
}

/// Coordinator-side table of transactions, keyed by id.
#[derive(Debug, Default, Clone)]
pub struct Coordinator {
    txns: BTreeMap<TxnId, CoordinatorState>,
    stale: u64,
}

impl Coordinator {
    pub fn begin(
        &mut self,
        txn: TxnId,
        participants: BTreeSet<ChainId>,
        local_vote: Vote,
        now: Tick,
        vote_timeout: Tick,
        log: &mut dyn TxnLog,
    ) -> Result<Vec<Outbound>, ProtocolError> {
        if self.txns.contains_key(&txn) {
            return Err(ProtocolError::DuplicateTxn(txn));
        }
        let (state, out) = CoordinatorState::begin(txn, participants, local_vote, now, vote_timeout, log)?;
        self.txns.insert(txn, state);
        Ok(out)
    }

    pub fn insert(&mut self, state: CoordinatorState) {
        self.txns.insert(state.txn, state);
    }

    /// Routes a vote; unknown or already-decided transactions only bump the
    /// stale counter.
    pub fn on_vote(
        &mut self,
        txn: TxnId,
        from: ChainId,
        vote: Vote,
        log: &mut dyn TxnLog,
    ) -> Result<Vec<Outbound>, ProtocolError> {
        let Some(state) = self.txns.get_mut(&txn) else {
            self.stale += 1;
            return Ok(Vec::new());
        };
        match state.on_vote(from, vote, log)? {
            Some(out) => Ok(out),
            None => {
                self.stale += 1;
                Ok(Vec::new())
            }
        }
    }

    /// Fires every expired vote deadline.
    pub fn on_tick(&mut self, now: Tick, log: &mut dyn TxnLog) -> Result<Vec<Outbound>, ProtocolError> {
        let mut out = Vec::new();
        for state in self.txns.values_mut() {
            if !state.is_decided() && now >= state.vote_deadline {
                out.extend(state.on_timeout(now, log)?);
            }
        }
        Ok(out)
    }

    pub fn get(&self, txn: TxnId) -> Option<&CoordinatorState> {
        self.txns.get(&txn)
    }

    pub fn iter(&self) -> impl Iterator<Item = &CoordinatorState> {
        self.txns.values()
    }

    pub fn stale_messages(&self) -> u64 {
        self.stale
    }

    pub fn next_deadline(&self) -> Option<Tick> {
        self.txns
            .values()
            .filter(|s| !s.is_decided())
            .map(|s| s.vote_deadline)
            .min()
    }

    pub fn clear(&mut self) {
        self.txns.clear();
    }
}
