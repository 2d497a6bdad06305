use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::ReplicationError;
use crate::ids::NodeId;
use crate::message::{EntryTransfer, Message, MessageKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub index: u64,
    pub term: u64,
    pub payload: Vec<u8>,
}

/// A chain's block log as held by one node. Indices are dense from zero and
/// terms never decrease along the log.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReplicatedLog {
    entries: Vec<LogEntry>,
    /// Length of the durable prefix.
    committed: u64,
}

/// What a follower did with one replicated entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FollowerAction {
    Appended,
    /// Already present with the same term.
    Matched,
    /// Conflicting suffix from `from` on was cut before appending.
    Replaced { from: u64 },
    /// Entry lies past the end of the log; nothing was written.
    Gap,
    /// Sender's term is behind ours; nothing was written.
    StaleLeader,
}

impl ReplicatedLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> u64 {
        self.entries.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn get(&self, index: u64) -> Option<&LogEntry> {
        self.entries.get(index as usize)
    }

    pub fn last_term(&self) -> u64 {
        self.entries.last().map_or(0, |e| e.term)
    }

    pub fn committed_len(&self) -> u64 {
        self.committed
    }

    /// Index of the last durable entry.
    pub fn committed_index(&self) -> Option<u64> {
        self.committed.checked_sub(1)
    }

    pub fn append(&mut self, term: u64, payload: Vec<u8>) -> u64 {
        debug_assert!(term >= self.last_term());
        let index = self.len();
        self.entries.push(LogEntry { index, term, payload });
        index
    }

    pub fn truncate(&mut self, len: u64) {
        self.entries.truncate(len as usize);
        self.committed = self.committed.min(len);
    }

    pub fn set_committed(&mut self, len: u64) {
        self.committed = self.committed.max(len.min(self.len()));
    }

    /// Follower side: store one entry shipped by the leader. `local_term` is
    /// the follower's current term.
    pub fn follower_apply(&mut self, local_term: u64, sender_term: u64, entry: &EntryTransfer) -> FollowerAction {
        if sender_term < local_term {
            return FollowerAction::StaleLeader;
        }
        let action = match self.get(entry.index) {
            _ if entry.index > self.len() => return FollowerAction::Gap,
            None => {
                self.append(entry.entry_term, entry.payload.clone());
                FollowerAction::Appended
            }
            Some(e) if e.term == entry.entry_term => FollowerAction::Matched,
            Some(_) => {
                self.truncate(entry.index);
                self.append(entry.entry_term, entry.payload.clone());
                FollowerAction::Replaced { from: entry.index }
            }
        };
        self.set_committed(entry.leader_commit.min(entry.index + 1));
        action
    }
}

/// Builds the follower's answer to a Replicate message after applying it.
pub fn follower_on_replicate(
    log: &mut ReplicatedLog,
    local_term: u64,
    msg: &Message,
) -> Result<(FollowerAction, Message), ReplicationError> {
    let entry = msg
        .entry
        .as_ref()
        .ok_or(ReplicationError::Malformed("Replicate without entry"))?;
    let action = log.follower_apply(local_term, msg.term, entry);
    let (accepted, log_len) = match action {
        FollowerAction::Appended | FollowerAction::Matched | FollowerAction::Replaced { .. } => {
            (true, entry.index + 1)
        }
        FollowerAction::Gap | FollowerAction::StaleLeader => (false, log.len()),
    };
    let mut ack = Message::new(MessageKind::ReplicateAck, msg.to, msg.from, local_term.max(msg.term));
    ack.log_len = Some(log_len);
    ack.accepted = Some(accepted);
    Ok((action, ack))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Progress {
    match_len: u64,
}

/// Leader-side replication bookkeeping: which followers are considered live
/// and how much of the log each one holds.
#[derive(Debug, Clone)]
pub struct Replicator {
    me: NodeId,
    progress: BTreeMap<NodeId, Progress>,
    view: BTreeSet<NodeId>,
}

/// Result of handling a ReplicateAck on the leader.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AckOutcome {
    /// Durable prefix length after the ack.
    Progress { committed: u64, resend: Vec<Message> },
    /// The follower has seen a newer term.
    StepDown { term: u64 },
}

impl Replicator {
    /// `followers` are the chain members the leader currently believes live.
    pub fn new(me: NodeId, followers: impl IntoIterator<Item = NodeId>) -> Self {
        let view: BTreeSet<NodeId> = followers.into_iter().filter(|f| *f != me).collect();
        let progress = view.iter().map(|&f| (f, Progress { match_len: 0 })).collect();
        Self { me, progress, view }
    }

    pub fn view(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.view.iter().copied()
    }

    pub fn is_live(&self, node: NodeId) -> bool {
        self.view.contains(&node)
    }

    /// Majority of the live view, counting the leader.
    pub fn quorum(&self) -> usize {
        (self.view.len() + 1) / 2 + 1
    }

    /// Appends `payload` as the leader and ships it to every live follower.
    pub fn leader_replicate(
        &mut self,
        log: &mut ReplicatedLog,
        term: u64,
        payload: Vec<u8>,
    ) -> (u64, Vec<Message>) {
        let index = log.append(term, payload);
        let out = self.view.iter().map(|&f| self.ship(log, term, f, index)).collect();
        self.advance(log);
        (index, out)
    }

    fn ship(&self, log: &ReplicatedLog, term: u64, to: NodeId, index: u64) -> Message {
        let e = &log.entries()[index as usize];
        let mut msg = Message::new(MessageKind::Replicate, self.me, to, term);
        msg.entry = Some(EntryTransfer {
            index,
            entry_term: e.term,
            payload: e.payload.clone(),
            leader_commit: log.committed_len(),
        });
        msg
    }

    /// Every entry from `from` on, addressed to `to`.
    pub fn sync(&self, log: &ReplicatedLog, term: u64, to: NodeId, from: u64) -> Vec<Message> {
        (from..log.len()).map(|i| self.ship(log, term, to, i)).collect()
    }

    pub fn on_ack(&mut self, log: &mut ReplicatedLog, term: u64, ack: &Message) -> AckOutcome {
        if ack.term > term {
            return AckOutcome::StepDown { term: ack.term };
        }
        let follower = ack.from;
        let log_len = ack.log_len.unwrap_or(0);
        self.view.insert(follower);
        let p = self.progress.entry(follower).or_insert(Progress { match_len: 0 });
        let resend = if ack.accepted == Some(true) {
            p.match_len = p.match_len.max(log_len);
            Vec::new()
        } else {
            self.sync(log, term, follower, log_len)
        };
        let committed = self.advance(log);
        AckOutcome::Progress { committed, resend }
    }

    pub fn match_len(&self, node: NodeId) -> u64 {
        self.progress.get(&node).map_or(0, |p| p.match_len)
    }

    /// Whether some live follower has not yet acknowledged the whole log.
    pub fn lagging(&self, log: &ReplicatedLog) -> bool {
        self.view.iter().any(|f| self.match_len(*f) < log.len())
    }

    /// Drops a follower from the live view; the quorum shrinks with it.
    pub fn mark_down(&mut self, log: &mut ReplicatedLog, node: NodeId) -> u64 {
        self.view.remove(&node);
        self.advance(log)
    }

    /// Re-admits a follower, returning the entries it needs from `from` on.
    pub fn mark_up(&mut self, log: &ReplicatedLog, term: u64, node: NodeId, from: u64) -> Vec<Message> {
        if node == self.me || !self.view.insert(node) {
            return Vec::new();
        }
        self.progress.insert(node, Progress { match_len: 0 });
        self.sync(log, term, node, from)
    }

    fn advance(&self, log: &mut ReplicatedLog) -> u64 {
        let mut lens: Vec<u64> = self
            .view
            .iter()
            .map(|f| self.progress.get(f).map_or(0, |p| p.match_len))
            .collect();
        lens.push(log.len());
        lens.sort_unstable_by(|a, b| b.cmp(a));
        let durable = lens[self.quorum() - 1];
        log.set_committed(durable);
        log.committed_len()
    }
}
