//! The closed vocabulary of protocol messages.

use serde::{Deserialize, Serialize};

use crate::ids::{ChainId, Decision, NodeId, TxnId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    VoteRequest,
    VoteYes,
    VoteNo,
    Commit,
    Abort,
    DecisionRequire,
    DecisionReply(Decision),
    HeartbeatPing,
    HeartbeatAck,
    ElectionStart,
    ElectionWin,
    Replicate,
    ReplicateAck,
}

impl MessageKind {
    pub const ALL: [MessageKind; 14] = [
        MessageKind::VoteRequest,
        MessageKind::VoteYes,
        MessageKind::VoteNo,
        MessageKind::Commit,
        MessageKind::Abort,
        MessageKind::DecisionRequire,
        MessageKind::DecisionReply(Decision::Commit),
        MessageKind::DecisionReply(Decision::Abort),
        MessageKind::HeartbeatPing,
        MessageKind::HeartbeatAck,
        MessageKind::ElectionStart,
        MessageKind::ElectionWin,
        MessageKind::Replicate,
        MessageKind::ReplicateAck,
    ];

    /// Messages exchanged between chains by the commit protocol.
    pub fn is_cross_chain(self) -> bool {
        matches!(
            self,
            MessageKind::VoteRequest
                | MessageKind::VoteYes
                | MessageKind::VoteNo
                | MessageKind::Commit
                | MessageKind::Abort
                | MessageKind::DecisionRequire
                | MessageKind::DecisionReply(_)
        )
    }

    pub fn is_heartbeat(self) -> bool {
        matches!(self, MessageKind::HeartbeatPing | MessageKind::HeartbeatAck)
    }

    /// Decision carried by this kind, if any.
    pub fn decision(self) -> Option<Decision> {
        match self {
            MessageKind::Commit | MessageKind::DecisionReply(Decision::Commit) => {
                Some(Decision::Commit)
            }
            MessageKind::Abort | MessageKind::DecisionReply(Decision::Abort) => {
                Some(Decision::Abort)
            }
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::VoteRequest => "VoteRequest",
            MessageKind::VoteYes => "VoteYes",
            MessageKind::VoteNo => "VoteNo",
            MessageKind::Commit => "Commit",
            MessageKind::Abort => "Abort",
            MessageKind::DecisionRequire => "DecisionRequire",
            MessageKind::DecisionReply(Decision::Commit) => "DecisionReply(Commit)",
            MessageKind::DecisionReply(Decision::Abort) => "DecisionReply(Abort)",
            MessageKind::HeartbeatPing => "HeartbeatPing",
            MessageKind::HeartbeatAck => "HeartbeatAck",
            MessageKind::ElectionStart => "ElectionStart",
            MessageKind::ElectionWin => "ElectionWin",
            MessageKind::Replicate => "Replicate",
            MessageKind::ReplicateAck => "ReplicateAck",
        }
    }
}

/// One replicated log entry in flight from a leader to a follower.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryTransfer {
    pub index: u64,
    pub entry_term: u64,
    pub payload: Vec<u8>,
    /// Length of the leader's durable prefix when the entry was sent.
    pub leader_commit: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub kind: MessageKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub txn: Option<TxnId>,
    pub from: NodeId,
    pub to: NodeId,
    /// Intra-chain leadership epoch of the sender.
    pub term: u64,
    /// Participant chains of the transaction (VoteRequest, DecisionRequire).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub participants: Option<Vec<ChainId>>,
    /// Replicate: the entry being shipped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry: Option<EntryTransfer>,
    /// ReplicateAck: follower log length after handling; ElectionStart /
    /// ElectionWin: sender log length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_len: Option<u64>,
    /// ReplicateAck: false when the follower rejected the entry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accepted: Option<bool>,
}

impl Message {
    pub fn new(kind: MessageKind, from: NodeId, to: NodeId, term: u64) -> Self {
        Self {
            kind,
            txn: None,
            from,
            to,
            term,
            participants: None,
            entry: None,
            log_len: None,
            accepted: None,
        }
    }

    pub fn for_txn(kind: MessageKind, txn: TxnId, from: NodeId, to: NodeId, term: u64) -> Self {
        Self {
            txn: Some(txn),
            ..Self::new(kind, from, to, term)
        }
    }

    pub fn with_participants(mut self, participants: Vec<ChainId>) -> Self {
        self.participants = Some(participants);
        self
    }
}

/// A message together with the node it is physically handed to. The hop
/// differs from `msg.to` only when the message is relayed through a hub.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outgoing {
    pub dst: NodeId,
    pub msg: Message,
}
