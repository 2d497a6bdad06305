//! Per-transaction commit state machines.
//!
//! Everything here is a synchronous transition: state plus input in, state
//! plus outbound messages out. Time only arrives as an explicit `now`. Every
//! transition that produces a decision writes it to the supplied log before
//! returning the messages that announce it.

mod coordinator;
mod participant;
mod recovery;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dtlog::{DtLog, DtLogError, RecordKind};
use crate::ids::{ChainId, Decision, TxnId};
use crate::message::MessageKind;

pub use coordinator::{Coordinator, CoordinatorPhase, CoordinatorState};
pub use participant::{Participant, ParticipantPhase, ParticipantState};
pub use recovery::{recovery_respond, ResponderView};

/// Behaviour of an uncertain participant whose recovery round got no answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolMode {
    /// Write an abort record and stop, exactly as the initiator algorithm
    /// reads. Can disagree with a coordinator that already committed.
    #[serde(alias = "paper", alias = "paperliteral")]
    PaperLiteral,
    /// Ask again. Never aborts unilaterally while uncertain.
    #[default]
    Safe,
}

/// A cross-chain message produced by a state machine, addressed to a chain.
/// The node runtime resolves the chain to its current leader.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outbound {
    pub kind: MessageKind,
    pub txn: TxnId,
    pub to: ChainId,
    pub participants: Option<Vec<ChainId>>,
}

impl Outbound {
    pub fn new(kind: MessageKind, txn: TxnId, to: ChainId) -> Self {
        Self {
            kind,
            txn,
            to,
            participants: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("duplicate transaction {0}")]
    DuplicateTxn(TxnId),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("protocol violation on {txn}: {detail}")]
    ProtocolViolation { txn: TxnId, detail: String },
    #[error("invariant violation on {txn}: decided {held}, then told {got}")]
    InvariantViolation {
        txn: TxnId,
        held: Decision,
        got: Decision,
    },
    #[error(transparent)]
    Log(#[from] DtLogError),
}

/// Sink for protocol records. The node runtime routes appends through the
/// chain's replicated log; tests use a bare [`DtLog`].
pub trait TxnLog {
    fn append(&mut self, txn: TxnId, kind: RecordKind) -> Result<(), ProtocolError>;
}

/// A [`DtLog`] stamped with a fixed leadership term.
pub struct AtTerm<'a>(pub &'a mut DtLog, pub u64);

impl TxnLog for AtTerm<'_> {
    fn append(&mut self, txn: TxnId, kind: RecordKind) -> Result<(), ProtocolError> {
        self.0.append(txn, kind, self.1)?;
        Ok(())
    }
}
