//! Responder side of the interactive recovery protocol.

use super::{CoordinatorPhase, Outbound, ParticipantPhase, ParticipantState, ProtocolError, TxnLog};
use crate::dtlog::RecordKind;
use crate::ids::{ChainId, Decision, TxnId};
use crate::message::MessageKind;

/// What the responding chain knows about the transaction in question.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResponderView {
    /// No local state at all.
    Unknown,
    Coordinator(CoordinatorPhase),
    Participant(ParticipantPhase),
}

/// Answers a DECISION-REQUIRE from chain `from`.
///
/// A decided responder reports its decision. A participant that has not
/// voted aborts on the spot (the abort is logged here) and reports it; the
/// caller must mark its local state decided. A responder that is itself
/// uncertain, or a coordinator still collecting votes, stays silent. A chain
/// with no record answers only if the request lists it as a participant,
/// since otherwise it cannot tell whether it was ever involved.
pub fn recovery_respond(
    me: ChainId,
    view: ResponderView,
    txn: TxnId,
    from: ChainId,
    participants: Option<&[ChainId]>,
    log: &mut dyn TxnLog,
) -> Result<Option<Outbound>, ProtocolError> {
    let reply = |d| Some(Outbound::new(MessageKind::DecisionReply(d), txn, from));
    match view {
        ResponderView::Coordinator(CoordinatorPhase::Decided(d))
        | ResponderView::Participant(ParticipantPhase::Decided(d)) => Ok(reply(d)),
        ResponderView::Participant(ParticipantPhase::Init) => {
            log.append(txn, RecordKind::Abort)?;
            Ok(reply(Decision::Abort))
        }
        ResponderView::Unknown if participants.is_some_and(|p| p.contains(&me)) => {
            log.append(txn, RecordKind::Abort)?;
            Ok(reply(Decision::Abort))
        }
        ResponderView::Unknown
        | ResponderView::Participant(ParticipantPhase::VotedYes)
        | ResponderView::Coordinator(CoordinatorPhase::AwaitingVotes) => Ok(None),
    }
}

impl ResponderView {
    pub fn of_participant(state: Option<&ParticipantState>) -> Self {
        match state {
            Some(s) => ResponderView::Participant(s.phase),
            None => ResponderView::Unknown,
        }
    }
}
