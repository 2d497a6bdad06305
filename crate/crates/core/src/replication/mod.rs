//! Intra-chain consistency: leader/follower log replication, heartbeat
//! failure detection and leader election.

mod election;
mod heartbeat;
mod log;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::NodeId;
use crate::message::Message;

pub use election::{outranks, run_election};
pub use heartbeat::{heartbeat_tick, ElectionTrigger, HeartbeatCounters, HEARTBEAT_THRESHOLD};
pub use log::{follower_on_replicate, AckOutcome, FollowerAction, LogEntry, ReplicatedLog, Replicator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Leader,
    Follower,
    Candidate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRole {
    pub role: Role,
    pub term: u64,
}

#[derive(Debug, Error)]
pub enum ReplicationError {
    #[error("not the leader; believed leader is {0:?}")]
    NotLeader(Option<NodeId>),
    #[error("no live node left in the chain")]
    ChainDead,
    #[error("malformed replication message: {0}")]
    Malformed(&'static str),
}

/// Leader-checked entry point for appending to the chain log: refuses when
/// `role` is not the leader, naming the leader the caller believes in.
pub fn leader_replicate(
    role: NodeRole,
    believed_leader: Option<NodeId>,
    replicator: &mut Replicator,
    log: &mut ReplicatedLog,
    payload: Vec<u8>,
) -> Result<(u64, Vec<Message>), ReplicationError> {
    if role.role != Role::Leader {
        return Err(ReplicationError::NotLeader(believed_leader));
    }
    Ok(replicator.leader_replicate(log, role.term, payload))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn follower_cannot_replicate() {
        let me = NodeId::new(0, 1);
        let leader = NodeId::new(0, 0);
        let mut rep = Replicator::new(me, [leader]);
        let mut log = ReplicatedLog::new();
        let role = NodeRole { role: Role::Follower, term: 1 };
        let err = leader_replicate(role, Some(leader), &mut rep, &mut log, vec![1]).unwrap_err();
        assert!(matches!(err, ReplicationError::NotLeader(Some(l)) if l == leader));
        assert!(log.is_empty());
    }

    #[test]
    fn leader_replicates_at_its_term() {
        let me = NodeId::new(0, 0);
        let mut rep = Replicator::new(me, [NodeId::new(0, 1)]);
        let mut log = ReplicatedLog::new();
        let role = NodeRole { role: Role::Leader, term: 1 };
        let (index, out) = leader_replicate(role, Some(me), &mut rep, &mut log, b"p0".to_vec()).unwrap();
        assert_eq!((index, log.last_term(), out.len()), (0, 1, 1));
    }
}
