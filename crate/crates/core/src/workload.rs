//! Transactions submitted to a cluster, with their scripted votes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ids::{ChainId, Tick, TxnId, Vote};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxnSpec {
    pub id: TxnId,
    pub coordinator: ChainId,
    pub participants: Vec<ChainId>,
    /// Votes that differ from the default YES.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub votes: BTreeMap<ChainId, Vote>,
    /// Earliest tick at which the client hands the transaction over.
    #[serde(default)]
    pub submit_at: Tick,
}

impl TxnSpec {
    pub fn vote_of(&self, chain: ChainId) -> Vote {
        self.votes.get(&chain).copied().unwrap_or_default()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workload {
    pub txns: Vec<TxnSpec>,
}

impl Workload {
    /// `count` transactions coordinated by the lowest chain with every other
    /// transaction chain participating.
    pub fn uniform(count: usize, chains: &[ChainId]) -> Self {
        let coordinator = chains[0];
        let participants: Vec<ChainId> = chains[1..].to_vec();
        Self {
            txns: (1..=count as u64)
                .map(|i| TxnSpec {
                    id: TxnId(i),
                    coordinator,
                    participants: participants.clone(),
                    votes: BTreeMap::new(),
                    submit_at: 0,
                })
                .collect(),
        }
    }

    /// Coordinators assigned round-robin over `chains`; each transaction
    /// involves the next `per_txn` chains (cyclically) as participants.
    pub fn round_robin(count: usize, chains: &[ChainId], per_txn: usize) -> Self {
        let n = chains.len();
        let per_txn = per_txn.min(n.saturating_sub(1)).max(1);
        Self {
            txns: (0..count)
                .map(|i| {
                    let c = i % n;
                    TxnSpec {
                        id: TxnId(i as u64 + 1),
                        coordinator: chains[c],
                        participants: (1..=per_txn).map(|k| chains[(c + k) % n]).collect(),
                        votes: BTreeMap::new(),
                        submit_at: 0,
                    }
                })
                .collect(),
        }
    }

    /// Sets `chain`'s vote on `txn`.
    pub fn with_vote(mut self, txn: TxnId, chain: ChainId, vote: Vote) -> Self {
        if let Some(t) = self.txns.iter_mut().find(|t| t.id == txn) {
            t.votes.insert(chain, vote);
        }
        self
    }

    pub fn len(&self) -> usize {
        self.txns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.txns.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_robin_spreads_coordinators() {
        let chains: Vec<ChainId> = (0..4).map(ChainId).collect();
        let w = Workload::round_robin(8, &chains, 2);
        assert_eq!(w.txns[0].coordinator, ChainId(0));
        assert_eq!(w.txns[3].coordinator, ChainId(3));
        assert_eq!(w.txns[3].participants, vec![ChainId(0), ChainId(1)]);
        assert_eq!(w.txns[7].id, TxnId(8));
        let two = Workload::round_robin(2, &chains[..2], 2);
        assert_eq!(two.txns[1].participants, vec![ChainId(0)]);
    }

    #[test]
    fn uniform_uses_lowest_chain() {
        let chains: Vec<ChainId> = (0..3).map(ChainId).collect();
        let w = Workload::uniform(5, &chains).with_vote(TxnId(2), ChainId(1), Vote::No);
        assert!(w.txns.iter().all(|t| t.coordinator == ChainId(0)));
        assert_eq!(w.txns[1].vote_of(ChainId(1)), Vote::No);
        assert_eq!(w.txns[1].vote_of(ChainId(2)), Vote::Yes);
    }
}
