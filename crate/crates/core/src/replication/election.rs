use super::ReplicationError;
use crate::ids::NodeId;

/// Picks the new leader among live candidates: longest log first, lowest
/// node id on ties. Returns the winner and the new term.
pub fn run_election(candidates: &[(NodeId, u64)], term: u64) -> Result<(NodeId, u64), ReplicationError> {
    candidates
        .iter()
        .max_by(|(a, la), (b, lb)| la.cmp(lb).then(b.cmp(a)))
        .map(|&(winner, _)| (winner, term + 1))
        .ok_or(ReplicationError::ChainDead)
}

/// Whether `a` beats `b` under the election rule.
pub fn outranks(a: (NodeId, u64), b: (NodeId, u64)) -> bool {
    a.1 > b.1 || (a.1 == b.1 && a.0 < b.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn n(i: u16) -> NodeId {
        NodeId::new(0, i)
    }

    #[test]
    fn equal_logs_lowest_id_wins() {
        assert_eq!(run_election(&[(n(2), 4), (n(1), 4)], 1).unwrap(), (n(1), 2));
    }

    #[test]
    fn longer_log_wins() {
        assert_eq!(run_election(&[(n(1), 3), (n(2), 4)], 1).unwrap(), (n(2), 2));
    }

    #[test]
    fn no_live_nodes_is_chain_dead() {
        assert!(matches!(run_election(&[], 1), Err(ReplicationError::ChainDead)));
    }

    #[test]
    fn outranks_agrees_with_election() {
        let cands = [(n(0), 2), (n(1), 5), (n(2), 5)];
        let (w, _) = run_election(&cands, 0).unwrap();
        assert!(cands.iter().filter(|c| c.0 != w).all(|&c| outranks((w, 5), c)));
    }
}
