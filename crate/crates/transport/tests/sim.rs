use cbt_core::{
    ChainId, ClusterConfig, Decision, MessageKind, NodeId, ProtocolKind, RecordKind, RecoveredPhase, TxnId, Vote,
    Workload,
};
use cbt_transport::{sim_run, FaultEvent, FaultSchedule, MatchRule, Outcome, SimOptions, SimResult, TraceEvent};

fn run(cfg: &ClusterConfig, w: &Workload, f: &FaultSchedule) -> SimResult {
    sim_run(cfg, w, f, SimOptions::default()).unwrap()
}

fn one_txn(chains: u16, protocol: ProtocolKind) -> (ClusterConfig, Workload) {
    let cfg = ClusterConfig::new(chains, 2, protocol);
    let w = Workload::uniform(1, &cfg.chain_ids());
    (cfg, w)
}

/// Tick at which the coordinator leader appends its decision for `txn`.
fn decision_logged_at(r: &SimResult, txn: TxnId) -> u64 {
    r.trace
        .iter()
        .find(|e| {
            matches!(&e.event, TraceEvent::LogAppend { node, record }
                if *node == NodeId::new(0, 0) && record.txn == txn && record.kind == RecordKind::Commit)
        })
        .expect("decision logged")
        .tick
}

#[test]
fn failure_free_transaction_uses_three_messages_per_participant() {
    let (cfg, w) = one_txn(3, ProtocolKind::Cbt);
    let r = run(&cfg, &w, &FaultSchedule::new(1));
    assert_eq!(r.outcome, Outcome::Completed);
    assert_eq!(r.stats.cross_chain_messages, 6);
    for n in &r.nodes {
        assert_eq!(n.phases.get(&TxnId(1)), Some(&RecoveredPhase::Decided(Decision::Commit)), "{}", n.id);
    }
}

#[test]
fn cbt_and_2pc_agree_when_nothing_fails() {
    let cfg = ClusterConfig::new(3, 2, ProtocolKind::Cbt);
    let w = Workload::uniform(5, &cfg.chain_ids()).with_vote(TxnId(3), ChainId(2), Vote::No);
    let cbt = run(&cfg, &w, &FaultSchedule::new(3));
    let tpc = run(&ClusterConfig::new(3, 2, ProtocolKind::Blocking2pc), &w, &FaultSchedule::new(3));
    assert_eq!(cbt.stats.cross_chain_messages, tpc.stats.cross_chain_messages);
    assert_eq!((cbt.stats.committed_txns, cbt.stats.aborted_txns), (4, 1));
    assert_eq!((tpc.stats.committed_txns, tpc.stats.aborted_txns), (4, 1));
    assert_eq!(tpc.stats.heartbeat_messages, 0);
    assert!(cbt.stats.heartbeat_messages > 0);
}

#[test]
fn crash_between_decision_log_and_broadcast() {
    let (cfg, w) = one_txn(3, ProtocolKind::Blocking2pc);
    let probe = run(&cfg, &w, &FaultSchedule::new(1));
    let crash_at = decision_logged_at(&probe, TxnId(1)) + 1;
    let faults = FaultSchedule::new(1).crash(NodeId::new(0, 0), crash_at);

    let blocked = run(&cfg, &w, &faults);
    assert_eq!(blocked.outcome, Outcome::Blocked { undecided: vec![TxnId(1)] });
    for n in blocked.nodes.iter().filter(|n| n.id.chain != ChainId(0)) {
        assert_eq!(n.phases.get(&TxnId(1)), Some(&RecoveredPhase::VotedYes));
    }

    let (cfg, _) = one_txn(3, ProtocolKind::Cbt);
    let recovered = run(&cfg, &w, &faults);
    assert_eq!(recovered.outcome, Outcome::Completed);
    for n in recovered.nodes.iter().filter(|n| !recovered.crashed.contains(&n.id)) {
        assert_eq!(n.phases.get(&TxnId(1)), Some(&RecoveredPhase::Decided(Decision::Commit)), "{}", n.id);
    }
}

#[test]
fn budget_exhaustion_is_reported_as_blocking() {
    let (cfg, w) = one_txn(2, ProtocolKind::Blocking2pc);
    let faults = FaultSchedule::new(1).crash(NodeId::new(0, 0), 0);
    let r = sim_run(&cfg, &w, &faults, SimOptions { max_ticks: Some(50), record_trace: false }).unwrap();
    assert!(matches!(r.outcome, Outcome::Blocked { .. }));
    assert!(r.trace.is_empty());
}

#[test]
fn identical_inputs_give_identical_trace_bytes() {
    let cfg = ClusterConfig::new(3, 2, ProtocolKind::Cbt);
    let w = Workload::round_robin(12, &cfg.chain_ids(), 2);
    let faults = FaultSchedule::new(42)
        .crash(NodeId::new(1, 0), 15)
        .restart(NodeId::new(1, 0), 60)
        .with(FaultEvent::DelayMessage { rule: MatchRule::kind(MessageKind::VoteYes), ticks: 2, count: Some(3) });
    let a = run(&cfg, &w, &faults).trace.to_ndjson();
    let b = run(&cfg, &w, &faults).trace.to_ndjson();
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn crashed_nodes_receive_nothing_until_restart() {
    let cfg = ClusterConfig::new(3, 2, ProtocolKind::Cbt);
    let w = Workload::uniform(4, &cfg.chain_ids());
    let victim = NodeId::new(2, 0);
    let faults = FaultSchedule::new(5).crash(victim, 6).restart(victim, 40);
    let r = run(&cfg, &w, &faults);
    let mut down = false;
    let mut sent = std::collections::BTreeSet::new();
    for e in r.trace.iter() {
        match &e.event {
            TraceEvent::Crash { node } if *node == victim => down = true,
            TraceEvent::Restart { node } if *node == victim => down = false,
            TraceEvent::Send { msg, .. } => {
                sent.insert(msg.id);
            }
            TraceEvent::Deliver { dst, msg } => {
                assert!(!(down && *dst == victim), "delivery to crashed node at tick {}", e.tick);
                assert!(sent.contains(&msg.id), "delivery before send");
            }
            _ => {}
        }
    }
    assert_eq!(r.outcome, Outcome::Completed);
}

#[test]
fn dropped_commit_is_recovered_by_participant() {
    let (cfg, w) = one_txn(2, ProtocolKind::Cbt);
    let faults = FaultSchedule::new(1).with(FaultEvent::DropMessage { rule: MatchRule::kind(MessageKind::Commit), count: 1 });
    let r = run(&cfg, &w, &faults);
    assert_eq!(r.outcome, Outcome::Completed);
    assert_eq!(r.stats.dropped_messages, 1);
    let kinds: Vec<_> = r
        .trace
        .iter()
        .filter_map(|e| match &e.event {
            TraceEvent::Send { msg, .. } if msg.kind.is_cross_chain() => Some(msg.kind),
            _ => None,
        })
        .collect();
    assert!(kinds.contains(&MessageKind::DecisionRequire));
    assert!(kinds.contains(&MessageKind::DecisionReply(Decision::Commit)));
}

#[test]
fn hub_doubles_every_cross_chain_hop() {
    let mut cfg = ClusterConfig::new(4, 2, ProtocolKind::Hub);
    cfg.hub = Some(ChainId(3));
    let w = Workload::uniform(1, &[ChainId(0), ChainId(1), ChainId(2)]);
    let r = run(&cfg, &w, &FaultSchedule::new(1));
    assert_eq!(r.outcome, Outcome::Completed);
    assert_eq!(r.stats.cross_chain_messages, 12);
    for e in r.trace.iter() {
        if let TraceEvent::Send { hop, dst, msg } = &e.event {
            if msg.kind.is_cross_chain() {
                assert!(hop.chain == ChainId(3) || dst.chain == ChainId(3), "direct edge {hop} -> {dst}");
            }
        }
    }
}

#[test]
fn hub_crash_blocks_in_flight_transactions() {
    let mut cfg = ClusterConfig::new(4, 2, ProtocolKind::Hub);
    cfg.hub = Some(ChainId(3));
    let w = Workload::uniform(1, &[ChainId(0), ChainId(1), ChainId(2)]);
    let probe = run(&cfg, &w, &FaultSchedule::new(1));
    // Participants have voted; the coordinator's Commit is queued at the hub.
    let commit_sent = probe
        .trace
        .iter()
        .find(|e| matches!(&e.event, TraceEvent::Send { msg, .. } if msg.kind == MessageKind::Commit))
        .unwrap()
        .tick;
    let faults = FaultSchedule::new(1).crash(NodeId::new(3, 0), commit_sent + 1);
    let r = run(&cfg, &w, &faults);
    assert_eq!(r.outcome, Outcome::Blocked { undecided: vec![TxnId(1)] });
}

#[test]
fn unknown_fault_target_is_rejected() {
    let (cfg, w) = one_txn(2, ProtocolKind::Cbt);
    let faults = FaultSchedule::new(1).crash(NodeId::new(7, 0), 3);
    assert!(sim_run(&cfg, &w, &faults, SimOptions::default()).is_err());
}
