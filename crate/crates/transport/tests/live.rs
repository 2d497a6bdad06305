use std::net::TcpListener as StdListener;
use std::time::Duration;

use cbt_core::{ChainId, ClusterConfig, Decision, Message, MessageKind, NodeId, ProtocolKind, Role, TxnId, Vote, Workload};
use cbt_transport::wire::{read_frame, write_frame, WireError};
use cbt_transport::{sim_run, FaultSchedule, LiveCluster, LiveOptions, PeerLink, SimOptions, TraceEvent};
use tokio::io::AsyncWriteExt;

fn fast() -> LiveOptions {
    LiveOptions { tick_ms: 5, ..LiveOptions::default() }
}

#[tokio::test]
async fn frames_cross_a_socket() {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let m = Message::for_txn(MessageKind::VoteRequest, TxnId(2), NodeId::new(0, 0), NodeId::new(1, 0), 1)
        .with_participants(vec![ChainId(1)]);
    let sent = m.clone();
    let client = tokio::spawn(async move {
        let mut s = tokio::net::TcpStream::connect(addr).await.unwrap();
        write_frame(&mut s, &sent).await.unwrap();
        s.write_all(&[0, 0, 0, 3, b'{', b'x', b'}']).await.unwrap();
    });
    let (mut sock, _) = listener.accept().await.unwrap();
    assert_eq!(read_frame(&mut sock).await.unwrap(), Some(m));
    assert!(matches!(read_frame(&mut sock).await, Err(WireError::Json(_))));
    client.await.unwrap();
}

#[tokio::test]
async fn sending_to_a_closed_port_counts_as_loss() {
    let port = {
        let l = StdListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap()
    };
    let link = PeerLink::spawn(port, Duration::from_millis(50));
    link.send(Message::new(MessageKind::HeartbeatPing, NodeId::new(0, 1), NodeId::new(0, 0), 1));
    for _ in 0..100 {
        if link.failures() == 1 {
            return;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("message to a closed port was not reported lost");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn live_decisions_match_the_simulator() {
    let cfg = ClusterConfig::new(3, 2, ProtocolKind::Cbt);
    let w = Workload::uniform(5, &cfg.chain_ids()).with_vote(TxnId(4), ChainId(1), Vote::No);
    let cluster = LiveCluster::start(&cfg, fast()).await.unwrap();
    let live = cluster.run_workload(&w, Duration::from_secs(20)).await.unwrap();
    cluster.shutdown().await;

    let sim = sim_run(&cfg, &w, &FaultSchedule::new(1), SimOptions::default()).unwrap();
    let mut expected = std::collections::BTreeMap::new();
    for e in sim.trace.iter() {
        if let TraceEvent::Decide { node, txn, decision } = &e.event {
            if node.chain == ChainId(0) {
                expected.insert(*txn, *decision);
            }
        }
    }
    assert_eq!(live, expected);
    assert_eq!(live[&TxnId(4)], Decision::Abort);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn live_leader_crash_elects_a_successor() {
    let cfg = ClusterConfig::new(2, 2, ProtocolKind::Cbt);
    let cluster = LiveCluster::start(&cfg, fast()).await.unwrap();
    let mut events = cluster.subscribe();
    let first = Workload::uniform(1, &cfg.chain_ids());
    cluster.run_workload(&first, Duration::from_secs(10)).await.unwrap();

    cluster.crash(NodeId::new(0, 0)).await.unwrap();
    let mut w = Workload::uniform(2, &cfg.chain_ids());
    w.txns.remove(0);
    let got = cluster.run_workload(&w, Duration::from_secs(20)).await.unwrap();
    assert_eq!(got[&TxnId(2)], Decision::Commit);

    let leader = cluster.leader_of(ChainId(0)).await.unwrap().unwrap();
    assert_eq!(leader.snapshot.id, NodeId::new(0, 1));
    assert_eq!(leader.snapshot.role, Role::Leader);
    let mut saw_election = false;
    loop {
        match events.try_recv() {
            Ok(e) => saw_election |= matches!(e.event, TraceEvent::Election { node, .. } if node == NodeId::new(0, 1)),
            Err(tokio::sync::broadcast::error::TryRecvError::Lagged(_)) => continue,
            Err(_) => break,
        }
    }
    assert!(saw_election);
    cluster.shutdown().await;
}
