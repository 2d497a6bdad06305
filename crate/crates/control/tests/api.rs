use std::time::Duration;

use cbt_control::{router, AppState, ClusterState, Created, StreamEvent, Submitted, TxnStatus};
use cbt_core::{MessageKind, NodeId, Role, TxnId};
use cbt_transport::TraceEvent;
use futures_util::StreamExt;
use serde_json::json;
use tokio_tungstenite::tungstenite::Message;

async fn spawn_server() -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router(AppState::default())).await.unwrap() });
    format!("127.0.0.1:{}", addr.port())
}

async fn create(http: &reqwest::Client, base: &str, body: serde_json::Value) -> Created {
    let resp = http.post(format!("http://{base}/clusters")).json(&body).send().await.unwrap();
    assert_eq!(resp.status(), 201);
    resp.json().await.unwrap()
}

async fn state(http: &reqwest::Client, base: &str, id: u64) -> ClusterState {
    http.get(format!("http://{base}/clusters/{id}/state")).send().await.unwrap().json().await.unwrap()
}

type Ws = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

async fn events(base: &str, id: u64, from: u64) -> Ws {
    let (ws, _) = tokio_tungstenite::connect_async(format!("ws://{base}/clusters/{id}/events?from={from}")).await.unwrap();
    ws
}

async fn next_event(ws: &mut Ws) -> StreamEvent {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(30), ws.next()).await.expect("event in time");
        match msg.expect("stream open").unwrap() {
            Message::Text(t) => return serde_json::from_str(&t).unwrap(),
            Message::Close(_) => panic!("stream closed"),
            _ => {}
        }
    }
}

fn is_coordinator_commit(ev: &StreamEvent, txn: TxnId) -> bool {
    matches!(&ev.entry.event, TraceEvent::Send { hop, msg, .. }
        if msg.kind == MessageKind::Commit && msg.txn == Some(txn) && *hop == NodeId::new(0, 0) && msg.from == *hop)
}

/// Submits five transactions, crashes the coordinator leader right after the
/// first one's commit broadcast, and returns the final counter.
async fn crash_after_first_commit(protocol: &str) -> (u64, ClusterState) {
    let base = spawn_server().await;
    let http = reqwest::Client::new();
    let c = create(
        &http,
        &base,
        json!({"chains": 3, "nodes_per_chain": 2, "protocol": protocol, "ticks_per_second": 40}),
    )
    .await;
    let mut ws = events(&base, c.id, 0).await;
    let sub: Submitted = http
        .post(format!("http://{base}/clusters/{}/txns", c.id))
        .json(&json!({"count": 5}))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(sub.txns, (1..=5).map(TxnId).collect::<Vec<_>>());

    let mut seen = 0;
    while seen < 2 {
        let ev = next_event(&mut ws).await;
        if is_coordinator_commit(&ev, TxnId(1)) {
            seen += 1;
        }
    }
    let resp = http.post(format!("http://{base}/clusters/{}/nodes/0.0/crash", c.id)).send().await.unwrap();
    assert_eq!(resp.status(), 204);

    // Run well past the point where every transaction would have finished.
    let deadline = tokio::time::Instant::now() + Duration::from_secs(30);
    loop {
        let s = state(&http, &base, c.id).await;
        let settled = s.txns.iter().all(|t| matches!(t.status, TxnStatus::Committed | TxnStatus::Aborted));
        if settled || (protocol == "2pc" && s.tick > 400) || tokio::time::Instant::now() > deadline {
            return (s.commit_counter, s);
        }
        tokio::time::sleep(Duration::from_millis(100)).await;
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn blocking_2pc_counter_freezes_at_two() {
    let (counter, s) = crash_after_first_commit("2pc").await;
    assert_eq!(counter, 2);
    assert_eq!(s.txns[0].status, TxnStatus::Committed);
    assert!(s.txns[1..].iter().all(|t| t.status == TxnStatus::Blocked), "{:?}", s.txns);
    assert!(s.nodes.iter().any(|n| n.id == NodeId::new(0, 0) && n.crashed));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn cbt_counter_reaches_ten() {
    let (counter, s) = crash_after_first_commit("cbt").await;
    assert_eq!(counter, 10);
    assert!(s.txns.iter().all(|t| t.status == TxnStatus::Committed), "{:?}", s.txns);
}

#[tokio::test]
async fn fresh_cluster_has_one_leader_per_chain() {
    let base = spawn_server().await;
    let http = reqwest::Client::new();
    let c = create(&http, &base, json!({"chains": 3, "nodes_per_chain": 2, "ticks_per_second": 1000})).await;
    assert_eq!(c.nodes.len(), 6);
    let s = state(&http, &base, c.id).await;
    for chain in 0..3 {
        let leaders = s.nodes.iter().filter(|n| n.id.chain.0 == chain && n.role == Role::Leader).count();
        assert_eq!(leaders, 1, "chain {chain}");
    }
    assert!(s.nodes.iter().all(|n| n.phases.is_empty() && !n.crashed));
    assert!(s.txns.is_empty());
    assert_eq!(s.commit_counter, 0);
}

#[tokio::test]
async fn bad_requests_are_rejected() {
    let base = spawn_server().await;
    let http = reqwest::Client::new();
    let resp = http
        .post(format!("http://{base}/clusters"))
        .json(&json!({"chains": 1, "protocol": "cbt"}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 400);
    let body: serde_json::Value = resp.json().await.unwrap();
    assert!(body["error"].is_string());

    assert_eq!(http.get(format!("http://{base}/clusters/9/state")).send().await.unwrap().status(), 404);

    let c = create(&http, &base, json!({"chains": 2})).await;
    let crash = |node: &str| http.post(format!("http://{base}/clusters/{}/nodes/{node}/crash", c.id)).send();
    assert_eq!(crash("x").await.unwrap().status(), 400);
    assert_eq!(crash("5.0").await.unwrap().status(), 404);
    let txns = http.post(format!("http://{base}/clusters/{}/txns", c.id)).json(&json!({"count": 0})).send();
    assert_eq!(txns.await.unwrap().status(), 400);

    let del = http.delete(format!("http://{base}/clusters/{}", c.id)).send().await.unwrap();
    assert_eq!(del.status(), 204);
    assert_eq!(http.get(format!("http://{base}/clusters/{}/state", c.id)).send().await.unwrap().status(), 404);
    let ids: Vec<u64> = http.get(format!("http://{base}/clusters")).send().await.unwrap().json().await.unwrap();
    assert!(ids.is_empty());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn event_stream_is_ordered_and_replayable() {
    let base = spawn_server().await;
    let http = reqwest::Client::new();
    let c = create(&http, &base, json!({"chains": 2, "nodes_per_chain": 2, "ticks_per_second": 500})).await;
    let mut ws = events(&base, c.id, 0).await;
    http.post(format!("http://{base}/clusters/{}/txns", c.id)).json(&json!({"count": 2})).send().await.unwrap();

    let mut live = Vec::new();
    let mut counter = 0;
    while counter < 2 {
        let ev = next_event(&mut ws).await;
        if let Some(n) = ev.commit_counter {
            assert_eq!(n, counter + 1);
            counter = n;
        }
        live.push(ev);
    }
    for (i, ev) in live.iter().enumerate() {
        assert_eq!(ev.seq, i as u64);
    }
    let s = state(&http, &base, c.id).await;
    assert_eq!(s.commit_counter, 2);
    assert!(s.events >= live.len() as u64);

    // A late subscriber replays the same prefix.
    let mut replay = events(&base, c.id, 3).await;
    for want in &live[3..] {
        assert_eq!(&next_event(&mut replay).await, want);
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn live_transport_commits_over_tcp() {
    let base = spawn_server().await;
    let http = reqwest::Client::new();
    let c = create(&http, &base, json!({"chains": 2, "nodes_per_chain": 2, "transport": "live", "tick_ms": 5})).await;
    http.post(format!("http://{base}/clusters/{}/txns", c.id)).json(&json!({"count": 2})).send().await.unwrap();
    let deadline = tokio::time::Instant::now() + Duration::from_secs(30);
    loop {
        let s = state(&http, &base, c.id).await;
        if s.txns.iter().all(|t| t.status == TxnStatus::Committed) {
            assert_eq!(s.commit_counter, 2);
            break;
        }
        assert!(tokio::time::Instant::now() < deadline, "{:?}", s.txns);
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    let del = http.delete(format!("http://{base}/clusters/{}", c.id)).send().await.unwrap();
    assert_eq!(del.status(), 204);
}
