//! Live cluster over TCP loopback: every node runs as its own task with a
//! listener, a serialized state-machine loop and one writer per peer.

use std::collections::{BTreeMap, HashMap};
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use cbt_core::dtlog::log_path;
use cbt_core::{
    ChainId, ClusterConfig, ConfigError, Decision, DtLog, DtLogError, DtRecord, Message, Node, NodeError, NodeEvent,
    NodeId, NodeSnapshot, Outbox, Role, Tick, Timeouts, TxnId, TxnSpec, Vote, Workload,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::io::{AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{broadcast, mpsc, oneshot};
use tokio::task::JoinHandle;
use tokio::time::{self, Instant, MissedTickBehavior};

use crate::trace::{MsgSummary, TraceEntry, TraceEvent};
use crate::wire::{frame, read_frame};

#[derive(Debug, Error)]
pub enum LiveError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    DtLog(#[from] DtLogError),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("no ready leader on {0}")]
    NoLeader(ChainId),
    #[error("{0} rejected the submission: {1}")]
    Rejected(NodeId, NodeError),
    #[error("timed out waiting for {0}")]
    Timeout(String),
    #[error("cluster is shut down")]
    Closed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LiveOptions {
    pub tick_ms: u64,
    pub host: IpAddr,
    /// Node `i` (in chain-major order) listens on `base_port + i`; 0 picks
    /// free ports.
    pub base_port: u16,
    /// File-backed DT logs under this directory; in memory otherwise.
    pub data_dir: Option<PathBuf>,
}

impl Default for LiveOptions {
    fn default() -> Self {
        Self { tick_ms: 10, host: IpAddr::V4(Ipv4Addr::LOCALHOST), base_port: 0, data_dir: None }
    }
}

impl LiveOptions {
    /// Default millisecond timeouts expressed in this tick length.
    pub fn timeouts(&self) -> Timeouts {
        Timeouts::from_millis(&Timeouts::LIVE_MS, self.tick_ms)
    }
}

/// What the control plane can see of one node.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeView {
    pub snapshot: NodeSnapshot,
    pub crashed: bool,
    pub ready: bool,
    pub tick: Tick,
    pub records: Vec<DtRecord>,
}

/// Outbound link to one peer. Connects lazily, reconnects once per message
/// and otherwise drops it; the protocol's timeouts handle the loss.
#[derive(Debug, Clone)]
pub struct PeerLink {
    tx: mpsc::UnboundedSender<Message>,
    failures: Arc<AtomicU64>,
}

impl PeerLink {
    pub fn spawn(addr: SocketAddr, connect_timeout: Duration) -> Self {
        let (tx, rx) = mpsc::unbounded_channel();
        let failures = Arc::new(AtomicU64::new(0));
        tokio::spawn(write_loop(addr, rx, failures.clone(), connect_timeout));
        Self { tx, failures }
    }

    pub fn send(&self, msg: Message) {
        let _ = self.tx.send(msg);
    }

    /// Messages given up on so far.
    pub fn failures(&self) -> u64 {
        self.failures.load(Ordering::Relaxed)
    }
}

async fn write_loop(
    addr: SocketAddr,
    mut rx: mpsc::UnboundedReceiver<Message>,
    failures: Arc<AtomicU64>,
    connect_timeout: Duration,
) {
    let mut stream: Option<TcpStream> = None;
    while let Some(msg) = rx.recv().await {
        let bytes = frame(&msg);
        let mut sent = false;
        for _ in 0..2 {
            if stream.is_none() {
                match time::timeout(connect_timeout, TcpStream::connect(addr)).await {
                    Ok(Ok(s)) => {
                        let _ = s.set_nodelay(true);
                        stream = Some(s);
                    }
                    _ => break,
                }
            }
            match stream.as_mut().unwrap().write_all(&bytes).await {
                Ok(()) => {
                    sent = true;
                    break;
                }
                Err(_) => stream = None,
            }
        }
        if !sent {
            failures.fetch_add(1, Ordering::Relaxed);
            log::debug!("dropping {} to {addr}: peer unreachable", msg.kind.name());
        }
    }
}

/// Accepts connections and forwards every decoded frame to `inbox`. A
/// malformed frame closes its connection.
pub async fn listen(listener: TcpListener, inbox: mpsc::UnboundedSender<Message>) {
    loop {
        let Ok((sock, peer)) = listener.accept().await else { continue };
        let inbox = inbox.clone();
        tokio::spawn(async move {
            let mut r = BufReader::new(sock);
            loop {
                match read_frame(&mut r).await {
                    Ok(Some(m)) => {
                        if inbox.send(m).is_err() {
                            break;
                        }
                    }
                    Ok(None) => break,
                    Err(e) => {
                        log::warn!("closing connection from {peer}: {e}");
                        break;
                    }
                }
            }
        });
    }
}

enum Command {
    Submit(TxnSpec, oneshot::Sender<Result<(), NodeError>>),
    ScriptVote(TxnId, Vote),
    Expect(TxnId, ChainId),
    Crash,
    Restart,
    View(oneshot::Sender<NodeView>),
}

struct NodeTask {
    node: Node,
    crashed: bool,
    now: Tick,
    peers: HashMap<NodeId, PeerLink>,
    events: broadcast::Sender<TraceEntry>,
    ids: Arc<AtomicU64>,
}

impl NodeTask {
    fn emit(&self, event: TraceEvent) {
        let _ = self.events.send(TraceEntry { tick: self.now, event });
    }

    fn flush(&mut self, out: Outbox) {
        let me = self.node.id();
        for ev in out.events {
            self.emit(match ev {
                NodeEvent::LogAppend { record } => TraceEvent::LogAppend { node: me, record },
                NodeEvent::Decide { txn, decision } => TraceEvent::Decide { node: me, txn, decision },
                NodeEvent::Truncate { len } => TraceEvent::Truncate { node: me, len },
                NodeEvent::Elected { term } => TraceEvent::Election { node: me, term, role: Role::Leader },
                NodeEvent::Violation { txn, detail } => TraceEvent::Violation { node: me, txn, detail },
            });
        }
        for o in out.sends {
            let id = self.ids.fetch_add(1, Ordering::Relaxed);
            self.emit(TraceEvent::Send { hop: me, dst: o.dst, msg: MsgSummary::of(id, &o.msg) });
            match self.peers.get(&o.dst) {
                Some(link) => link.send(o.msg),
                None => log::warn!("{me}: no link to {}", o.dst),
            }
        }
    }

    fn view(&self) -> NodeView {
        NodeView {
            snapshot: self.node.snapshot(),
            crashed: self.crashed,
            ready: !self.crashed && self.node.ready_for_txn(),
            tick: self.now,
            records: self.node.dt_log().records().to_vec(),
        }
    }

    async fn run(
        mut self,
        tick: Duration,
        mut inbox: mpsc::UnboundedReceiver<Message>,
        mut cmds: mpsc::UnboundedReceiver<Command>,
    ) {
        let mut interval = time::interval(tick);
        interval.set_missed_tick_behavior(MissedTickBehavior::Delay);
        loop {
            tokio::select! {
                _ = interval.tick() => {
                    if !self.crashed {
                        let mut out = Outbox::new();
                        self.node.on_tick(self.now, &mut out);
                        self.flush(out);
                    }
                    self.now += 1;
                }
                Some(msg) = inbox.recv() => {
                    if self.crashed {
                        continue;
                    }
                    self.emit(TraceEvent::Deliver { dst: self.node.id(), msg: MsgSummary::of(0, &msg) });
                    let mut out = Outbox::new();
                    self.node.on_message(self.now, msg, &mut out);
                    self.flush(out);
                }
                cmd = cmds.recv() => match cmd {
                    None => break,
                    Some(Command::Submit(spec, reply)) => {
                        let res = if self.crashed {
                            Err(NodeError::NotLeader(None))
                        } else {
                            let mut out = Outbox::new();
                            let res = self.node.submit(self.now, &spec, &mut out);
                            if res.is_ok() {
                                self.emit(TraceEvent::Submit { node: self.node.id(), txn: spec.id });
                            }
                            self.flush(out);
                            res
                        };
                        let _ = reply.send(res);
                    }
                    Some(Command::ScriptVote(txn, vote)) => self.node.script_vote(txn, vote),
                    Some(Command::Expect(txn, coordinator)) => {
                        if !self.crashed {
                            self.node.expect_txn(self.now, txn, coordinator);
                        }
                    }
                    Some(Command::Crash) => {
                        if !self.crashed {
                            self.crashed = true;
                            self.node.crash();
                            self.emit(TraceEvent::Crash { node: self.node.id() });
                        }
                    }
                    Some(Command::Restart) => {
                        if self.crashed {
                            self.crashed = false;
                            self.emit(TraceEvent::Restart { node: self.node.id() });
                            let mut out = Outbox::new();
                            self.node.restart(self.now, &mut out);
                            self.flush(out);
                        }
                    }
                    Some(Command::View(reply)) => {
                        let _ = reply.send(self.view());
                    }
                },
            }
        }
    }
}

/// A running cluster. Dropping it without [`LiveCluster::shutdown`] leaves
/// the tasks running until the runtime stops.
pub struct LiveCluster {
    cfg: ClusterConfig,
    opts: LiveOptions,
    addrs: BTreeMap<NodeId, SocketAddr>,
    cmds: BTreeMap<NodeId, mpsc::UnboundedSender<Command>>,
    events: broadcast::Sender<TraceEntry>,
    tasks: std::sync::Mutex<Vec<JoinHandle<()>>>,
}

impl LiveCluster {
    /// Binds every node's port, then starts the nodes. Timeouts in `cfg`
    /// are in ticks of `opts.tick_ms`.
    pub async fn start(cfg: &ClusterConfig, opts: LiveOptions) -> Result<Self, LiveError> {
        cfg.validate()?;
        let nodes = cfg.all_nodes();
        let mut listeners = Vec::new();
        let mut addrs = BTreeMap::new();
        for (i, &id) in nodes.iter().enumerate() {
            let port = if opts.base_port == 0 { 0 } else { opts.base_port + i as u16 };
            let l = TcpListener::bind(SocketAddr::new(opts.host, port)).await?;
            addrs.insert(id, l.local_addr()?);
            listeners.push(l);
        }
        let (events, _) = broadcast::channel(4096);
        let ids = Arc::new(AtomicU64::new(0));
        let tick = Duration::from_millis(opts.tick_ms.max(1));
        let connect_timeout = tick * 4;
        let mut cmds = BTreeMap::new();
        let mut tasks = Vec::new();
        for (id, listener) in nodes.iter().copied().zip(listeners) {
            let dt = match &opts.data_dir {
                Some(dir) => DtLog::open(&log_path(dir, id.chain, id))?.0,
                None => DtLog::in_memory(),
            };
            let (in_tx, in_rx) = mpsc::unbounded_channel();
            let (cmd_tx, cmd_rx) = mpsc::unbounded_channel();
            tasks.push(tokio::spawn(listen(listener, in_tx)));
            let peers = addrs.iter().map(|(p, a)| (*p, PeerLink::spawn(*a, connect_timeout))).collect();
            let task = NodeTask {
                node: Node::new(cfg, id, dt),
                crashed: false,
                now: 0,
                peers,
                events: events.clone(),
                ids: ids.clone(),
            };
            tasks.push(tokio::spawn(task.run(tick, in_rx, cmd_rx)));
            cmds.insert(id, cmd_tx);
        }
        log::info!("live cluster up: {} nodes, tick {} ms", nodes.len(), opts.tick_ms);
        Ok(Self { cfg: cfg.clone(), opts, addrs, cmds, events, tasks: std::sync::Mutex::new(tasks) })
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.cfg
    }

    pub fn options(&self) -> &LiveOptions {
        &self.opts
    }

    pub fn addrs(&self) -> &BTreeMap<NodeId, SocketAddr> {
        &self.addrs
    }

    pub fn subscribe(&self) -> broadcast::Receiver<TraceEntry> {
        self.events.subscribe()
    }

    fn cmd(&self, id: NodeId, c: Command) -> Result<(), LiveError> {
        self.cmds.get(&id).ok_or(LiveError::UnknownNode(id))?.send(c).map_err(|_| LiveError::Closed)
    }

    pub async fn view(&self, id: NodeId) -> Result<NodeView, LiveError> {
        let (tx, rx) = oneshot::channel();
        self.cmd(id, Command::View(tx))?;
        rx.await.map_err(|_| LiveError::Closed)
    }

    pub async fn views(&self) -> Result<Vec<NodeView>, LiveError> {
        let mut out = Vec::new();
        for &id in self.cmds.keys() {
            out.push(self.view(id).await?);
        }
        Ok(out)
    }

    /// Live leader of `chain` with the highest term.
    pub async fn leader_of(&self, chain: ChainId) -> Result<Option<NodeView>, LiveError> {
        let views = self.views().await?;
        Ok(views
            .into_iter()
            .filter(|v| v.snapshot.id.chain == chain && !v.crashed && v.snapshot.role == Role::Leader)
            .max_by_key(|v| v.snapshot.term))
    }

    pub async fn crash(&self, id: NodeId) -> Result<(), LiveError> {
        self.cmd(id, Command::Crash)
    }

    pub async fn restart(&self, id: NodeId) -> Result<(), LiveError> {
        self.cmd(id, Command::Restart)
    }

    /// Installs the transaction's scripted votes on every member of the
    /// chains concerned.
    pub fn script_votes(&self, spec: &TxnSpec) -> Result<(), LiveError> {
        for (chain, vote) in &spec.votes {
            for id in self.cfg.members(*chain) {
                self.cmd(id, Command::ScriptVote(spec.id, *vote))?;
            }
        }
        Ok(())
    }

    /// Hands `spec` to its coordinator chain's leader once that leader is
    /// ready for a new transaction.
    pub async fn submit(&self, spec: &TxnSpec, wait: Duration) -> Result<NodeId, LiveError> {
        let deadline = Instant::now() + wait;
        let poll = Duration::from_millis(self.opts.tick_ms.max(1));
        loop {
            if let Some(v) = self.leader_of(spec.coordinator).await? {
                if v.ready {
                    let (tx, rx) = oneshot::channel();
                    let id = v.snapshot.id;
                    self.cmd(id, Command::Submit(spec.clone(), tx))?;
                    match rx.await.map_err(|_| LiveError::Closed)? {
                        Ok(()) => {
                            for p in &spec.participants {
                                for member in self.cfg.members(*p) {
                                    self.cmd(member, Command::Expect(spec.id, spec.coordinator))?;
                                }
                            }
                            return Ok(id);
                        }
                        Err(NodeError::Busy | NodeError::NotLeader(_)) => {}
                        Err(e) => return Err(LiveError::Rejected(id, e)),
                    }
                }
            }
            if Instant::now() >= deadline {
                return Err(LiveError::NoLeader(spec.coordinator));
            }
            time::sleep(poll).await;
        }
    }

    /// Decisions recorded so far on each transaction's coordinator chain.
    pub async fn decisions(&self, txns: &[(TxnId, ChainId)]) -> Result<BTreeMap<TxnId, Decision>, LiveError> {
        let views = self.views().await?;
        let mut out = BTreeMap::new();
        for &(txn, coord) in txns {
            let d = views
                .iter()
                .filter(|v| v.snapshot.id.chain == coord)
                .find_map(|v| DtLog::from_records(&v.records).ok()?.decision(txn));
            if let Some(d) = d {
                out.insert(txn, d);
            }
        }
        Ok(out)
    }

    /// Submits every transaction in order and waits until the coordinator
    /// chains have decided them all.
    pub async fn run_workload(&self, workload: &Workload, wait: Duration) -> Result<BTreeMap<TxnId, Decision>, LiveError> {
        let deadline = Instant::now() + wait;
        for spec in &workload.txns {
            self.script_votes(spec)?;
            self.submit(spec, deadline.saturating_duration_since(Instant::now())).await?;
        }
        let txns: Vec<_> = workload.txns.iter().map(|t| (t.id, t.coordinator)).collect();
        loop {
            let got = self.decisions(&txns).await?;
            if got.len() == txns.len() {
                return Ok(got);
            }
            if Instant::now() >= deadline {
                return Err(LiveError::Timeout(format!("{} of {} decisions", got.len(), txns.len())));
            }
            time::sleep(Duration::from_millis(self.opts.tick_ms.max(1))).await;
        }
    }

    /// Stops every node and listener. Later calls fail with `Closed`.
    pub async fn shutdown(&self) {
        let tasks = std::mem::take(&mut *self.tasks.lock().expect("task list poisoned"));
        for t in tasks {
            t.abort();
            let _ = t.await;
        }
    }
}
