//! One managed cluster: a single actor task owns the backend and applies
//! every mutation in arrival order; observers get a fan-out event stream.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use cbt_core::{
    ChainId, ClusterConfig, Decision, DtLog, MessageKind, NodeId, NodeSnapshot, RecoveredPhase, Role, Tick, TxnId,
    TxnSpec, Workload,
};
use cbt_transport::{
    FaultSchedule, LiveCluster, LiveOptions, NodeView, SimOptions, Simulator, TraceEntry, TraceEvent,
};
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, mpsc, oneshot};
use tokio::time::{self, MissedTickBehavior};

use crate::spec::{ClusterSpec, TransportKind, TxnRequest};
use crate::ControlError;

/// One entry of the event stream: a trace entry plus its position, and the
/// commit counter after it when the entry moved it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamEvent {
    pub seq: u64,
    #[serde(flatten)]
    pub entry: TraceEntry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub commit_counter: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeState {
    pub id: NodeId,
    pub role: Role,
    pub term: u64,
    pub leader: Option<NodeId>,
    pub crashed: bool,
    pub phases: BTreeMap<TxnId, RecoveredPhase>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TxnStatus {
    /// Waiting for the coordinator chain to accept it.
    Pending,
    InProgress,
    /// Undecided while the coordinator chain has no live leader.
    Blocked,
    Committed,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxnState {
    pub id: TxnId,
    pub coordinator: ChainId,
    pub participants: Vec<ChainId>,
    pub status: TxnStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterState {
    pub id: u64,
    pub spec: ClusterSpec,
    pub tick: Tick,
    pub nodes: Vec<NodeState>,
    pub txns: Vec<TxnState>,
    pub commit_counter: u64,
    pub events: u64,
}

pub(crate) enum Command {
    Submit(TxnRequest, oneshot::Sender<Result<Vec<TxnId>, ControlError>>),
    Crash(NodeId, oneshot::Sender<Result<(), ControlError>>),
    Restart(NodeId, oneshot::Sender<Result<(), ControlError>>),
    State(oneshot::Sender<ClusterState>),
    Stop(oneshot::Sender<()>),
}

/// Shared handle; cheap to clone.
#[derive(Clone)]
pub struct ClusterHandle {
    pub id: u64,
    pub spec: ClusterSpec,
    cmds: mpsc::Sender<Command>,
    events: broadcast::Sender<StreamEvent>,
    history: Arc<Mutex<Vec<StreamEvent>>>,
}

impl ClusterHandle {
    pub async fn start(id: u64, spec: ClusterSpec) -> Result<Self, ControlError> {
        let cfg = spec.to_config().map_err(|e| ControlError::Invalid(e.to_string()))?;
        let backend = match spec.transport {
            TransportKind::SimInteractive => {
                let sim = Simulator::new(&cfg, &Workload::default(), &FaultSchedule::new(spec.seed), SimOptions {
                    max_ticks: None,
                    record_trace: true,
                })
                .map_err(|e| ControlError::Invalid(e.to_string()))?;
                Backend::Sim { sim, cursor: 0 }
            }
            TransportKind::Live => {
                let opts = LiveOptions { tick_ms: spec.tick_ms, base_port: spec.base_port, ..LiveOptions::default() };
                let cluster = LiveCluster::start(&cfg, opts).await.map_err(|e| match e {
                    cbt_transport::LiveError::Io(io) => ControlError::Conflict(format!("cannot bind ports: {io}")),
                    other => ControlError::Invalid(other.to_string()),
                })?;
                let rx = cluster.subscribe();
                Backend::Live { cluster: Arc::new(cluster), rx }
            }
        };
        let (cmd_tx, cmd_rx) = mpsc::channel(64);
        let (events, _) = broadcast::channel(8192);
        let history = Arc::new(Mutex::new(Vec::new()));
        let actor = Actor {
            id,
            spec: spec.clone(),
            cfg,
            backend,
            events: events.clone(),
            history: history.clone(),
            next_txn: 1,
            txns: BTreeMap::new(),
            commit_pairs: BTreeSet::new(),
            seq: 0,
            live_tick: 0,
        };
        tokio::spawn(actor.run(cmd_rx));
        Ok(Self { id, spec, cmds: cmd_tx, events, history })
    }

    async fn ask<T>(&self, make: impl FnOnce(oneshot::Sender<T>) -> Command) -> Result<T, ControlError> {
        let (tx, rx) = oneshot::channel();
        self.cmds.send(make(tx)).await.map_err(|_| ControlError::Gone)?;
        rx.await.map_err(|_| ControlError::Gone)
    }

    pub async fn submit(&self, req: TxnRequest) -> Result<Vec<TxnId>, ControlError> {
        self.ask(|tx| Command::Submit(req, tx)).await?
    }

    pub async fn crash(&self, node: NodeId) -> Result<(), ControlError> {
        self.ask(|tx| Command::Crash(node, tx)).await?
    }

    pub async fn restart(&self, node: NodeId) -> Result<(), ControlError> {
        self.ask(|tx| Command::Restart(node, tx)).await?
    }

    pub async fn state(&self) -> Result<ClusterState, ControlError> {
        self.ask(Command::State).await
    }

    pub async fn stop(&self) {
        let _ = self.ask(Command::Stop).await;
    }

    /// Live subscription plus every earlier event with `seq >= from`.
    pub fn subscribe(&self, from: u64) -> (Vec<StreamEvent>, broadcast::Receiver<StreamEvent>) {
        let history = self.history.lock().expect("history poisoned");
        let rx = self.events.subscribe();
        let backlog = history.iter().filter(|e| e.seq >= from).cloned().collect();
        (backlog, rx)
    }
}

enum Backend {
    Sim { sim: Simulator, cursor: usize },
    Live { cluster: Arc<LiveCluster>, rx: broadcast::Receiver<TraceEntry> },
}

struct Actor {
    id: u64,
    spec: ClusterSpec,
    cfg: ClusterConfig,
    backend: Backend,
    events: broadcast::Sender<StreamEvent>,
    history: Arc<Mutex<Vec<StreamEvent>>>,
    next_txn: u64,
    txns: BTreeMap<TxnId, TxnSpec>,
    commit_pairs: BTreeSet<(TxnId, ChainId)>,
    seq: u64,
    live_tick: Tick,
}

impl Actor {
    async fn run(mut self, mut cmds: mpsc::Receiver<Command>) {
        let period = match self.spec.transport {
            TransportKind::SimInteractive => Duration::from_secs_f64(1.0 / f64::from(self.spec.ticks_per_second.max(1))),
            TransportKind::Live => Duration::from_millis(self.spec.tick_ms.max(1)),
        };
        let mut interval = time::interval(period);
        interval.set_missed_tick_behavior(MissedTickBehavior::Delay);
        loop {
            tokio::select! {
                biased;
                cmd = cmds.recv() => match cmd {
                    None => break,
                    Some(Command::Stop(reply)) => {
                        if let Backend::Live { cluster, .. } = &self.backend {
                            cluster.shutdown().await;
                        }
                        let _ = reply.send(());
                        break;
                    }
                    Some(c) => self.handle(c).await,
                },
                _ = interval.tick() => self.advance().await,
            }
        }
        log::info!("cluster {} stopped", self.id);
    }

    async fn advance(&mut self) {
        match &mut self.backend {
            Backend::Sim { sim, .. } => sim.step(),
            Backend::Live { .. } => {}
        }
        self.pump();
    }

    /// Moves new trace entries from the backend to the stream.
    fn pump(&mut self) {
        let fresh: Vec<TraceEntry> = match &mut self.backend {
            Backend::Sim { sim, cursor } => {
                let out = sim.trace_since(*cursor).to_vec();
                *cursor += out.len();
                out
            }
            Backend::Live { rx, .. } => {
                let mut out = Vec::new();
                loop {
                    match rx.try_recv() {
                        Ok(e) => out.push(e),
                        Err(broadcast::error::TryRecvError::Lagged(n)) => {
                            log::warn!("cluster {}: event stream lagged by {n}", self.id)
                        }
                        Err(_) => break,
                    }
                }
                out
            }
        };
        for entry in fresh {
            self.live_tick = self.live_tick.max(entry.tick);
            let commit_counter = self.count_commit(&entry);
            let ev = StreamEvent { seq: self.seq, entry, commit_counter };
            self.seq += 1;
            self.history.lock().expect("history poisoned").push(ev.clone());
            let _ = self.events.send(ev);
        }
    }

    fn count_commit(&mut self, entry: &TraceEntry) -> Option<u64> {
        let TraceEvent::Send { hop, msg, .. } = &entry.event else { return None };
        if msg.kind != MessageKind::Commit || msg.from != *hop {
            return None;
        }
        let txn = msg.txn?;
        if self.txns.get(&txn).map(|t| t.coordinator) != Some(hop.chain) {
            return None;
        }
        self.commit_pairs.insert((txn, msg.to.chain)).then_some(self.commit_pairs.len() as u64)
    }

    fn txn_chains(&self) -> Vec<ChainId> {
        let hub = if self.cfg.dedicated_hub() { self.cfg.hub } else { None };
        self.cfg.chain_ids().into_iter().filter(|c| Some(*c) != hub).collect()
    }

    fn build_txns(&mut self, req: &TxnRequest) -> Result<Vec<TxnSpec>, ControlError> {
        if req.count == 0 {
            return Err(ControlError::Invalid("count must be positive".into()));
        }
        let chains = self.txn_chains();
        let coordinator = ChainId(req.coordinator.unwrap_or(chains[0].0));
        let participants: Vec<ChainId> = match &req.participants {
            Some(ps) => ps.iter().copied().map(ChainId).collect(),
            None => chains.iter().copied().filter(|c| *c != coordinator).collect(),
        };
        let valid = chains.contains(&coordinator)
            && !participants.is_empty()
            && participants.iter().all(|p| chains.contains(p) && *p != coordinator);
        if !valid {
            return Err(ControlError::Invalid("coordinator and participants must be distinct transaction chains".into()));
        }
        let votes = req.votes.iter().map(|(c, v)| (ChainId(*c), *v)).collect::<BTreeMap<_, _>>();
        let now = self.now();
        let specs = (0..req.count)
            .map(|i| TxnSpec {
                id: TxnId(self.next_txn + i as u64),
                coordinator,
                participants: participants.clone(),
                votes: votes.clone(),
                submit_at: now,
            })
            .collect();
        self.next_txn += req.count as u64;
        Ok(specs)
    }

    fn now(&self) -> Tick {
        match &self.backend {
            Backend::Sim { sim, .. } => sim.now(),
            Backend::Live { .. } => self.live_tick,
        }
    }

    fn check_node(&self, node: NodeId) -> Result<(), ControlError> {
        if node.chain.0 < self.cfg.chains && node.node < self.cfg.nodes_per_chain {
            Ok(())
        } else {
            Err(ControlError::NotFound(format!("node {node}")))
        }
    }

    async fn handle(&mut self, cmd: Command) {
        match cmd {
            Command::Submit(req, reply) => {
                let res = self.submit(req).await;
                let _ = reply.send(res);
            }
            Command::Crash(node, reply) => {
                let res = match self.check_node(node) {
                    Ok(()) => {
                        match &mut self.backend {
                            Backend::Sim { sim, .. } => sim.crash_now(node),
                            Backend::Live { cluster, .. } => {
                                let _ = cluster.crash(node).await;
                            }
                        }
                        Ok(())
                    }
                    Err(e) => Err(e),
                };
                self.pump();
                let _ = reply.send(res);
            }
            Command::Restart(node, reply) => {
                let res = match self.check_node(node) {
                    Ok(()) => {
                        match &mut self.backend {
                            Backend::Sim { sim, .. } => sim.restart_now(node),
                            Backend::Live { cluster, .. } => {
                                let _ = cluster.restart(node).await;
                            }
                        }
                        Ok(())
                    }
                    Err(e) => Err(e),
                };
                self.pump();
                let _ = reply.send(res);
            }
            Command::State(reply) => {
                let state = self.state().await;
                let _ = reply.send(state);
            }
            Command::Stop(_) => unreachable!("handled by the loop"),
        }
    }

    async fn submit(&mut self, req: TxnRequest) -> Result<Vec<TxnId>, ControlError> {
        let specs = self.build_txns(&req)?;
        let ids: Vec<TxnId> = specs.iter().map(|s| s.id).collect();
        for s in &specs {
            self.txns.insert(s.id, s.clone());
        }
        match &mut self.backend {
            Backend::Sim { sim, .. } => {
                for s in specs {
                    sim.add_txn(s).map_err(|e| ControlError::Invalid(e.to_string()))?;
                }
            }
            Backend::Live { cluster, .. } => {
                // Submission waits for ready leaders; keep the actor free.
                let cluster = cluster.clone();
                let wait = Duration::from_millis(self.spec.tick_ms.max(1) * 100_000);
                tokio::spawn(async move {
                    for s in specs {
                        if let Err(e) = cluster.script_votes(&s) {
                            log::warn!("{}: {e}", s.id);
                            return;
                        }
                        if let Err(e) = cluster.submit(&s, wait).await {
                            log::warn!("{} not submitted: {e}", s.id);
                            return;
                        }
                    }
                });
            }
        }
        Ok(ids)
    }

    async fn state(&mut self) -> ClusterState {
        self.pump();
        let nodes: Vec<(NodeSnapshot, bool, Vec<cbt_core::DtRecord>)> = match &self.backend {
            Backend::Sim { sim, .. } => self
                .cfg
                .all_nodes()
                .into_iter()
                .map(|id| {
                    let n = sim.node(id).expect("configured node");
                    (n.snapshot(), sim.is_crashed(id), n.dt_log().records().to_vec())
                })
                .collect(),
            Backend::Live { cluster, .. } => cluster
                .views()
                .await
                .unwrap_or_default()
                .into_iter()
                .map(|v: NodeView| (v.snapshot, v.crashed, v.records))
                .collect(),
        };
        let mut decisions: BTreeMap<TxnId, Decision> = BTreeMap::new();
        let mut touched: BTreeSet<TxnId> = BTreeSet::new();
        for (snap, _, records) in &nodes {
            let coord = snap.id.chain;
            let log = DtLog::from_records(records).unwrap_or_default();
            for (txn, spec) in &self.txns {
                if spec.coordinator != coord {
                    continue;
                }
                if let Some(d) = log.decision(*txn) {
                    decisions.entry(*txn).or_insert(d);
                }
                if log.phase(*txn).is_some() {
                    touched.insert(*txn);
                }
            }
        }
        let live_leader = |chain: ChainId| {
            nodes.iter().any(|(s, crashed, _)| s.id.chain == chain && !crashed && s.role == Role::Leader)
        };
        let txns = self
            .txns
            .values()
            .map(|t| {
                let status = match decisions.get(&t.id) {
                    Some(Decision::Commit) => TxnStatus::Committed,
                    Some(Decision::Abort) => TxnStatus::Aborted,
                    None if !live_leader(t.coordinator) => TxnStatus::Blocked,
                    None if touched.contains(&t.id) => TxnStatus::InProgress,
                    None => TxnStatus::Pending,
                };
                TxnState { id: t.id, coordinator: t.coordinator, participants: t.participants.clone(), status }
            })
            .collect();
        ClusterState {
            id: self.id,
            spec: self.spec.clone(),
            tick: self.now(),
            nodes: nodes
                .into_iter()
                .map(|(s, crashed, _)| NodeState {
                    id: s.id,
                    role: if crashed { Role::Follower } else { s.role },
                    term: s.term,
                    leader: s.leader,
                    crashed,
                    phases: s.phases,
                })
                .collect(),
            txns,
            commit_counter: self.commit_pairs.len() as u64,
            events: self.seq,
        }
    }
}
