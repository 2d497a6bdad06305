//! The three experiments plus the model check. Every report carries the
//! parameters it was produced from; rerunning them reproduces it exactly.

use std::fmt::Write as _;

use cbt_core::{
    ClusterConfig, MessageKind, NodeId, ProtocolKind, ProtocolMode, RecordKind, Tick, TxnId, Workload,
};
use cbt_transport::{
    sim_enumerate, FaultSchedule, FaultTemplate, ScheduleVerdict, SimOptions, SimResult, TraceEvent, VariedFault,
    Verdict,
};
use serde::{Deserialize, Serialize};

use crate::baselines::{effective_config, run_protocol};
use crate::metrics::{overhead_pct, scaling_factor, ScenarioMetrics};
use crate::HarnessError;

const COORDINATOR_LEADER: NodeId = NodeId::new(0, 0);

fn traced() -> SimOptions {
    SimOptions { max_ticks: None, record_trace: true }
}

fn untraced() -> SimOptions {
    SimOptions { max_ticks: None, record_trace: false }
}

/// Last tick at which the coordinator leader put a COMMIT for `txn` on the
/// wire.
pub fn commit_broadcast_tick(r: &SimResult, txn: TxnId) -> Option<Tick> {
    r.trace
        .iter()
        .filter(|e| {
            matches!(&e.event, TraceEvent::Send { hop, msg, .. }
                if *hop == COORDINATOR_LEADER && msg.from == *hop && msg.kind == MessageKind::Commit && msg.txn == Some(txn))
        })
        .map(|e| e.tick)
        .last()
}

/// Tick at which the coordinator leader logged COMMIT for `txn`.
pub fn commit_logged_tick(r: &SimResult, txn: TxnId) -> Option<Tick> {
    r.trace
        .iter()
        .find(|e| {
            matches!(&e.event, TraceEvent::LogAppend { node, record }
                if *node == COORDINATOR_LEADER && record.txn == txn && record.kind == RecordKind::Commit)
        })
        .map(|e| e.tick)
}

// ---------------------------------------------------------------- blocking

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockingParams {
    pub config: ClusterConfig,
    pub txns: usize,
    pub seed: u64,
    /// Crash the coordinator leader right after this transaction's COMMIT
    /// broadcast; `None` runs without faults.
    pub crash_after_txn: Option<u64>,
}

impl Default for BlockingParams {
    fn default() -> Self {
        Self { config: ClusterConfig::new(3, 2, ProtocolKind::Cbt), txns: 5, seed: 1, crash_after_txn: Some(1) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockingRow {
    pub metrics: ScenarioMetrics,
    pub faults: FaultSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockingReport {
    pub params: BlockingParams,
    pub rows: Vec<BlockingRow>,
}

impl BlockingParams {
    pub fn workload(&self) -> Workload {
        Workload::uniform(self.txns, &self.config.chain_ids())
    }

    /// Fault schedule for `protocol`, located with a fault-free probe run.
    pub fn faults_for(&self, protocol: ProtocolKind) -> Result<FaultSchedule, HarnessError> {
        let mut faults = FaultSchedule::new(self.seed);
        if let Some(k) = self.crash_after_txn {
            let probe = run_protocol(protocol, &self.config, &self.workload(), &faults, traced())?;
            let at = commit_broadcast_tick(&probe, TxnId(k))
                .ok_or_else(|| HarnessError::Scenario(format!("T{k} never broadcast COMMIT in the probe run")))?;
            faults = faults.crash(COORDINATOR_LEADER, at + 1);
        }
        Ok(faults)
    }

    /// Full runs (with traces) for 2PC then CBT.
    pub fn runs(&self) -> Result<Vec<(ProtocolKind, FaultSchedule, SimResult)>, HarnessError> {
        let mut out = Vec::new();
        for protocol in [ProtocolKind::Blocking2pc, ProtocolKind::Cbt] {
            let faults = self.faults_for(protocol)?;
            let r = run_protocol(protocol, &self.config, &self.workload(), &faults, traced())?;
            out.push((protocol, faults, r));
        }
        Ok(out)
    }
}

pub fn scenario_blocking(p: &BlockingParams) -> Result<BlockingReport, HarnessError> {
    let rows = p
        .runs()?
        .into_iter()
        .map(|(protocol, faults, r)| BlockingRow { metrics: ScenarioMetrics::of(protocol, &r), faults })
        .collect();
    Ok(BlockingReport { params: p.clone(), rows })
}

impl BlockingReport {
    pub fn commit_messages(&self, protocol: ProtocolKind) -> Option<u64> {
        self.rows
            .iter()
            .find(|r| r.metrics.protocol == protocol)
            .map(|r| r.metrics.commit_messages_at_coordinator)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let crash = match self.params.crash_after_txn {
            Some(k) => format!("coordinator leader crashed after T{k}'s COMMIT broadcast"),
            None => "no faults".into(),
        };
        let _ = writeln!(s, "blocking: {} chains, {} txns, {crash}", self.params.config.chains, self.params.txns);
        let _ = writeln!(s, "{:<6} {:>8} {:>10} {:>8} {:>10}", "proto", "commits", "committed", "ticks", "outcome");
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "{:<6} {:>8} {:>10} {:>8} {:>10}",
                m.protocol.name(),
                m.commit_messages_at_coordinator,
                m.committed_txns,
                m.elapsed_ticks,
                outcome_label(&m.outcome)
            );
        }
        s
    }
}

fn outcome_label(o: &cbt_transport::Outcome) -> &'static str {
    match o {
        cbt_transport::Outcome::Completed => "completed",
        cbt_transport::Outcome::Blocked { .. } => "blocked",
        cbt_transport::Outcome::Disagreement { .. } => "DISAGREE",
    }
}

// ------------------------------------------------------------- txn scaling

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TxnScalingParams {
    pub config: ClusterConfig,
    pub workloads: Vec<usize>,
    pub seed: u64,
}

impl Default for TxnScalingParams {
    fn default() -> Self {
        Self { config: ClusterConfig::new(2, 2, ProtocolKind::Cbt), workloads: vec![60, 120, 240, 480], seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TxnScalingRow {
    pub txns: usize,
    pub elapsed_ticks: Tick,
    pub scaling_factor: f64,
    pub metrics: ScenarioMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TxnScalingReport {
    pub params: TxnScalingParams,
    /// Coordinators are assigned round-robin over the chains.
    pub assignment: String,
    pub rows: Vec<TxnScalingRow>,
}

pub fn scenario_txn_scaling(p: &TxnScalingParams) -> Result<TxnScalingReport, HarnessError> {
    let chains = p.config.chain_ids();
    let runs: Vec<Result<(usize, ScenarioMetrics), HarnessError>> = std::thread::scope(|s| {
        let handles: Vec<_> = p
            .workloads
            .iter()
            .map(|&n| {
                let chains = chains.clone();
                s.spawn(move || {
                    let w = Workload::round_robin(n, &chains, 1);
                    let r = run_protocol(p.config.protocol, &p.config, &w, &FaultSchedule::new(p.seed), untraced())?;
                    Ok((n, ScenarioMetrics::of(p.config.protocol, &r)))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("scenario worker panicked")).collect()
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>, _>>()?;
    let Some((w0, base)) = runs.first().cloned() else {
        return Err(HarnessError::Scenario("no workloads given".into()));
    };
    let mut rows = Vec::new();
    for (n, m) in runs {
        let f = scaling_factor(m.elapsed_ticks, n as u64, base.elapsed_ticks, w0 as u64)?;
        rows.push(TxnScalingRow { txns: n, elapsed_ticks: m.elapsed_ticks, scaling_factor: f, metrics: m });
    }
    Ok(TxnScalingReport { params: p.clone(), assignment: "round-robin coordinator, 1 participant".into(), rows })
}

impl TxnScalingReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "txn-scaling: {} chains, {}", self.params.config.chains, self.params.config.protocol.name());
        let _ = writeln!(s, "{:>6} {:>8} {:>8} {:>10}", "txns", "ticks", "factor", "committed");
        for r in &self.rows {
            let _ = writeln!(s, "{:>6} {:>8} {:>8.3} {:>10}", r.txns, r.elapsed_ticks, r.scaling_factor, r.metrics.committed_txns);
        }
        s
    }
}

// ----------------------------------------------------------- chain scaling

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainScalingParams {
    /// Template for every run; `chains` and `protocol` are overridden.
    pub config: ClusterConfig,
    pub chain_counts: Vec<u16>,
    pub txns: usize,
    pub participants_per_txn: usize,
    pub seed: u64,
}

impl Default for ChainScalingParams {
    fn default() -> Self {
        // Fault-free throughput runs: a vote timeout firing under queueing
        // would turn the hub's backlog into aborts instead of latency.
        let mut config = ClusterConfig::new(2, 2, ProtocolKind::Cbt);
        config.timeouts.vote_timeout = 100_000;
        Self {
            config,
            chain_counts: vec![2, 4, 8, 16, 32, 64],
            txns: 640,
            participants_per_txn: 2,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainScalingRow {
    pub chains: u16,
    pub cbt: ScenarioMetrics,
    pub two_pc: ScenarioMetrics,
    pub hub: ScenarioMetrics,
    /// CBT ticks over 2PC ticks, percent.
    pub cbt_overhead_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainScalingReport {
    pub params: ChainScalingParams,
    pub assignment: String,
    pub rows: Vec<ChainScalingRow>,
}

pub fn scenario_chain_scaling(p: &ChainScalingParams) -> Result<ChainScalingReport, HarnessError> {
    let protocols = [ProtocolKind::Cbt, ProtocolKind::Blocking2pc, ProtocolKind::Hub];
    let jobs: Vec<(u16, ProtocolKind)> =
        p.chain_counts.iter().flat_map(|&c| protocols.iter().map(move |&pk| (c, pk))).collect();
    let results: Vec<Result<ScenarioMetrics, HarnessError>> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|&(chains, protocol)| {
                s.spawn(move || {
                    let mut cfg = p.config.clone();
                    cfg.chains = chains;
                    cfg.hub = None;
                    let w = Workload::round_robin(p.txns, &cfg.chain_ids(), p.participants_per_txn);
                    let r = run_protocol(protocol, &cfg, &w, &FaultSchedule::new(p.seed), untraced())?;
                    Ok(ScenarioMetrics::of(protocol, &r))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("scenario worker panicked")).collect()
    });
    let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let rows = p
        .chain_counts
        .iter()
        .zip(results.chunks(3))
        .map(|(&chains, m)| ChainScalingRow {
            chains,
            cbt_overhead_pct: overhead_pct(m[0].elapsed_ticks, m[1].elapsed_ticks),
            cbt: m[0].clone(),
            two_pc: m[1].clone(),
            hub: m[2].clone(),
        })
        .collect();
    Ok(ChainScalingReport {
        params: p.clone(),
        assignment: format!(
            "round-robin coordinator, next {} chains participate; hub is an extra dedicated chain",
            p.participants_per_txn
        ),
        rows,
    })
}

impl ChainScalingReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "chain-scaling: {} txns", self.params.txns);
        let _ = writeln!(
            s,
            "{:>6} {:>9} {:>9} {:>9} {:>9} {:>10} {:>10}",
            "chains", "cbt", "2pc", "hub", "overhead", "cbt-cross", "hub-total"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>6} {:>9} {:>9} {:>9} {:>8.2}% {:>10} {:>10}",
                r.chains,
                r.cbt.elapsed_ticks,
                r.two_pc.elapsed_ticks,
                r.hub.elapsed_ticks,
                r.cbt_overhead_pct,
                r.cbt.total_cross_chain_messages,
                r.hub.total_messages
            );
        }
        s
    }
}

// -------------------------------------------------------------- model check

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckParams {
    pub chain_counts: Vec<u16>,
    pub nodes_per_chain: u16,
    pub seed: u64,
    pub single_drops: bool,
    /// Extra COMMIT latency for the recovery-timeout experiment.
    pub commit_delay: Tick,
}

impl Default for ModelCheckParams {
    fn default() -> Self {
        Self { chain_counts: vec![2, 3], nodes_per_chain: 2, seed: 1, single_drops: true, commit_delay: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckRow {
    pub chains: u16,
    pub protocol: ProtocolKind,
    pub mode: ProtocolMode,
    pub commit_delay: Tick,
    pub schedules: usize,
    pub decided: usize,
    pub blocked: usize,
    pub disagreements: usize,
    /// Crash schedules missing the liveness bound.
    pub late: usize,
    pub liveness_bound: Tick,
    pub horizon: Tick,
    /// Coordinator-leader crashes between its COMMIT record and the
    /// broadcast that ended blocked.
    pub blocked_in_window: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelCheckReport {
    pub params: ModelCheckParams,
    pub rows: Vec<ModelCheckRow>,
    /// First schedule where the literal recovery timeout broke agreement.
    pub counterexample: Option<Counterexample>,
}

/// Everything needed to replay a disagreeing schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Counterexample {
    pub config: ClusterConfig,
    pub workload: Workload,
    pub found: ScheduleVerdict,
}

impl Counterexample {
    pub fn replay(&self) -> Result<SimResult, HarnessError> {
        Ok(cbt_transport::sim_run(&self.config, &self.workload, &self.found.schedule, traced())?)
    }
}

fn check_one(
    chains: u16,
    p: &ModelCheckParams,
    protocol: ProtocolKind,
    mode: ProtocolMode,
    commit_delay: Tick,
) -> Result<(ModelCheckRow, Option<Counterexample>), HarnessError> {
    let mut cfg = ClusterConfig::new(chains, p.nodes_per_chain, protocol);
    cfg.mode = mode;
    let cfg = effective_config(&cfg, protocol);
    let w = Workload::uniform(1, &cfg.chain_ids());
    let mut template = FaultTemplate { single_drops: p.single_drops && commit_delay == 0, ..FaultTemplate::crashes_only(p.seed) };
    if commit_delay > 0 {
        template = template.with_delay(MessageKind::Commit, commit_delay);
    }
    let probe = run_protocol(protocol, &cfg, &w, &template.base, traced())?;
    let window = match (commit_logged_tick(&probe, TxnId(1)), commit_broadcast_tick(&probe, TxnId(1))) {
        (Some(l), Some(b)) => (l + 1)..=b,
        _ => 1..=0,
    };
    let report = sim_enumerate(&cfg, &w, &template)?;
    let blocked_in_window = report
        .schedules
        .iter()
        .filter(|s| {
            s.verdict == Verdict::AgreementBlocked
                && matches!(s.varied, VariedFault::Crash { node, at } if node == COORDINATOR_LEADER && window.contains(&at))
        })
        .count();
    let row = ModelCheckRow {
        chains,
        protocol,
        mode,
        commit_delay,
        schedules: report.schedules.len(),
        decided: report.count(Verdict::AgreementDecided),
        blocked: report.count(Verdict::AgreementBlocked),
        disagreements: report.count(Verdict::Disagreement),
        late: report.liveness_violations().count(),
        liveness_bound: report.liveness_bound,
        horizon: report.horizon,
        blocked_in_window,
    };
    // Prefer a schedule where the coordinator leader died after logging its
    // decision: the recovering participant then has nobody to ask in time.
    let logged = commit_logged_tick(&probe, TxnId(1)).unwrap_or(0);
    let bad = report
        .schedules
        .iter()
        .filter(|s| s.verdict == Verdict::Disagreement)
        .find(|s| matches!(s.varied, VariedFault::Crash { node, at } if node == COORDINATOR_LEADER && at > logged))
        .or_else(|| report.first(Verdict::Disagreement))
        .map(|found| Counterexample { config: cfg.clone(), workload: w.clone(), found: found.clone() });
    Ok((row, bad))
}

pub fn scenario_modelcheck(p: &ModelCheckParams) -> Result<ModelCheckReport, HarnessError> {
    let mut rows = Vec::new();
    let mut counterexample = None;
    for &chains in &p.chain_counts {
        for (protocol, mode, delay) in [
            (ProtocolKind::Cbt, ProtocolMode::Safe, 0),
            (ProtocolKind::Blocking2pc, ProtocolMode::Safe, 0),
            (ProtocolKind::Cbt, ProtocolMode::Safe, p.commit_delay),
            (ProtocolKind::Cbt, ProtocolMode::PaperLiteral, p.commit_delay),
        ] {
            let (row, bad) = check_one(chains, p, protocol, mode, delay)?;
            if mode == ProtocolMode::PaperLiteral && counterexample.is_none() {
                counterexample = bad;
            }
            rows.push(row);
        }
    }
    Ok(ModelCheckReport { params: p.clone(), rows, counterexample })
}

impl ModelCheckReport {
    pub fn row(&self, chains: u16, protocol: ProtocolKind, mode: ProtocolMode, delayed: bool) -> Option<&ModelCheckRow> {
        self.rows
            .iter()
            .find(|r| r.chains == chains && r.protocol == protocol && r.mode == mode && (r.commit_delay > 0) == delayed)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "modelcheck: single-crash{} enumeration, 1 txn", if self.params.single_drops { " and single-drop" } else { "" });
        let _ = writeln!(
            s,
            "{:>6} {:<5} {:<13} {:>6} {:>9} {:>8} {:>8} {:>9} {:>5} {:>6} {:>10}",
            "chains", "proto", "mode", "delay", "schedules", "decided", "blocked", "disagree", "late", "bound", "log-bcast"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>6} {:<5} {:<13} {:>6} {:>9} {:>8} {:>8} {:>9} {:>5} {:>6} {:>10}",
                r.chains,
                r.protocol.name(),
                format!("{:?}", r.mode),
                r.commit_delay,
                r.schedules,
                r.decided,
                r.blocked,
                r.disagreements,
                r.late,
                r.liveness_bound,
                r.blocked_in_window
            );
        }
        if let Some(c) = &self.counterexample {
            let _ = writeln!(s, "counterexample: {:?} -> {:?}", c.found.varied, c.found.outcome);
        }
        s
    }
}
