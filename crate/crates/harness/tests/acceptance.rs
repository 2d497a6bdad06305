//! One PASS/FAIL line per acceptance criterion. Run with
//! `cargo test -p cbt-harness --test acceptance -- --nocapture`.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use cbt_core::replication::{HeartbeatCounters, HEARTBEAT_THRESHOLD};
use cbt_core::{
    ChainId, ClusterConfig, Decision, DtLog, DtLogError, DtRecord, MessageKind, NodeId, ProtocolKind, ProtocolMode,
    RecordKind, RecoveredPhase, TxnId, Workload,
};
use cbt_harness::report::{counterexamples_dir, write_json};
use cbt_harness::scenarios::{
    scenario_blocking, scenario_chain_scaling, scenario_modelcheck, scenario_txn_scaling, BlockingParams,
    ChainScalingParams, Counterexample, ModelCheckParams, TxnScalingParams,
};
use cbt_harness::{effective_config, run_protocol};
use cbt_transport::{
    sim_enumerate, sim_run, FaultTemplate, SimOptions, SimResult, Trace, TraceEvent, VariedFault,
};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn traced() -> SimOptions {
    SimOptions { max_ticks: None, record_trace: true }
}

/// Distinct (txn, destination chain) COMMIT sends originated on `coordinator`,
/// counted from the trace.
fn commit_sends(trace: &Trace, coordinator: ChainId) -> usize {
    trace
        .iter()
        .filter_map(|e| match &e.event {
            TraceEvent::Send { hop, msg, .. }
                if msg.kind == MessageKind::Commit && msg.from == *hop && hop.chain == coordinator =>
            {
                Some((msg.txn, msg.to.chain))
            }
            _ => None,
        })
        .collect::<BTreeSet<_>>()
        .len()
}

fn fig3_counts() -> Check {
    let started = Instant::now();
    let report = scenario_blocking(&BlockingParams::default()).map_err(|e| e.to_string())?;
    let runs = BlockingParams::default().runs().map_err(|e| e.to_string())?;
    let mut got = Vec::new();
    for ((protocol, _, r), row) in runs.iter().zip(&report.rows) {
        let m = &row.metrics;
        let from_trace = commit_sends(&r.trace, ChainId(0)) as u64;
        ensure(from_trace == m.commit_messages_at_coordinator, || {
            format!("{}: trace shows {from_trace} commits, metrics {}", protocol.name(), m.commit_messages_at_coordinator)
        })?;
        got.push((m.protocol, m.commit_messages_at_coordinator, m.committed_txns));
    }
    let want = vec![(ProtocolKind::Blocking2pc, 2, 1), (ProtocolKind::Cbt, 10, 5)];
    ensure(got == want, || format!("got {got:?}, want {want:?}"))?;
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"))?;
    Ok(format!("2pc 2 commits/1 committed, cbt 10 commits/5 committed in {elapsed:.0?}"))
}

fn model_check() -> Check {
    let started = Instant::now();
    let report = scenario_modelcheck(&ModelCheckParams::default()).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let mut parts = Vec::new();
    for chains in [2, 3] {
        let cbt = report.row(chains, ProtocolKind::Cbt, ProtocolMode::Safe, false).ok_or("missing cbt row")?;
        ensure(cbt.disagreements == 0, || format!("{chains} chains: {} cbt disagreements", cbt.disagreements))?;
        let two_pc = report.row(chains, ProtocolKind::Blocking2pc, ProtocolMode::Safe, false).ok_or("missing 2pc row")?;
        ensure(two_pc.blocked_in_window >= 1, || format!("{chains} chains: 2pc never blocked in the log/broadcast window"))?;
        parts.push(format!(
            "{chains} chains: cbt 0/{} disagree, 2pc {} blocked in window",
            cbt.schedules, two_pc.blocked_in_window
        ));
    }
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!("{} ({elapsed:.1?})", parts.join("; ")))
}

/// Crash schedules whose survivors did not all decide within `bound` ticks of
/// the crash, recomputed from fresh runs.
fn late_schedules(cfg: &ClusterConfig, template: &FaultTemplate, bound: u64) -> Result<(usize, usize), String> {
    let w = Workload::uniform(1, &cfg.chain_ids());
    let report = sim_enumerate(cfg, &w, template).map_err(|e| e.to_string())?;
    let mut crashes = 0;
    let mut late = 0;
    for s in &report.schedules {
        let VariedFault::Crash { at, .. } = s.varied else { continue };
        crashes += 1;
        let r = sim_run(cfg, &w, &s.schedule, SimOptions { max_ticks: None, record_trace: false })
            .map_err(|e| e.to_string())?;
        let txn = &w.txns[0];
        let involved: Vec<ChainId> = std::iter::once(txn.coordinator).chain(txn.participants.iter().copied()).collect();
        let decided = r.stats.decided_at.get(&txn.id);
        let ok = involved.iter().all(|c| decided.and_then(|m| m.get(c)).is_some_and(|(_, t)| *t <= at + bound));
        if !ok {
            late += 1;
        }
    }
    Ok((crashes, late))
}

fn liveness() -> Check {
    let mut parts = Vec::new();
    for chains in [2u16, 3] {
        for delay in [0u64, 100] {
            let cfg = ClusterConfig::new(chains, 2, ProtocolKind::Cbt);
            let t = &cfg.timeouts;
            let bound = (u64::from(HEARTBEAT_THRESHOLD) + 1) * t.heartbeat_interval
                + t.election_window
                + 1
                + t.recovery_interval
                + cfg.delivery_delay
                + delay;
            let mut template = FaultTemplate::crashes_only(1);
            if delay > 0 {
                template = template.with_delay(MessageKind::Commit, delay);
            }
            let (n, late) = late_schedules(&cfg, &template, bound)?;
            ensure(late == 0, || format!("cbt {chains} chains, delay {delay}: {late}/{n} schedules late (bound {bound})"))?;
            parts.push(format!("cbt {chains}ch/+{delay}: {n} ok (bound {bound})"));
        }
        let cfg = effective_config(&ClusterConfig::new(chains, 2, ProtocolKind::Cbt), ProtocolKind::Blocking2pc);
        let t = &cfg.timeouts;
        let bound = (u64::from(HEARTBEAT_THRESHOLD) + 1) * t.heartbeat_interval
            + t.election_window
            + 1
            + t.recovery_interval
            + cfg.delivery_delay;
        let (n, late) = late_schedules(&cfg, &FaultTemplate::crashes_only(1), bound)?;
        ensure(late >= 1, || format!("2pc {chains} chains: no schedule missed the bound"))?;
        parts.push(format!("2pc {chains}ch: {late}/{n} late"));
    }
    Ok(parts.join("; "))
}

fn txn_scaling() -> Check {
    let started = Instant::now();
    let report = scenario_txn_scaling(&TxnScalingParams::default()).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let base = &report.rows[0];
    let mut factors = Vec::new();
    for row in &report.rows {
        let oracle = (row.elapsed_ticks as f64 / base.elapsed_ticks as f64) / (row.txns as f64 / base.txns as f64);
        ensure((row.scaling_factor - oracle).abs() <= 0.0005, || format!("{} txns: {} vs {oracle}", row.txns, row.scaling_factor))?;
        ensure((0.97..=1.03).contains(&row.scaling_factor), || format!("{} txns: factor {}", row.txns, row.scaling_factor))?;
        ensure(row.metrics.committed_txns == row.txns as u64, || format!("{} txns: only {} committed", row.txns, row.metrics.committed_txns))?;
        factors.push(format!("{}:{:.3}", row.txns, row.scaling_factor));
    }
    ensure(report.rows.iter().map(|r| r.txns).collect::<Vec<_>>() == [60, 120, 240, 480], || "wrong workloads".into())?;
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    Ok(format!("factors {} in {elapsed:.1?}", factors.join(" ")))
}

fn chain_scaling() -> Check {
    let started = Instant::now();
    let p = ChainScalingParams::default();
    let report = scenario_chain_scaling(&p).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    ensure(p.txns == 640 && p.chain_counts == [2, 4, 8, 16, 32, 64], || "wrong parameters".into())?;
    let mut worst: f64 = 0.0;
    for row in &report.rows {
        let c = row.chains;
        for m in [&row.cbt, &row.two_pc, &row.hub] {
            ensure(m.committed_txns == 640, || format!("{c} chains: {:?} committed {}", m.protocol, m.committed_txns))?;
        }
        let overhead = (row.cbt.elapsed_ticks as f64 - row.two_pc.elapsed_ticks as f64) * 100.0 / row.two_pc.elapsed_ticks as f64;
        ensure(overhead <= 5.0, || format!("{c} chains: overhead {overhead:.2}%"))?;
        worst = worst.max(overhead);
        ensure(row.hub.total_messages >= 2 * row.cbt.total_cross_chain_messages, || {
            format!("{c} chains: hub {} msgs < 2x cbt {}", row.hub.total_messages, row.cbt.total_cross_chain_messages)
        })?;
        if c >= 8 {
            ensure(row.hub.elapsed_ticks > row.cbt.elapsed_ticks, || {
                format!("{c} chains: hub {} ticks <= cbt {}", row.hub.elapsed_ticks, row.cbt.elapsed_ticks)
            })?;
        }
    }
    ensure(elapsed < Duration::from_secs(300), || format!("took {elapsed:?}"))?;
    Ok(format!("max overhead {worst:.2}%, hub >= 2x msgs and slower from 8 chains, {elapsed:.1?}"))
}

fn heartbeat() -> Check {
    let run = |pattern: &[bool]| {
        let mut c = HeartbeatCounters::default();
        let mut fired = Vec::new();
        for (i, &ok) in pattern.iter().enumerate() {
            let (next, trigger) = c.tick(ok);
            if trigger.is_some() {
                fired.push(i + 1);
            }
            c = next;
        }
        (c, fired)
    };
    // Triggers on the third consecutive miss, not before.
    let (_, fired) = run(&[false, false]);
    ensure(fired.is_empty(), || "election after two misses".into())?;
    let (c, fired) = run(&[false, false, false]);
    ensure(fired == [3], || format!("fired at {fired:?}"))?;
    ensure(c == HeartbeatCounters::default(), || format!("counters after trigger {c:?}"))?;
    // A success breaks the streak.
    let (_, fired) = run(&[false, false, true, false, false]);
    ensure(fired.is_empty(), || "non-consecutive misses triggered".into())?;
    let (_, fired) = run(&[false, false, true, false, false, false]);
    ensure(fired == [6], || format!("fired at {fired:?}"))?;
    // Success counter runs 1, 2, then resets at exactly 3.
    let mut c = HeartbeatCounters::default();
    let mut seen = Vec::new();
    for _ in 0..4 {
        c = c.tick(true).0;
        seen.push(c.success);
    }
    ensure(seen == [1, 2, 0, 1], || format!("success counter went {seen:?}"))?;
    Ok("election on 3rd consecutive miss, success counter resets at 3".into())
}

/// Phase each transaction should be in after recovery, from the records alone.
fn expected_phases(records: &[DtRecord]) -> BTreeMap<TxnId, RecoveredPhase> {
    let mut out = BTreeMap::new();
    for r in records {
        let phase = match r.kind {
            RecordKind::Commit => RecoveredPhase::Decided(Decision::Commit),
            RecordKind::Abort => RecoveredPhase::Decided(Decision::Abort),
            RecordKind::VotedYes => RecoveredPhase::VotedYes,
            // An undecided coordinator aborts on recovery.
            RecordKind::Start2PC => RecoveredPhase::Decided(Decision::Abort),
        };
        match (out.get(&r.txn), phase) {
            (Some(RecoveredPhase::Decided(_)), RecoveredPhase::Decided(Decision::Abort)) if r.kind == RecordKind::Start2PC => {}
            (Some(RecoveredPhase::VotedYes), RecoveredPhase::Decided(Decision::Abort)) if r.kind == RecordKind::Start2PC => {}
            _ => {
                out.insert(r.txn, phase);
            }
        }
    }
    out
}

fn round_trip(dir: &std::path::Path, records: &[DtRecord], n: &mut usize) -> Result<(), String> {
    *n += 1;
    let path = dir.join(format!("prefix-{n}.log"));
    let bytes: Vec<u8> = records.iter().flat_map(|r| r.encode()).collect();
    std::fs::write(&path, bytes).map_err(|e| e.to_string())?;
    let (mut log, report) = DtLog::open(&path).map_err(|e| e.to_string())?;
    ensure(report.records == records.len() && report.truncated_bytes == 0, || format!("reopen lost records: {report:?}"))?;
    ensure(log.records() == records, || "records differ after reopen".into())?;
    let term = records.iter().map(|r| r.term).max().unwrap_or(0) + 1;
    let phases = log.recover(term).map_err(|e| e.to_string())?;
    let want = expected_phases(records);
    ensure(phases == want, || format!("prefix of {} records: recovered {phases:?}, want {want:?}", records.len()))?;
    // Recovery is durable: reopening yields the same phases without new records.
    drop(log);
    let (mut again, _) = DtLog::open(&path).map_err(|e| e.to_string())?;
    let len = again.len();
    ensure(again.recover(term + 1).map_err(|e| e.to_string())? == want && again.len() == len, || {
        "second recovery changed the log".into()
    })?;
    Ok(())
}

fn dtlog_round_trip() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut prefixes = 0;
    let mut traces = 0;
    for crash in [Some(1), Some(3), None] {
        let p = BlockingParams { crash_after_txn: crash, ..BlockingParams::default() };
        for (_, _, r) in p.runs().map_err(|e| e.to_string())? {
            traces += 1;
            let mut logs: BTreeMap<NodeId, Vec<DtRecord>> = BTreeMap::new();
            for e in r.trace.iter() {
                let node = match &e.event {
                    TraceEvent::LogAppend { node, record } => {
                        logs.entry(*node).or_default().push(*record);
                        *node
                    }
                    TraceEvent::Truncate { node, len } => {
                        logs.entry(*node).or_default().truncate(*len as usize);
                        *node
                    }
                    _ => continue,
                };
                round_trip(dir.path(), &logs[&node], &mut prefixes)?;
            }
            for (node, records) in &logs {
                ensure(*records == r.trace.records_of(*node), || format!("{node}: trace replay mismatch"))?;
            }
        }
    }

    let mut log = DtLog::in_memory();
    log.append(TxnId(1), RecordKind::VotedYes, 1).map_err(|e| e.to_string())?;
    log.append(TxnId(1), RecordKind::Commit, 1).map_err(|e| e.to_string())?;
    ensure(matches!(log.append(TxnId(1), RecordKind::Abort, 2), Err(DtLogError::Integrity { .. })), || {
        "abort after commit accepted".into()
    })?;
    let mut log = DtLog::in_memory();
    log.append(TxnId(2), RecordKind::Abort, 1).map_err(|e| e.to_string())?;
    ensure(matches!(log.append(TxnId(2), RecordKind::Commit, 1), Err(DtLogError::Integrity { .. })), || {
        "commit after abort accepted".into()
    })?;
    let bad = [
        DtRecord { txn: TxnId(3), kind: RecordKind::Commit, term: 1, seq: 0 },
        DtRecord { txn: TxnId(3), kind: RecordKind::Abort, term: 1, seq: 1 },
    ];
    ensure(DtLog::from_records(&bad).is_err(), || "conflicting records rebuilt".into())?;
    Ok(format!("{prefixes} prefixes over {traces} traces recovered; conflicting appends rejected"))
}

fn paper_literal_counterexample() -> Check {
    let report = scenario_modelcheck(&ModelCheckParams::default()).map_err(|e| e.to_string())?;
    let cx = report.counterexample.ok_or("no disagreeing schedule found")?;
    ensure(cx.config.mode == ProtocolMode::PaperLiteral, || "counterexample not from literal mode".into())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = write_json(&counterexamples_dir(dir.path()), "paper-literal", &cx).map_err(|e| e.to_string())?;
    let back: Counterexample =
        serde_json::from_str(&std::fs::read_to_string(&path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let r = back.replay().map_err(|e| e.to_string())?;
    ensure(r.outcome.is_disagreement(), || format!("replay outcome {:?}", r.outcome))?;
    let coord = cx.workload.txns[0].coordinator;
    let logged_commit = r.trace.iter().any(|e| {
        matches!(&e.event, TraceEvent::LogAppend { node, record } if node.chain == coord && record.kind == RecordKind::Commit)
    });
    let aborted_elsewhere = r.trace.iter().any(|e| {
        matches!(&e.event, TraceEvent::Decide { node, decision: Decision::Abort, .. } if node.chain != coord)
    });
    ensure(logged_commit && aborted_elsewhere, || "replay does not contradict a logged commit".into())?;
    let mut safe_cfg = cx.config.clone();
    safe_cfg.mode = ProtocolMode::Safe;
    let safe = sim_run(&safe_cfg, &cx.workload, &cx.found.schedule, traced()).map_err(|e| e.to_string())?;
    ensure(!safe.outcome.is_disagreement(), || "safe mode disagrees on the same schedule".into())?;
    Ok(format!("{:?} archived and replayed; safe mode agrees", cx.found.varied))
}

fn ndjson(r: &SimResult) -> Vec<u8> {
    r.trace.to_ndjson()
}

fn determinism() -> Check {
    let mut compared = 0;
    for _ in 0..2 {
        let a = BlockingParams::default().runs().map_err(|e| e.to_string())?;
        let b = BlockingParams::default().runs().map_err(|e| e.to_string())?;
        for ((pa, _, ra), (_, _, rb)) in a.iter().zip(&b) {
            ensure(ndjson(ra) == ndjson(rb), || format!("blocking {} traces differ", pa.name()))?;
            ensure(!ra.trace.is_empty(), || "empty trace".into())?;
            compared += 1;
        }
    }
    let cfg = ClusterConfig::new(8, 2, ProtocolKind::Cbt);
    let w = Workload::round_robin(64, &cfg.chain_ids(), 2);
    for protocol in [ProtocolKind::Cbt, ProtocolKind::Blocking2pc, ProtocolKind::Hub] {
        let schedule = cbt_transport::FaultSchedule::new(7).crash(NodeId::new(1, 0), 15);
        let a = run_protocol(protocol, &cfg, &w, &schedule, traced()).map_err(|e| e.to_string())?;
        let b = run_protocol(protocol, &cfg, &w, &schedule, traced()).map_err(|e| e.to_string())?;
        ensure(ndjson(&a) == ndjson(&b), || format!("{} traces differ", protocol.name()))?;
        compared += 1;
    }
    Ok(format!("{compared} trace pairs byte-identical"))
}

#[test]
fn acceptance() {
    let checks: [(&str, fn() -> Check); 9] = [
        ("blocking scenario exact counts", fig3_counts),
        ("agreement model check", model_check),
        ("nonblocking liveness bound", liveness),
        ("transaction scaling", txn_scaling),
        ("chain scaling and overhead", chain_scaling),
        ("heartbeat exactness", heartbeat),
        ("dt-log recovery round-trip", dtlog_round_trip),
        ("literal-timeout counterexample", paper_literal_counterexample),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (name, check) in checks {
        let res = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        match res {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                println!("FAIL {name}: {why}");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}
