use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use cbt_control::{ClusterSpec, TransportKind};
use cbt_core::{ChainId, ClusterConfig, ProtocolKind, ProtocolMode, TxnId, Workload};
use cbt_harness::report::{counterexamples_dir, data_dir, reports_dir, write_json};
use cbt_harness::scenarios::{
    scenario_blocking, scenario_chain_scaling, scenario_modelcheck, scenario_txn_scaling, BlockingParams,
    ChainScalingParams, ModelCheckParams, TxnScalingParams,
};
use cbt_harness::{effective_config, run_protocol, HarnessError, ScenarioMetrics};
use cbt_transport::{FaultEvent, FaultSchedule, LiveCluster, LiveOptions, SimOptions};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "cbt", version, about = "Cross-chain commit protocol: simulator, experiments, live clusters")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one workload in the deterministic simulator.
    Sim(SimArgs),
    /// Run a named experiment, print its table and write a JSON report.
    Scenario {
        #[arg(value_enum)]
        name: ScenarioName,
        /// Print the JSON report instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Run a cluster over TCP loopback.
    Live {
        #[command(subcommand)]
        cmd: LiveCmd,
    },
    /// Start the HTTP/websocket control service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7070")]
        addr: SocketAddr,
    },
}

#[derive(Subcommand)]
enum LiveCmd {
    /// Start the nodes described by a cluster JSON file and run a workload.
    Start {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 5)]
        txns: usize,
        /// Participants per transaction (default: every other chain).
        #[arg(long)]
        participants: Option<usize>,
        /// Give up on undecided transactions after this many seconds.
        #[arg(long, default_value_t = 30)]
        wait_secs: u64,
        /// Keep the nodes running until Ctrl-C after the workload finishes.
        #[arg(long)]
        hold: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioName {
    Blocking,
    TxnScaling,
    ChainScaling,
    Modelcheck,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Safe,
    Paper,
}

#[derive(clap::Args)]
struct SimArgs {
    /// cbt, 2pc or hub.
    #[arg(long, default_value = "cbt")]
    protocol: ProtocolKind,
    #[arg(long, default_value_t = 3)]
    chains: u16,
    #[arg(long, default_value_t = 2)]
    nodes_per_chain: u16,
    #[arg(long, default_value_t = 5)]
    txns: usize,
    /// Participants per transaction with round-robin coordinators; without
    /// it chain 0 coordinates and every other chain participates.
    #[arg(long)]
    participants: Option<usize>,
    #[arg(long, value_enum, default_value = "safe")]
    mode: ModeArg,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// crash:<c>.<n>@<tick>, restart:<c>.<n>@<tick>, drop:<Kind>[:<count>],
    /// delay:<Kind>:<ticks>. Repeatable.
    #[arg(long = "fault")]
    faults: Vec<FaultEvent>,
    #[arg(long)]
    max_ticks: Option<u64>,
    /// Write the NDJSON trace here.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Print the metrics as JSON.
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Sim(args) => cmd_sim(args),
        Cmd::Scenario { name, json } => cmd_scenario(name, json),
        Cmd::Live { cmd: LiveCmd::Start { config, txns, participants, wait_secs, hold } } => {
            runtime().and_then(|rt| rt.block_on(cmd_live(config, txns, participants, wait_secs, hold)))
        }
        Cmd::Serve { addr } => {
            runtime().and_then(|rt| {
                rt.block_on(cbt_control::serve(addr))?;
                Ok(ExitCode::SUCCESS)
            })
        }
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn runtime() -> Result<tokio::runtime::Runtime, HarnessError> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

fn workload(cfg: &ClusterConfig, txns: usize, participants: Option<usize>) -> Workload {
    let hub = if cfg.dedicated_hub() { cfg.hub } else { None };
    let chains: Vec<ChainId> = cfg.chain_ids().into_iter().filter(|c| Some(*c) != hub).collect();
    match participants {
        Some(k) => Workload::round_robin(txns, &chains, k),
        None => Workload::uniform(txns, &chains),
    }
}

fn cmd_sim(a: SimArgs) -> Result<ExitCode, HarnessError> {
    let mut base = ClusterConfig::new(a.chains, a.nodes_per_chain, a.protocol);
    base.mode = match a.mode {
        ModeArg::Safe => ProtocolMode::Safe,
        ModeArg::Paper => ProtocolMode::PaperLiteral,
    };
    let cfg = effective_config(&base, a.protocol);
    let w = workload(&cfg, a.txns, a.participants);
    let mut faults = FaultSchedule::new(a.seed);
    for f in a.faults {
        faults.push(f);
    }
    let opts = SimOptions { max_ticks: a.max_ticks, record_trace: a.trace.is_some() };
    let r = run_protocol(a.protocol, &base, &w, &faults, opts)?;
    if let Some(path) = &a.trace {
        let mut out = BufWriter::new(File::create(path)?);
        r.trace.write_ndjson(&mut out)?;
        out.flush()?;
    }
    let m = ScenarioMetrics::of(a.protocol, &r);
    if a.json {
        println!("{}", serde_json::to_string_pretty(&m)?);
    } else {
        println!("protocol            {}", a.protocol.name());
        println!("outcome             {:?}", m.outcome);
        println!("committed/aborted   {}/{}", m.committed_txns, m.aborted_txns);
        println!("commit messages     {}", m.commit_messages_at_coordinator);
        println!("cross-chain msgs    {}", m.total_cross_chain_messages);
        println!("heartbeats          {}", m.heartbeat_messages);
        println!("intra-chain msgs    {}", m.intra_chain_messages);
        println!("elapsed ticks       {}", m.elapsed_ticks);
    }
    Ok(if r.outcome.is_disagreement() { ExitCode::FAILURE } else { ExitCode::SUCCESS })
}

fn cmd_scenario(name: ScenarioName, json: bool) -> Result<ExitCode, HarnessError> {
    let root = data_dir();
    let reports = reports_dir(&root);
    let all = matches!(name, ScenarioName::All);
    let emit = |file: &str, table: String, value: serde_json::Value| -> Result<(), HarnessError> {
        let path = write_json(&reports, file, &value)?;
        if json {
            println!("{}", serde_json::to_string_pretty(&value)?);
        } else {
            println!("{table}");
            println!("report: {}\n", path.display());
        }
        Ok(())
    };
    if all || matches!(name, ScenarioName::Blocking) {
        let r = scenario_blocking(&BlockingParams::default())?;
        emit("blocking", r.table(), serde_json::to_value(&r)?)?;
    }
    if all || matches!(name, ScenarioName::TxnScaling) {
        let r = scenario_txn_scaling(&TxnScalingParams::default())?;
        emit("txn-scaling", r.table(), serde_json::to_value(&r)?)?;
    }
    if all || matches!(name, ScenarioName::ChainScaling) {
        let r = scenario_chain_scaling(&ChainScalingParams::default())?;
        emit("chain-scaling", r.table(), serde_json::to_value(&r)?)?;
    }
    if all || matches!(name, ScenarioName::Modelcheck) {
        let r = scenario_modelcheck(&ModelCheckParams::default())?;
        emit("modelcheck", r.table(), serde_json::to_value(&r)?)?;
        if let Some(cx) = &r.counterexample {
            let path = write_json(&counterexamples_dir(&root), "paper-literal", cx)?;
            if !json {
                println!("counterexample: {}", path.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

async fn cmd_live(
    config: PathBuf,
    txns: usize,
    participants: Option<usize>,
    wait_secs: u64,
    hold: bool,
) -> Result<ExitCode, HarnessError> {
    let text = fs::read_to_string(&config)?;
    let mut spec: ClusterSpec = serde_json::from_str(&text)?;
    spec.transport = TransportKind::Live;
    let cfg = effective_config(&spec.to_config()?, spec.protocol);
    let dir = data_dir().join("live");
    fs::create_dir_all(&dir)?;
    let opts = LiveOptions { tick_ms: spec.tick_ms, base_port: spec.base_port, data_dir: Some(dir), ..LiveOptions::default() };
    let cluster = LiveCluster::start(&cfg, opts).await?;
    for (node, addr) in cluster.addrs() {
        println!("node {node} listening on {addr}");
    }
    // Logs under the data dir survive restarts; continue after their ids.
    let seen = cluster.views().await?.iter().flat_map(|v| v.records.iter().map(|r| r.txn.0)).max().unwrap_or(0);
    let mut w = workload(&cfg, txns, participants);
    for t in &mut w.txns {
        t.id = TxnId(t.id.0 + seen);
    }
    let decisions = cluster.run_workload(&w, Duration::from_secs(wait_secs)).await;
    let code = match decisions {
        Ok(d) => {
            let stdout = io::stdout();
            let mut out = stdout.lock();
            for t in &w.txns {
                match d.get(&t.id) {
                    Some(dec) => writeln!(out, "{} {:?}", t.id, dec)?,
                    None => writeln!(out, "{} undecided", t.id)?,
                }
            }
            if d.len() == w.txns.len() { ExitCode::SUCCESS } else { ExitCode::FAILURE }
        }
        Err(e) => {
            eprintln!("workload failed: {e}");
            ExitCode::FAILURE
        }
    };
    if hold {
        println!("holding; Ctrl-C to stop");
        tokio::signal::ctrl_c().await?;
    }
    cluster.shutdown().await;
    Ok(code)
}
