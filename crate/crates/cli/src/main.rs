//! `owndsm`: run cluster nodes, the verifier and the benchmarks.
//!
//! Every command prints JSON records, one per line, on stdout. Exit status
//! is 0 when everything checked out, 1 on an invariant or oracle failure
//! and 2 on a configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

use owndsm::bench::{self, KvParams, Workload};
use owndsm::config::{ClusterConfig, Transport};
use owndsm::runtime::node::Faults;
use owndsm::runtime::Env;
use owndsm::transport::loopback::Cluster;
use owndsm::transport::tcp::{self, NodeSnapshot, TcpNode, TcpOptions};
use owndsm::verifier::explore::{self, Mode, Report};
use owndsm::verifier::generate::GenConfig;
use owndsm::verifier::program::ProtoProgram;
use owndsm::verifier::{schedule, suite};
use owndsm::Error;

#[derive(Parser)]
#[command(name = "owndsm", version, about = "Ownership-guided distributed shared memory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Start one node of a cluster (or a whole loopback cluster).
    Cluster {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: u16,
        /// Workload node 0 runs once every node is up.
        #[arg(long)]
        workload: Option<WorkloadName>,
        #[command(flatten)]
        params: BenchParams,
        /// Seconds to wait for peers and for the workload.
        #[arg(long, default_value_t = 60)]
        timeout: u64,
    },
    /// Model-check the standard suite and generated programs.
    Verify {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        programs: usize,
        /// Run the standard suite with one protocol mutation enabled.
        #[arg(long)]
        fault: Option<String>,
        /// Run the standard suite once per protocol mutation.
        #[arg(long)]
        mutations: bool,
        #[arg(long, value_enum, default_value_t = ModeArg::Memoized)]
        mode: ModeArg,
        /// Directory for counterexample schedules.
        #[arg(long, default_value = "counterexamples")]
        out: PathBuf,
    },
    /// Re-run a counterexample schedule written by `verify`.
    Replay { file: PathBuf },
    /// Run a benchmark on a loopback cluster.
    Bench {
        workload: WorkloadName,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        nodes: Option<u16>,
        #[command(flatten)]
        params: BenchParams,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum WorkloadName {
    Accumulator,
    Tiedlist,
    Untiedlist,
    Kvstore,
    Economy,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Memoized,
    Full,
}

#[derive(Args, Clone)]
struct BenchParams {
    /// List length.
    #[arg(long, default_value_t = 1000)]
    n: u32,
    #[arg(long, default_value_t = 10_000)]
    ops: u32,
    #[arg(long, default_value_t = 1024)]
    keys: u32,
    #[arg(long, default_value_t = 16)]
    shards: u32,
    #[arg(long, default_value_t = 90)]
    read_pct: u32,
    #[arg(long, default_value_t = 0.99)]
    theta: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

impl BenchParams {
    fn workload(&self, w: WorkloadName) -> Workload {
        match w {
            WorkloadName::Accumulator => Workload::Accumulator,
            WorkloadName::Tiedlist => Workload::List { n: self.n, tied: true },
            WorkloadName::Untiedlist => Workload::List { n: self.n, tied: false },
            WorkloadName::Economy => Workload::Economy,
            WorkloadName::Kvstore => Workload::KvStore(KvParams {
                ops: self.ops,
                keys: self.keys,
                shards: self.shards,
                read_pct: self.read_pct,
                theta: self.theta,
                seed: self.seed,
            }),
        }
    }
}

/// Outcome of a command: pass, failure, or an error to report.
enum Fail {
    Check(String),
    Err(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Err(e)
    }
}

fn emit(v: serde_json::Value) {
    println!("{v}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Cluster { config, index, workload, params, timeout } => {
            cmd_cluster(&config, index, workload.map(|w| params.workload(w)), Duration::from_secs(timeout))
        }
        Cmd::Verify { seed, programs, fault, mutations, mode, out } => {
            let mode = match mode {
                ModeArg::Memoized => Mode::Memoized,
                ModeArg::Full => Mode::Full,
            };
            cmd_verify(seed, programs, fault.as_deref(), mutations, mode, &out)
        }
        Cmd::Replay { file } => cmd_replay(&file),
        Cmd::Bench { workload, config, nodes, params } => cmd_bench(params.workload(workload), config.as_deref(), nodes),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Fail::Check(msg)) => {
            eprintln!("owndsm: {msg}");
            ExitCode::from(1)
        }
        Err(Fail::Err(e)) => {
            eprintln!("owndsm: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn report_line(r: &bench::BenchReport) -> Result<(), Fail> {
    emit(serde_json::to_value(r).map_err(|e| Error::Codec(e.to_string()))?);
    if r.passed {
        Ok(())
    } else {
        let failed: Vec<&str> = r.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        Err(Fail::Check(format!("{} failed: {}", r.workload, failed.join(", "))))
    }
}

fn cmd_bench(w: Workload, config: Option<&Path>, nodes: Option<u16>) -> Result<(), Fail> {
    let mut cfg = match config {
        Some(p) => ClusterConfig::load(p)?,
        None => ClusterConfig::loopback(if matches!(w, Workload::KvStore(_)) { 4 } else { 2 }),
    };
    if let Some(n) = nodes {
        cfg = ClusterConfig { servers: ClusterConfig::loopback(n).servers, ..cfg };
        cfg.validate()?;
    }
    if cfg.transport == Transport::Tcp {
        return Err(Error::Config("bench runs on loopback; start TCP nodes with `owndsm cluster --workload`".into()).into());
    }
    let r = bench::run_loopback(&w, cfg.spec()?)?;
    report_line(&r)
}

fn cmd_cluster(config: &Path, index: u16, w: Option<Workload>, timeout: Duration) -> Result<(), Fail> {
    let cfg = ClusterConfig::load(config)?;
    if index >= cfg.nodes() {
        return Err(Error::Config(format!("index {index} is not in a cluster of {}", cfg.nodes())).into());
    }
    if cfg.transport == Transport::Loopback {
        return match w {
            Some(w) => report_line(&bench::run_loopback(&w, cfg.spec()?)?),
            None => {
                let mut c = Cluster::new(cfg.spec()?, Env::default())?;
                c.heartbeat_round()?;
                for n in &c.core.nodes {
                    emit(serde_json::to_value(NodeSnapshot::of(n)).map_err(|e| Error::Codec(e.to_string()))?);
                }
                Ok(())
            }
        };
    }
    let program = match &w {
        Some(w) => w.program(cfg.nodes())?,
        None => ProtoProgram::default(),
    };
    let mut node_cfg = cfg.spec()?.node_config()?;
    node_cfg.faults = Faults::default();
    let opts = TcpOptions { timeout, heartbeat_every: cfg.quantum };
    let node = TcpNode::start(&cfg.servers, index, node_cfg, Env::with_program(program), opts)?;
    info!("node {index} up, control port {}", node.control_port());
    if index != 0 || w.is_none() {
        node.wait_shutdown();
        emit(serde_json::to_value(node.snapshot()).map_err(|e| Error::Codec(e.to_string()))?);
        node.shutdown();
        return Ok(());
    }
    let w = w.unwrap();
    let result = bench::run_tcp(&node, &cfg.servers, &w, timeout);
    for p in cfg.servers.iter().skip(1) {
        if let Err(e) = tcp::control(&p.host, p.control_port, "shutdown") {
            log::warn!("shutdown of {}:{}: {e}", p.host, p.control_port);
        }
    }
    node.shutdown();
    report_line(&result?)
}

fn scenario_line(name: &str, r: &Report, fault: Option<&str>) -> serde_json::Value {
    json!({
        "kind": "scenario",
        "name": name,
        "fault": fault,
        "passed": r.passed(),
        "status": format!("{:?}", r.status),
        "states": r.states,
        "schedules": r.schedules.to_string(),
        "terminals": r.terminals,
        "violated": r.failures.keys().map(|k| k.name()).collect::<Vec<_>>(),
    })
}

fn write_counterexamples(out: &Path, scenario: &str, fault: Option<&str>, r: &Report) -> Result<Vec<String>, Error> {
    let mut files = Vec::new();
    if r.failures.is_empty() {
        return Ok(files);
    }
    std::fs::create_dir_all(out)?;
    for (inv, cx) in &r.failures {
        let path = out.join(format!("{scenario}-{}.schedule", inv.name()));
        let header = vec![
            format!("scenario {scenario}"),
            format!("fault {}", fault.unwrap_or("none")),
            format!("invariant {}", inv.name()),
            format!("violation {}", cx.violation.detail),
        ];
        schedule::write(&path, &cx.schedule, &header)?;
        files.push(path.display().to_string());
    }
    Ok(files)
}

fn cmd_verify(seed: u64, programs: usize, fault: Option<&str>, mutations: bool, mode: Mode, out: &Path) -> Result<(), Fail> {
    let start = Instant::now();
    let mut failed = Vec::new();
    if mutations {
        let res = suite::mutation_score(mode)?;
        let caught = res.iter().filter(|m| m.caught()).count();
        for m in &res {
            emit(json!({
                "kind": "mutation",
                "fault": m.fault,
                "caught": m.caught(),
                "invariants": m.detected.iter().map(|i| i.name()).collect::<Vec<_>>(),
                "witness": m.witness.as_ref().map(|w| &w.0),
            }));
        }
        emit(json!({"kind": "mutation-score", "caught": caught, "total": res.len()}));
        emit(json!({"kind": "timing", "elapsed_ms": start.elapsed().as_millis() as u64}));
        if caught != res.len() {
            return Err(Fail::Check(format!("mutation score {caught}/{}", res.len())));
        }
        return Ok(());
    }
    let faults = match fault {
        Some(name) => Faults::by_name(name)
            .ok_or_else(|| Error::Config(format!("unknown fault `{name}`; known: {}", Faults::NAMES.join(", "))))?,
        None => Faults::default(),
    };
    for r in suite::run_standard(faults, mode)? {
        let mut line = scenario_line(&r.name, &r.report, fault);
        line["expectations_failed"] = json!(r.expectation_failures);
        let files = write_counterexamples(out, &r.name, fault, &r.report)?;
        if !files.is_empty() {
            line["counterexamples"] = json!(files);
        }
        emit(line);
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    if fault.is_none() && programs > 0 {
        let reports = suite::run_generated(seed, programs, GenConfig::default(), mode)?;
        let mut schedules = 0u128;
        let mut reads = 0u128;
        let mut mismatched = 0u128;
        for r in &reports {
            schedules += r.schedules;
            reads += r.reads_checked;
            mismatched += r.mismatched_schedules;
            if !r.passed() {
                emit(scenario_line(&r.program, r, None));
                write_counterexamples(out, &r.program, None, r)?;
                failed.push(r.program.clone());
            }
        }
        emit(json!({
            "kind": "generated",
            "seed": seed,
            "programs": reports.len(),
            "passed": reports.iter().filter(|r| r.passed()).count(),
            "schedules": schedules.to_string(),
            "reads_checked": reads.to_string(),
            "mismatched_schedules": mismatched.to_string(),
        }));
    }
    emit(json!({"kind": "timing", "elapsed_ms": start.elapsed().as_millis() as u64}));
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Fail::Check(format!("{} failed: {}", failed.len(), failed.join(", "))))
    }
}

fn cmd_replay(file: &Path) -> Result<(), Fail> {
    let text = std::fs::read_to_string(file).map_err(|e| Error::Config(format!("{}: {e}", file.display())))?;
    let header = |key: &str| {
        text.lines().find_map(|l| l.strip_prefix("# ").and_then(|l| l.strip_prefix(key)).map(|v| v.trim().to_string()))
    };
    let name = header("scenario ").ok_or_else(|| Error::Config("schedule has no `# scenario` line".into()))?;
    let fault = header("fault ").unwrap_or_else(|| "none".into());
    let faults = if fault == "none" {
        Faults::default()
    } else {
        Faults::by_name(&fault).ok_or_else(|| Error::Config(format!("unknown fault `{fault}`")))?
    };
    let sc = suite::standard()
        .into_iter()
        .find(|s| s.name() == name)
        .ok_or_else(|| Error::Config(format!("`{name}` is not a standard scenario")))?;
    let steps = schedule::parse(&text)?;
    let mut c = explore::cluster_for(&sc.program, sc.spec(faults)?)?;
    c.replay(&steps)?;
    let violations: Vec<String> = c.log.violations.iter().map(|v| v.to_string()).collect();
    emit(json!({
        "kind": "replay",
        "scenario": name,
        "fault": fault,
        "steps": steps.len(),
        "violations": violations,
    }));
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Fail::Check(format!("{} violations reproduced", violations.len())))
    }
}
