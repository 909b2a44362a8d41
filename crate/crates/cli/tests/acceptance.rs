//! One PASS/FAIL line per acceptance criterion. Runs without the test
//! harness so the lines are always printed.

use std::io::{BufRead, BufReader};
use std::net::TcpListener;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use owndsm::bench::{self, BenchReport, KvParams, Workload, BENCH_UNIT};
use owndsm::runtime::controller::Reason;
use owndsm::runtime::node::Faults;
use owndsm::runtime::task::Frame;
use owndsm::runtime::{Env, Placement};
use owndsm::transport::loopback::{Cluster, ClusterSpec};
use owndsm::verifier::explore::{self, Mode, Status};
use owndsm::verifier::generate::GenConfig;
use owndsm::verifier::interp::INTERP_FN;
use owndsm::verifier::suite;

type Outcome = Result<String, String>;

const PROGRAMS: usize = 200;
const GEN_LIMIT: Duration = Duration::from_secs(600);
/// Generated programs also explored without memoization.
const FULL_CROSS_CHECK: usize = 50;
const UNTIED_FACTOR: u64 = 1000;
const TCP_LIMIT: Duration = Duration::from_secs(120);

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn c1_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let reports = suite::run_generated(1, PROGRAMS, GenConfig::default(), Mode::Memoized).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(reports.len() == PROGRAMS, format!("{} programs generated", reports.len()))?;
    let bad: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed() || r.mismatched_schedules != 0 || r.status != Status::Complete)
        .map(|r| r.program.as_str())
        .collect();
    ensure(bad.is_empty(), format!("failing programs: {bad:?}"))?;
    ensure(elapsed < GEN_LIMIT, format!("took {elapsed:?}"))?;
    let schedules: u128 = reports.iter().map(|r| r.schedules).sum();
    let reads: u128 = reports.iter().map(|r| r.reads_checked).sum();

    let full = suite::run_generated(1, FULL_CROSS_CHECK, GenConfig::default(), Mode::Full).map_err(|e| e.to_string())?;
    let mut compared = 0;
    for (m, f) in reports.iter().zip(&full) {
        ensure(f.failures.is_empty(), format!("{} fails without memoization", f.program))?;
        if f.status == Status::Complete {
            ensure(f.schedules == m.schedules, format!("{}: {} vs {} schedules", m.program, f.schedules, m.schedules))?;
            compared += 1;
        }
    }
    Ok(format!(
        "{PROGRAMS} programs, {schedules} schedules, {reads} reads matched the oracle in {:.1}s; {compared} schedule counts confirmed by full enumeration",
        elapsed.as_secs_f64()
    ))
}

fn c2_invariants_and_mutations() -> Outcome {
    let std = suite::run_standard(Faults::default(), Mode::Memoized).map_err(|e| e.to_string())?;
    let bad: Vec<&str> = std.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    ensure(bad.is_empty(), format!("standard suite failures: {bad:?}"))?;
    let muts = suite::mutation_score(Mode::Memoized).map_err(|e| e.to_string())?;
    let caught = muts.iter().filter(|m| m.caught()).count();
    let missed: Vec<&str> = muts.iter().filter(|m| !m.caught()).map(|m| m.fault.as_str()).collect();
    ensure(caught == 5 && muts.len() == 5, format!("mutation score {caught}/{}; missed {missed:?}", muts.len()))?;
    Ok(format!("{} scenarios clean, mutation score {caught}/5", std.len()))
}

fn c3_message_economy() -> Outcome {
    let r = bench::run_loopback(&Workload::Economy, ClusterSpec::new(2, BENCH_UNIT)).map_err(|e| e.to_string())?;
    let failed: Vec<String> = r.checks.iter().filter(|c| !c.passed).map(|c| format!("{}: {}", c.name, c.detail)).collect();
    ensure(r.passed, failed.join("; "))?;
    Ok(format!("{} exact-count checks", r.checks.len()))
}

fn c4_color_overflow() -> Outcome {
    let s = suite::color_overflow_scenario();
    let res = suite::run_scenario(&s, Faults::default(), Mode::Memoized).map_err(|e| e.to_string())?;
    ensure(res.passed(), format!("{:?} {:?}", res.report.failures.keys().collect::<Vec<_>>(), res.expectation_failures))?;
    let spec = s.spec(Faults::default()).map_err(|e| e.to_string())?;
    let c = explore::run_once(&s.program, spec, 100_000).map_err(|e| e.to_string())?;
    let relocations: u64 = c.core.nodes.iter().map(|n| n.stats.relocations).sum();
    ensure(relocations == 1, format!("{relocations} relocations"))?;
    ensure(c.log.violations.is_empty(), format!("{:?}", c.log.violations))?;
    let d = c.log.digest();
    let reads: Vec<u64> = [(0u32, 13u32), (1, 0)].iter().filter_map(|k| d.reads.get(k).copied()).collect();
    ensure(reads == [4, 4], format!("reads {reads:?}"))?;
    Ok(format!("1 relocation over 4 epochs with 2 color bits, reads {reads:?}, {} schedules checked", res.report.schedules))
}

fn c5_tied_list() -> Outcome {
    let spec = || ClusterSpec::new(2, BENCH_UNIT);
    let tied = bench::run_loopback(&Workload::List { n: 1000, tied: true }, spec()).map_err(|e| e.to_string())?;
    let untied = bench::run_loopback(&Workload::List { n: 1000, tied: false }, spec()).map_err(|e| e.to_string())?;
    ensure(tied.passed && untied.passed, format!("tied {:?} untied {:?}", tied.checks, untied.checks))?;
    ensure(tied.reader_fetches == 1, format!("tied list took {} fetch rounds", tied.reader_fetches))?;
    ensure(
        untied.reader_fetches >= UNTIED_FACTOR * tied.reader_fetches,
        format!("untied {} vs tied {}", untied.reader_fetches, tied.reader_fetches),
    )?;
    Ok(format!("n=1000: tied {} fetch, untied {} fetches", tied.reader_fetches, untied.reader_fetches))
}

fn c6_kv_store() -> Outcome {
    let r = bench::run_loopback(&Workload::KvStore(KvParams::default()), ClusterSpec::new(4, BENCH_UNIT))
        .map_err(|e| e.to_string())?;
    let failed: Vec<String> = r.checks.iter().filter(|c| !c.passed).map(|c| format!("{}: {}", c.name, c.detail)).collect();
    ensure(r.passed, failed.join("; "))?;
    let slice = suite::standard().into_iter().find(|s| s.name() == "kv-slice").ok_or("kv-slice scenario missing")?;
    let res = suite::run_scenario(&slice, Faults::default(), Mode::Memoized).map_err(|e| e.to_string())?;
    ensure(res.passed(), format!("kv-slice: {:?} {:?}", res.report.failures.keys().collect::<Vec<_>>(), res.expectation_failures))?;
    Ok(format!(
        "{} ops on 4 nodes match a sequential replay; mutex slice clean over {} schedules",
        r.ops, res.report.schedules
    ))
}

fn c7_rebalance() -> Outcome {
    const UNIT: u64 = 1 << 20;
    let setup = |bytes: [u64; 2]| -> Result<(Cluster, Vec<_>), String> {
        let mut c = Cluster::new(ClusterSpec::new(2, UNIT), Env::with_program(suite::accumulator())).map_err(|e| e.to_string())?;
        c.heartbeat_every = None;
        let mut tasks = Vec::new();
        for b in bytes {
            let t = c.spawn(1, INTERP_FN, Frame::new(0, Vec::new()), Placement::Node(1)).map_err(|e| e.to_string())?;
            c.node_mut(1).heap.alloc_tagged(b, None, Some(t)).map_err(|e| e.to_string())?;
            tasks.push(t);
        }
        Ok((c, tasks))
    };
    let tick = |c: &mut Cluster| -> Result<(), String> {
        c.heartbeat_round().map_err(|e| e.to_string())?;
        while c.core.deliver_one(0, 1) || c.core.deliver_one(1, 0) {}
        Ok(())
    };

    let (mut hot, tasks) = setup([UNIT * 60 / 100, UNIT * 35 / 100])?;
    tick(&mut hot)?;
    let migs = hot.node(0).controller.as_ref().unwrap().migrations.clone();
    ensure(migs.len() == 1, format!("hot node: {migs:?}"))?;
    let m = migs[0];
    ensure(m.task == tasks[0] && m.from == 1 && m.reason == Reason::Memory, format!("{m:?}"))?;
    ensure(hot.node(m.to).tasks.contains_key(&tasks[0]), "largest task did not arrive")?;

    let (mut cool, _) = setup([UNIT * 25 / 100, UNIT * 20 / 100])?;
    for _ in 0..5 {
        tick(&mut cool)?;
    }
    let n = cool.node(0).controller.as_ref().unwrap().migrations.len();
    ensure(n == 0, format!("balanced cluster migrated {n} tasks"))?;
    Ok("95% node moved its largest task in 1 tick; balanced cluster 0 migrations over 5 ticks".into())
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn tcp_run(workload: &str, dir: &std::path::Path) -> Result<BenchReport, String> {
    let ports: Vec<u16> = (0..4).map(|_| free_port()).collect();
    let conf = dir.join(format!("{workload}.conf"));
    std::fs::write(
        &conf,
        format!(
            "transport = tcp\nunit_heap_size = {BENCH_UNIT}\n[servers]\n0 127.0.0.1 {} {}\n1 127.0.0.1 {} {}\n",
            ports[0], ports[1], ports[2], ports[3]
        ),
    )
    .map_err(|e| e.to_string())?;
    let bin = env!("CARGO_BIN_EXE_owndsm");
    let args = |i: &'static str| vec!["cluster", "--config", conf.to_str().unwrap(), "--index", i, "--workload", workload, "--timeout", "60"];
    let mut peer = Command::new(bin).args(args("1")).stdout(Stdio::null()).stderr(Stdio::null()).spawn().map_err(|e| e.to_string())?;
    let mut driver = Command::new(bin).args(args("0")).stdout(Stdio::piped()).stderr(Stdio::piped()).spawn().map_err(|e| e.to_string())?;
    let stdout = driver.stdout.take().unwrap();
    let line = BufReader::new(stdout).lines().map_while(|l| l.ok()).find(|l| l.starts_with('{'));
    let status = driver.wait().map_err(|e| e.to_string())?;
    if peer.wait_timeout_kill(Duration::from_secs(10)).is_err() {
        return Err("peer process did not exit".into());
    }
    let line = line.ok_or_else(|| format!("{workload}: no report (exit {status})"))?;
    let r: BenchReport = serde_json::from_str(&line).map_err(|e| e.to_string())?;
    ensure(status.success() == r.passed, format!("{workload}: exit {status} but passed={}", r.passed))?;
    Ok(r)
}

trait WaitKill {
    fn wait_timeout_kill(&mut self, limit: Duration) -> Result<(), ()>;
}

impl WaitKill for std::process::Child {
    fn wait_timeout_kill(&mut self, limit: Duration) -> Result<(), ()> {
        let start = Instant::now();
        while start.elapsed() < limit {
            if let Ok(Some(_)) = self.try_wait() {
                return Ok(());
            }
            std::thread::sleep(Duration::from_millis(20));
        }
        let _ = self.kill();
        let _ = self.wait();
        Err(())
    }
}

fn c8_tcp_parity() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let mut out = Vec::new();
    for (name, w) in [
        ("economy", Workload::Economy),
        ("tiedlist", Workload::List { n: 1000, tied: true }),
        ("kvstore", Workload::KvStore(KvParams::default())),
    ] {
        let tcp = tcp_run(name, dir.path())?;
        let failed: Vec<String> = tcp.checks.iter().filter(|c| !c.passed).map(|c| format!("{}: {}", c.name, c.detail)).collect();
        ensure(tcp.passed, format!("{name} over tcp: {}", failed.join("; ")))?;
        let lo = bench::run_loopback(&w, ClusterSpec::new(2, BENCH_UNIT)).map_err(|e| e.to_string())?;
        ensure(lo.passed, format!("{name} on loopback failed"))?;
        ensure(tcp.reader_fetches == lo.reader_fetches, format!("{name}: reader fetches tcp {} loopback {}", tcp.reader_fetches, lo.reader_fetches))?;
        ensure(tcp.messages == lo.messages, format!("{name}: tcp {:?} loopback {:?}", tcp.messages, lo.messages))?;
        out.push(format!("{name} {:.0}ms", tcp.elapsed_ms));
    }
    let elapsed = start.elapsed();
    ensure(elapsed < TCP_LIMIT, format!("took {elapsed:?}"))?;
    Ok(format!("2 processes: {} (total {:.1}s)", out.join(", "), elapsed.as_secs_f64()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("oracle equivalence", c1_oracle_equivalence),
        ("invariants and mutations", c2_invariants_and_mutations),
        ("message economy", c3_message_economy),
        ("color overflow", c4_color_overflow),
        ("tied list", c5_tied_list),
        ("kv store", c6_kv_store),
        ("rebalance", c7_rebalance),
        ("tcp parity", c8_tcp_parity),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let (tag, detail) = match f() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {} {tag} {name} ({:.1}s): {detail}", i + 1, t.elapsed().as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
