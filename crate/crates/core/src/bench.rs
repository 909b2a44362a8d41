//! Micro-benchmarks: the accumulator, tied and untied list traversal, and
//! a mutex-sharded key-value store. Every workload is a program for the
//! interpreter, so the same code runs on the loopback cluster and over
//! TCP, and every run is checked against its oracle before it reports.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::addressing::NodeId;
use crate::error::{Error, Result};
use crate::runtime::task::Frame;
use crate::runtime::{self, Env, Placement};
use crate::transport::loopback::{Cluster, ClusterSpec};
use crate::transport::tcp::{self, NodeSnapshot, Peer, TcpNode};
use crate::transport::{Counters, MessageKind};
use crate::verifier::interp::{GuardKind, LogDigest, INTERP_FN};
use crate::verifier::program::{Op, Place, ProtoProgram};
use crate::verifier::suite;

/// Heap bytes per node for benchmark clusters.
pub const BENCH_UNIT: u64 = 1 << 26;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KvParams {
    pub ops: u32,
    pub keys: u32,
    pub shards: u32,
    /// Percentage of reads.
    pub read_pct: u32,
    pub theta: f64,
    pub seed: u64,
}

impl Default for KvParams {
    fn default() -> Self {
        KvParams { ops: 10_000, keys: 1024, shards: 16, read_pct: 90, theta: 0.99, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Workload {
    Accumulator,
    /// Sum of a linked list of `n` elements read from another node, with
    /// the elements tied into one group or chained through owners.
    List { n: u32, tied: bool },
    KvStore(KvParams),
    /// The message-economy probe program.
    Economy,
}

impl Workload {
    pub fn name(&self) -> String {
        match self {
            Workload::Accumulator => "accumulator".into(),
            Workload::List { tied: true, .. } => "tiedlist".into(),
            Workload::List { tied: false, .. } => "untiedlist".into(),
            Workload::KvStore(_) => "kvstore".into(),
            Workload::Economy => "economy".into(),
        }
    }

    /// The program run for this workload on a cluster of `nodes`.
    pub fn program(&self, nodes: u16) -> Result<ProtoProgram> {
        if nodes < 2 {
            return Err(Error::Config(format!("{} needs at least 2 nodes", self.name())));
        }
        Ok(match self {
            Workload::Accumulator => suite::accumulator(),
            Workload::List { n, tied: true } => suite::tied_sum(*n),
            Workload::List { n, tied: false } => untied_list(*n),
            Workload::KvStore(p) => kv_program(p, nodes)?,
            Workload::Economy => suite::economy(),
        })
    }

    fn ops(&self) -> u64 {
        match self {
            Workload::Accumulator => 2,
            Workload::List { n, .. } => *n as u64,
            Workload::KvStore(p) => p.ops as u64,
            Workload::Economy => suite::economy_cases().len() as u64,
        }
    }
}

/// `n` objects on node 0, each holding the owner of the next, summed by a
/// reader on node 1.
pub fn untied_list(n: u32) -> ProtoProgram {
    let mut p = ProtoProgram::new(format!("untied-sum-{n}"), 2);
    let r = p.add_routine();
    for i in 0..n {
        p.push(0, Op::Alloc { dst: i, obj: i, init: vec![i as u64 + 1, 0], on: None });
    }
    for i in (0..n.saturating_sub(1)).rev() {
        p.push(0, Op::Embed { parent: i, word: 1, child: i + 1, parent_obj: i, child_obj: i + 1 });
    }
    p.push(0, Op::MakeShared { src: 0, dst: n, obj: 0 })
        .push(0, Op::Spawn { routine: r, place: Place::Node(1), args: vec![n], dst: n + 1 })
        .push(0, Op::Join { src: n + 1, dst: None })
        .push(0, Op::Drop { var: 0, obj: Some(0) });
    p.push(r, Op::SumEmbedded { src: 0, next: 1, obj: 0 }).push(r, Op::Drop { var: 0, obj: Some(0) });
    p
}

// ---- zipfian keys ----

/// Zipfian ranks over `0..n` by the closed-form method of Gray et al. (as
/// used by YCSB): one uniform draw per sample, no rejection loop.
#[derive(Debug, Clone)]
pub struct Zipf {
    n: u64,
    theta: f64,
    alpha: f64,
    zetan: f64,
    eta: f64,
}

impl Zipf {
    pub fn new(n: u64, theta: f64) -> Result<Self> {
        if n < 2 || !(0.0..1.0).contains(&theta) || theta == 0.0 {
            return Err(Error::Config(format!("zipf needs n >= 2 and 0 < theta < 1, got n={n} theta={theta}")));
        }
        let zeta = |m: u64| (1..=m).map(|i| 1.0 / (i as f64).powf(theta)).sum::<f64>();
        let zetan = zeta(n);
        let zeta2 = zeta(2);
        let eta = (1.0 - (2.0 / n as f64).powf(1.0 - theta)) / (1.0 - zeta2 / zetan);
        Ok(Zipf { n, theta, alpha: 1.0 / (1.0 - theta), zetan, eta })
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> u64 {
        let u: f64 = rng.gen();
        let uz = u * self.zetan;
        if uz < 1.0 {
            return 0;
        }
        if uz < 1.0 + 0.5f64.powf(self.theta) {
            return 1;
        }
        let k = (self.n as f64 * (self.eta * u - self.eta + 1.0).powf(self.alpha)) as u64;
        k.min(self.n - 1)
    }
}

// ---- key-value store ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KvOp {
    Get(u32),
    Set(u32, u64),
}

/// The request stream of each client, one client per node.
pub fn kv_requests(p: &KvParams, clients: u16) -> Result<Vec<Vec<KvOp>>> {
    let zipf = Zipf::new(p.keys as u64, p.theta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut out = vec![Vec::new(); clients as usize];
    for i in 0..p.ops {
        let c = (i % clients as u32) as usize;
        let key = zipf.sample(&mut rng) as u32;
        let op = if rng.gen_range(0..100) < p.read_pct { KvOp::Get(key) } else { KvOp::Set(key, ((c as u64) << 32) | (i as u64 + 1)) };
        out[c].push(op);
    }
    Ok(out)
}

fn words_per_shard(p: &KvParams) -> u32 {
    p.keys.div_ceil(p.shards)
}

fn shard_of(p: &KvParams, key: u32) -> (u32, u32) {
    (key % p.shards, key / p.shards)
}

fn kv_initial(p: &KvParams) -> Vec<Vec<u64>> {
    let w = words_per_shard(p);
    (0..p.shards).map(|s| (0..w).map(|i| (i * p.shards + s) as u64 * 3 + 1).collect()).collect()
}

/// Shards are objects spread over the nodes, each behind its own mutex.
/// Routine 0 sets up, starts one client per node, then reads back every
/// shard under its lock.
pub fn kv_program(p: &KvParams, nodes: u16) -> Result<ProtoProgram> {
    if p.shards == 0 || p.keys == 0 {
        return Err(Error::Config("kvstore needs keys and shards".into()));
    }
    let reqs = kv_requests(p, nodes)?;
    let s = p.shards;
    let mut prog = ProtoProgram::new(format!("kvstore-{}", p.ops), nodes);
    let init = kv_initial(p);
    for sh in 0..s {
        prog.push(0, Op::Alloc { dst: sh, obj: sh, init: init[sh as usize].clone(), on: Some((sh % nodes as u32) as NodeId) })
            .push(0, Op::MutexNew { src: sh, dst: s + sh, obj: sh });
    }
    let mutexes: Vec<u32> = (s..2 * s).collect();
    for (c, ops) in reqs.iter().enumerate() {
        let r = prog.add_routine();
        prog.push(0, Op::Spawn { routine: r, place: Place::Node(c as NodeId), args: mutexes.clone(), dst: 2 * s + c as u32 });
        let guard = s;
        for op in ops {
            let key = match op {
                KvOp::Get(k) | KvOp::Set(k, _) => *k,
            };
            let (sh, word) = shard_of(p, key);
            prog.push(r, Op::Lock { mutex: sh, dst: guard });
            match op {
                KvOp::Get(_) => prog.push(r, Op::GuardRead { guard, word, obj: sh }),
                KvOp::Set(_, v) => prog.push(r, Op::GuardWrite { guard, word, value: *v, obj: sh }),
            };
            prog.push(r, Op::Unlock { guard });
        }
    }
    for c in 0..nodes as u32 {
        prog.push(0, Op::Join { src: 2 * s + c, dst: None });
    }
    let guard = 2 * s + nodes as u32;
    for sh in 0..s {
        prog.push(0, Op::Lock { mutex: s + sh, dst: guard });
        for word in 0..words_per_shard(p) {
            prog.push(0, Op::GuardRead { guard, word, obj: sh });
        }
        prog.push(0, Op::Unlock { guard });
    }
    Ok(prog)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvCheck {
    pub client_ops: u64,
    pub gets_checked: u64,
    pub get_mismatches: Vec<String>,
    /// Store read back at the end, shard by shard.
    pub final_store: Vec<Vec<u64>>,
    /// Store after the sequential replay.
    pub replay_store: Vec<Vec<u64>>,
}

impl KvCheck {
    pub fn passed(&self) -> bool {
        self.get_mismatches.is_empty() && self.final_store == self.replay_store
    }
}

/// Replays the store on one node in the order the mutex hosts granted
/// access, checking every read on the way, and compares the result with
/// the store the cluster ended with.
pub fn kv_replay(p: &KvParams, prog: &ProtoProgram, d: &LogDigest) -> std::result::Result<KvCheck, String> {
    let mut by_op = BTreeMap::new();
    for e in &d.guards {
        if by_op.insert((e.routine, e.pc), e).is_some() {
            return Err(format!("guarded op {}/{} logged twice", e.routine, e.pc));
        }
    }
    let mut mutex_of_shard = BTreeMap::new();
    // (shard, grant, pc, routine, op)
    let mut order = Vec::new();
    for (r, routine) in prog.routines.iter().enumerate() {
        for (pc, op) in routine.ops.iter().enumerate() {
            let shard = match op {
                Op::GuardRead { obj, .. } | Op::GuardWrite { obj, .. } => *obj,
                _ => continue,
            };
            let e = by_op.get(&(r as u32, pc as u32)).ok_or_else(|| format!("guarded op {r}/{pc} never ran"))?;
            if *mutex_of_shard.entry(shard).or_insert(e.mutex) != e.mutex {
                return Err(format!("shard {shard} reached through two mutexes"));
            }
            order.push((shard, e.seq, pc as u32, r as u32, op));
        }
    }
    order.sort_by_key(|x| (x.0, x.1, x.2, x.3));
    let mut store = kv_initial(p);
    let mut final_store: Vec<Vec<u64>> = vec![vec![0; words_per_shard(p) as usize]; p.shards as usize];
    let mut check = KvCheck {
        client_ops: 0,
        gets_checked: 0,
        get_mismatches: Vec::new(),
        final_store: Vec::new(),
        replay_store: Vec::new(),
    };
    for (shard, _, pc, r, op) in order {
        let e = by_op[&(r, pc)];
        match op {
            Op::GuardWrite { word, value, .. } => {
                check.client_ops += 1;
                store[shard as usize][*word as usize] = *value;
            }
            Op::GuardRead { word, .. } => {
                let want = store[shard as usize][*word as usize];
                if e.kind != GuardKind::Read {
                    return Err(format!("op {r}/{pc} logged as a write"));
                }
                if r == 0 {
                    final_store[shard as usize][*word as usize] = e.value;
                } else {
                    check.client_ops += 1;
                    check.gets_checked += 1;
                }
                if e.value != want && check.get_mismatches.len() < 10 {
                    check.get_mismatches.push(format!("routine {r} op {pc}: read {}, replay has {want}", e.value));
                }
            }
            _ => unreachable!(),
        }
    }
    if check.client_ops != p.ops as u64 {
        return Err(format!("{} client ops ran, expected {}", check.client_ops, p.ops));
    }
    check.final_store = final_store;
    check.replay_store = store;
    Ok(check)
}

// ---- reports ----

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeLine {
    pub node: NodeId,
    pub heap_used: u64,
    pub live_objects: usize,
    pub cache_entries: usize,
    pub relocations: u64,
    pub migrations_in: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: impl Into<String>) -> Check {
    Check { name: name.to_string(), passed, detail: detail.into() }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub workload: String,
    pub backend: String,
    pub nodes: u16,
    pub ops: u64,
    pub elapsed_ms: f64,
    pub passed: bool,
    /// Requests and notices sent, by kind, without controller traffic.
    pub messages: BTreeMap<String, u64>,
    /// Controller queries and heartbeats, which depend on timing.
    pub housekeeping: BTreeMap<String, u64>,
    /// Fetch requests (copy or move) issued by the measured reader.
    pub reader_fetches: u64,
    pub checks: Vec<Check>,
    pub node_stats: Vec<NodeLine>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kv: Option<KvCheck>,
}

fn split_counters(c: &Counters) -> (BTreeMap<String, u64>, BTreeMap<String, u64>) {
    let mut data = BTreeMap::new();
    let mut house = BTreeMap::new();
    for k in MessageKind::ALL {
        let n = c.sent_of(k);
        if n == 0 {
            continue;
        }
        let m = if k.is_housekeeping() { &mut house } else { &mut data };
        m.insert(k.name().to_string(), n);
    }
    (data, house)
}

/// Fetches sent while routine `r` ran.
fn fetches_of(d: &LogDigest, r: u32) -> u64 {
    d.op_msgs
        .iter()
        .filter(|((rr, _), _)| *rr == r)
        .map(|(_, k)| k[MessageKind::FetchCopy.code() as usize - 1] + k[MessageKind::MoveFetch.code() as usize - 1])
        .sum()
}

/// Judges a finished run of `w` from its log and counters.
pub fn evaluate(
    w: &Workload,
    prog: &ProtoProgram,
    backend: &str,
    d: &LogDigest,
    counters: &Counters,
    node_stats: Vec<NodeLine>,
    elapsed: Duration,
) -> BenchReport {
    let (messages, housekeeping) = split_counters(counters);
    let mut checks = Vec::new();
    let mut kv = None;
    let mut reader_fetches = 0;
    let routines = prog.routines.len();
    checks.push(check(
        "all tasks finished",
        d.done.len() == routines && d.errors.is_empty(),
        format!("{} of {routines} routines done, errors: {:?}", d.done.len(), d.errors),
    ));
    match w {
        Workload::Accumulator => {
            let v = d.reads.get(&(0, 7)).copied();
            checks.push(check("final value", v == Some(25), format!("{v:?}, expected 25")));
            let fetches = counters.sent_of(MessageKind::FetchCopy) + counters.sent_of(MessageKind::MoveFetch);
            checks.push(check("remote add fetched its operands", fetches >= 1, format!("{fetches} fetches")));
            let wb = counters.sent_of(MessageKind::OwnerWriteBack);
            checks.push(check("one owner write-back", wb == 1, format!("{wb} write-backs")));
            reader_fetches = fetches_of(d, 1);
        }
        Workload::List { n, tied } => {
            let want = *n as u64 * (*n as u64 + 1) / 2;
            let pc = if *tied { 1 } else { 0 };
            let v = d.reads.get(&(1, pc)).copied();
            checks.push(check("list sum", v == Some(want), format!("{v:?}, expected {want}")));
            reader_fetches = fetches_of(d, 1);
            if *tied {
                checks.push(check("one fetch round", reader_fetches == 1, format!("{reader_fetches} fetches")));
            }
        }
        Workload::KvStore(p) => match kv_replay(p, prog, d) {
            Ok(k) => {
                checks.push(check(
                    "reads match the replay",
                    k.get_mismatches.is_empty(),
                    format!("{} reads checked; {}", k.gets_checked, k.get_mismatches.join("; ")),
                ));
                checks.push(check(
                    "final store equals the replay",
                    k.final_store == k.replay_store,
                    format!("{} shards", k.final_store.len()),
                ));
                kv = Some(k);
            }
            Err(e) => checks.push(check("replay", false, e)),
        },
        Workload::Economy => {
            for (name, ok, detail) in suite::check_economy(d) {
                checks.push(check(&name, ok, detail));
            }
        }
    }
    BenchReport {
        workload: w.name(),
        backend: backend.to_string(),
        nodes: node_stats.len() as u16,
        ops: w.ops(),
        elapsed_ms: elapsed.as_secs_f64() * 1e3,
        passed: checks.iter().all(|c| c.passed),
        messages,
        housekeeping,
        reader_fetches,
        checks,
        node_stats,
        kv,
    }
}

fn node_line(s: &NodeSnapshot) -> NodeLine {
    NodeLine {
        node: s.node,
        heap_used: s.heap_used,
        live_objects: s.live_objects,
        cache_entries: s.cache_entries,
        relocations: s.stats.relocations,
        migrations_in: s.stats.migrations_in,
    }
}

/// Runs `w` on an in-process cluster of `nodes`.
pub fn run_loopback(w: &Workload, spec: ClusterSpec) -> Result<BenchReport> {
    let prog = w.program(spec.nodes)?;
    let mut c = Cluster::new(spec, Env::with_program(prog.clone()))?;
    let start = Instant::now();
    c.spawn(prog.root_node, INTERP_FN, Frame::new(0, Vec::new()), Placement::Node(prog.root_node))?;
    c.run(u64::MAX)?;
    let elapsed = start.elapsed();
    let lines = c.core.nodes.iter().map(|n| node_line(&NodeSnapshot::of(n))).collect();
    let mut r = evaluate(w, &prog, "loopback", &c.log.digest(), &c.counters(), lines, elapsed);
    let violations: Vec<String> = c.log.violations.iter().map(|v| v.to_string()).collect();
    r.checks.push(check("no invariant violations", violations.is_empty(), violations.join("; ")));
    r.passed &= violations.is_empty();
    Ok(r)
}

/// Drives `w` from node 0 of a TCP cluster whose other processes were
/// started with the same workload, then collects logs and counters from
/// every node.
pub fn run_tcp(node: &TcpNode, peers: &[Peer], w: &Workload, timeout: Duration) -> Result<BenchReport> {
    if node.me() != 0 {
        return Err(Error::Config("benchmarks are driven from node 0".into()));
    }
    let prog = w.program(peers.len() as u16)?;
    let start = Instant::now();
    let root = prog.root_node;
    let task = node.with_fabric(|f| runtime::spawn(f, INTERP_FN, Frame::new(0, Vec::new()), Placement::Node(root)))?;
    node.wait_result(task, timeout)?;
    let elapsed = start.elapsed();
    let snaps = settle(node, peers, timeout)?;
    let mut d = node.digest();
    for (i, p) in peers.iter().enumerate().skip(1) {
        d.merge(tcp::remote_digest(&p.host, p.control_port).map_err(|e| Error::Config(format!("log of node {i}: {e}")))?);
    }
    let mut counters = Counters::default();
    for s in &snaps {
        counters.merge(&s.counters);
    }
    let lines = snaps.iter().map(node_line).collect();
    Ok(evaluate(w, &prog, "tcp", &d, &counters, lines, elapsed))
}

/// Waits until no task runs anywhere, nothing is in flight and the
/// data-plane counters stop moving; returns the final snapshots.
fn settle(node: &TcpNode, peers: &[Peer], timeout: Duration) -> Result<Vec<NodeSnapshot>> {
    let deadline = Instant::now() + timeout;
    let mut last: Option<Vec<BTreeMap<String, u64>>> = None;
    loop {
        let mut snaps = vec![node.snapshot()];
        for p in peers.iter().skip(1) {
            snaps.push(tcp::remote_snapshot(&p.host, p.control_port)?);
        }
        let idle = snaps.iter().all(|s| s.tasks == 0);
        let data: Vec<_> = snaps.iter().map(|s| split_counters(&s.counters).0).collect();
        let mut total = Counters::default();
        for s in &snaps {
            total.merge(&s.counters);
        }
        let data_in_flight = MessageKind::ALL.iter().filter(|k| !k.is_housekeeping()).any(|k| {
            let i = k.code() as usize - 1;
            total.sent[i] != total.received[i] || total.replies_sent[i] != total.replies_received[i]
        });
        if idle && !data_in_flight && last.as_ref() == Some(&data) {
            return Ok(snaps);
        }
        if Instant::now() > deadline {
            return Err(Error::Task("cluster did not settle".into()));
        }
        last = Some(data);
        std::thread::sleep(Duration::from_millis(100));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zipf_is_skewed_and_in_range() {
        let z = Zipf::new(1000, 0.99).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut hist = vec![0u32; 1000];
        for _ in 0..50_000 {
            hist[z.sample(&mut rng) as usize] += 1;
        }
        assert!(hist[0] > hist[1] && hist[1] > hist[10] && hist[10] > hist[500]);
        // Rank 0 carries 1/zeta(n) of the mass, about 13% here.
        let p0 = hist[0] as f64 / 50_000.0;
        assert!((0.11..0.15).contains(&p0), "{p0}");
    }

    #[test]
    fn requests_are_deterministic() {
        let p = KvParams { ops: 200, ..Default::default() };
        assert_eq!(kv_requests(&p, 4).unwrap(), kv_requests(&p, 4).unwrap());
        let gets = kv_requests(&p, 4).unwrap().iter().flatten().filter(|o| matches!(o, KvOp::Get(_))).count();
        assert!((150..=195).contains(&gets));
    }
}
