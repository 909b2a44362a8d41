//! Exhaustive schedule enumeration on the loopback cluster.
//!
//! The explorer forks the cluster at every enabled choice (a task step or
//! the delivery of the head of one pair queue). In memoized mode states
//! with equal fingerprints are explored once and the schedule count is
//! the number of paths through the resulting DAG; full mode walks every
//! path and is the reference the memoized mode is tested against.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::runtime::task::Frame;
use crate::runtime::{Env, Placement};
use crate::transport::loopback::{Choice, Cluster, ClusterSpec};
use crate::verifier::interp::INTERP_FN;
use crate::verifier::oracle::{self, Observation};
use crate::verifier::program::ProtoProgram;
use crate::verifier::{Invariant, Violation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bounds {
    pub max_nodes: u16,
    pub max_tasks: usize,
    pub max_ops: usize,
    /// Distinct states explored before giving up.
    pub state_cap: u64,
    /// Longest schedule followed.
    pub depth_cap: usize,
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds { max_nodes: 4, max_tasks: 4, max_ops: 12, state_cap: 1_000_000, depth_cap: 100_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Memoized,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Complete,
    /// The state or depth cap was hit; counts are lower bounds.
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counterexample {
    pub violation: Violation,
    pub schedule: Vec<Choice>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub program: String,
    pub status: Status,
    pub states: u64,
    /// Complete schedules (saturating).
    pub schedules: u128,
    pub terminals: u64,
    /// Schedules whose observed values differ from the oracle.
    pub mismatched_schedules: u128,
    /// Observed values compared against the oracle, summed over schedules.
    pub reads_checked: u128,
    /// Distinct terminal observations.
    pub observations: BTreeSet<Vec<((u32, u32), u64)>>,
    /// Shortest counterexample found per violated invariant.
    pub failures: BTreeMap<Invariant, Counterexample>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.status == Status::Complete
    }

    pub fn violated(&self, inv: Invariant) -> bool {
        self.failures.contains_key(&inv)
    }
}

/// The cluster a program runs on, with routine 0 already spawned.
pub fn cluster_for(prog: &ProtoProgram, spec: ClusterSpec) -> Result<Cluster> {
    let mut c = Cluster::new(spec, Env::with_program(prog.clone()))?;
    c.heartbeat_every = None;
    c.core.count_bytes = false;
    let root = prog.root_node;
    c.spawn(root, INTERP_FN, Frame::new(0, Vec::new()), Placement::Node(root))?;
    Ok(c)
}

pub fn check_bounds(prog: &ProtoProgram, nodes: u16, b: &Bounds) -> Result<()> {
    if nodes > b.max_nodes || prog.nodes > nodes {
        return Err(Error::Config(format!("program needs {} nodes, cluster has {nodes}, bound {}", prog.nodes, b.max_nodes)));
    }
    if prog.routines.len() > b.max_tasks {
        return Err(Error::Config(format!("{} tasks exceed the bound of {}", prog.routines.len(), b.max_tasks)));
    }
    if prog.max_ops_per_routine() > b.max_ops {
        return Err(Error::Config(format!(
            "{} ops in one task exceed the bound of {}",
            prog.max_ops_per_routine(),
            b.max_ops
        )));
    }
    Ok(())
}

/// Enumerates every schedule of `prog` and checks each against the
/// sequential oracle and the invariants. Programs outside the bounds are
/// rejected rather than truncated.
pub fn enumerate(prog: &ProtoProgram, spec: ClusterSpec, bounds: &Bounds, mode: Mode) -> Result<Report> {
    check_bounds(prog, spec.nodes, bounds)?;
    let oracle = oracle::sequential_oracle(prog).map_err(|e| Error::Config(format!("ill-formed program: {e}")))?;
    let conforming = oracle.conforming();
    let cluster = cluster_for(prog, spec)?;
    let mut ex = Explorer::new(prog.name.clone(), bounds, mode);
    ex.oracle = conforming.then_some(oracle);
    ex.routines = prog.routines.len();
    Ok(ex.run(cluster))
}

/// Enumerates the schedules of an already prepared cluster without an
/// oracle. Used for hand-built setups.
pub fn enumerate_cluster(name: &str, cluster: Cluster, bounds: &Bounds, mode: Mode) -> Report {
    Explorer::new(name.to_string(), bounds, mode).run(cluster)
}

#[derive(Debug, Clone, Copy, Default)]
struct Paths {
    schedules: u128,
    mismatched: u128,
    reads: u128,
}

impl Paths {
    fn add(&mut self, o: Paths) {
        self.schedules = self.schedules.saturating_add(o.schedules);
        self.mismatched = self.mismatched.saturating_add(o.mismatched);
        self.reads = self.reads.saturating_add(o.reads);
    }
}

struct Explorer {
    report: Report,
    bounds: Bounds,
    mode: Mode,
    oracle: Option<Observation>,
    routines: usize,
    memo: HashMap<u64, Paths>,
}

impl Explorer {
    fn new(program: String, bounds: &Bounds, mode: Mode) -> Self {
        Explorer {
            report: Report {
                program,
                status: Status::Complete,
                states: 0,
                schedules: 0,
                terminals: 0,
                mismatched_schedules: 0,
                reads_checked: 0,
                observations: BTreeSet::new(),
                failures: BTreeMap::new(),
            },
            bounds: *bounds,
            mode,
            oracle: None,
            routines: 0,
            memo: HashMap::new(),
        }
    }

    fn run(mut self, mut cluster: Cluster) -> Report {
        let v: Vec<Violation> = cluster.log.violations.drain(..).collect();
        for x in v {
            self.fail(x, &[]);
        }
        let mut path = Vec::new();
        let p = self.dfs(cluster, &mut path);
        self.report.schedules = p.schedules;
        self.report.mismatched_schedules = p.mismatched;
        self.report.reads_checked = p.reads;
        self.report
    }

    fn fail(&mut self, v: Violation, path: &[Choice]) {
        let better = match self.report.failures.get(&v.invariant) {
            Some(c) => path.len() < c.schedule.len(),
            None => true,
        };
        if better {
            self.report.failures.insert(v.invariant, Counterexample { violation: v, schedule: path.to_vec() });
        }
    }

    /// Schedule totals below `c`.
    fn dfs(&mut self, c: Cluster, path: &mut Vec<Choice>) -> Paths {
        let key = if self.mode == Mode::Memoized { Some(c.fingerprint()) } else { None };
        if let Some(k) = key {
            if let Some(&r) = self.memo.get(&k) {
                return r;
            }
        }
        if self.report.states >= self.bounds.state_cap || path.len() >= self.bounds.depth_cap {
            self.report.status = Status::Exhausted;
            return Paths::default();
        }
        self.report.states += 1;
        let choices = c.choices();
        let result = if choices.is_empty() {
            let (bad, reads) = self.terminal(&c, path);
            Paths { schedules: 1, mismatched: bad as u128, reads }
        } else {
            let mut total = Paths::default();
            let last = choices.len() - 1;
            let mut base = Some(c);
            for (i, ch) in choices.into_iter().enumerate() {
                let mut next = if i == last { base.take().unwrap() } else { base.as_ref().unwrap().clone() };
                path.push(ch);
                let applied = next.apply(ch);
                let v: Vec<Violation> = next.log.violations.drain(..).collect();
                for x in v {
                    self.fail(x, path);
                }
                let r = match applied {
                    Ok(_) => self.dfs(next, path),
                    Err(e) => {
                        self.fail(Violation { invariant: Invariant::Runtime, detail: format!("step `{ch}` failed: {e}") }, path);
                        Paths { schedules: 1, ..Paths::default() }
                    }
                };
                path.pop();
                total.add(r);
            }
            total
        };
        if let Some(k) = key {
            self.memo.insert(k, result);
        }
        result
    }

    /// Checks a quiescent state. Returns whether the observed values
    /// differ from the oracle, and how many were compared.
    fn terminal(&mut self, c: &Cluster, path: &[Choice]) -> (bool, u128) {
        self.report.terminals += 1;
        self.report.observations.insert(c.log.reads.iter().map(|(k, v)| (*k, *v)).collect());
        let mut found = Vec::new();
        let stuck: usize = c.core.nodes.iter().map(|n| n.tasks.len()).sum();
        if stuck > 0 {
            found.push(Violation { invariant: Invariant::Runtime, detail: format!("{stuck} tasks blocked at quiescence") });
        }
        if self.routines > 0 && c.log.done.len() < self.routines && c.log.errors.is_empty() && stuck == 0 {
            found.push(Violation {
                invariant: Invariant::Runtime,
                detail: format!("{} of {} routines finished", c.log.done.len(), self.routines),
            });
        }
        if let Err(e) = c.audit() {
            found.push(Violation { invariant: Invariant::Runtime, detail: format!("audit: {e}") });
        }
        if c.log.checks {
            found.extend(leak_check(c));
        }
        let mut mismatch = false;
        let mut reads = 0;
        if let Some(o) = &self.oracle {
            reads = o.reads.len() as u128;
            for (k, want) in &o.reads {
                let got = c.log.reads.get(k);
                if got != Some(want) {
                    mismatch = true;
                    found.push(Violation {
                        invariant: Invariant::DataValue,
                        detail: format!("routine {} op {}: observed {got:?}, oracle {want}", k.0, k.1),
                    });
                }
            }
        }
        for v in found {
            self.fail(v, path);
        }
        (mismatch, reads)
    }
}

/// Live heap records must be exactly the objects that still have owners,
/// plus cache copies and counted-handle count words; no cache entry may
/// still be referenced.
pub fn leak_check(c: &Cluster) -> Vec<Violation> {
    let mut out = Vec::new();
    let records: usize = c.core.nodes.iter().map(|n| n.heap.live_count()).sum();
    let copies: usize = c.core.nodes.iter().map(|n| n.cache.len() + n.stack_cache.len()).sum();
    let live = c.log.ghost.values().filter(|g| g.live).count();
    let counters = c.log.ghost.values().filter(|g| g.live && g.counted).count();
    if records != live + counters + copies {
        out.push(Violation {
            invariant: Invariant::LeakFreedom,
            detail: format!("{records} live records, expected {live} objects + {counters} counters + {copies} cached copies"),
        });
    }
    for n in &c.core.nodes {
        let held = n.cache.total_count() + n.stack_cache.values().map(|e| e.count as u64).sum::<u64>();
        if held > 0 {
            out.push(Violation {
                invariant: Invariant::LeakFreedom,
                detail: format!("node {} still holds {held} cache references", n.id),
            });
        }
    }
    out
}

/// Runs `prog` once under the default scheduler and returns the cluster.
pub fn run_once(prog: &ProtoProgram, spec: ClusterSpec, max_steps: u64) -> Result<Cluster> {
    let mut c = cluster_for(prog, spec)?;
    c.run(max_steps)?;
    Ok(c)
}
