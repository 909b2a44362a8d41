//! Deterministic in-process cluster.
//!
//! All nodes live in one address space and one thread. A step is either
//! one quantum of one task or the delivery of the oldest one-way message
//! on one (src, dst) pair; the chooser decides which. A request runs to
//! completion inside the step that issues it: earlier traffic on the pair
//! is delivered first, then the responder runs, then anything the
//! responder queued back toward the requester, so per-pair FIFO order
//! holds for requests, replies and notices alike.

use std::collections::{BTreeMap, VecDeque};
use std::hash::{Hash, Hasher};

use log::warn;

use crate::addressing::{ColorBits, NodeId, PartitionMap};
use crate::error::{Error, Result};
use crate::runtime::node::{Faults, NodeConfig, NodeRuntime};
use crate::runtime::task::{FnId, Frame, TaskId, Value};
use crate::runtime::{self, Env, Outcome, Placement};
use crate::transport::wire::HEADER_LEN;
use crate::transport::{Body, Counters, Fabric};
use crate::verifier::interp::ExecLog;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub enum Choice {
    /// Run one quantum of a runnable task.
    Run(NodeId, TaskId),
    /// Deliver the oldest queued message from the first node to the second.
    Deliver(NodeId, NodeId),
}

impl std::fmt::Display for Choice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Choice::Run(n, t) => write!(f, "run {n} {} {}", t.node, t.seq),
            Choice::Deliver(s, d) => write!(f, "deliver {s} {d}"),
        }
    }
}

impl std::str::FromStr for Choice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split_whitespace().collect();
        let num = |i: usize| -> Result<u32> {
            parts.get(i).and_then(|p| p.parse().ok()).ok_or_else(|| Error::Codec(format!("bad choice `{s}`")))
        };
        match parts.first() {
            Some(&"run") => Ok(Choice::Run(num(1)? as NodeId, TaskId { node: num(2)? as NodeId, seq: num(3)? })),
            Some(&"deliver") => Ok(Choice::Deliver(num(1)? as NodeId, num(2)? as NodeId)),
            _ => Err(Error::Codec(format!("bad choice `{s}`"))),
        }
    }
}

/// Cluster shape for the loopback backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClusterSpec {
    pub nodes: u16,
    pub unit: u64,
    pub color_bits: ColorBits,
    pub faults: Faults,
}

impl ClusterSpec {
    pub fn new(nodes: u16, unit: u64) -> Self {
        ClusterSpec { nodes, unit, color_bits: ColorBits::DEFAULT, faults: Faults::default() }
    }

    pub fn node_config(&self) -> Result<NodeConfig> {
        let map = PartitionMap::new(self.nodes, self.unit)?;
        let mut cfg = NodeConfig::new(map);
        cfg.color_bits = self.color_bits;
        cfg.faults = self.faults;
        Ok(cfg)
    }
}

/// Node states plus in-flight one-way messages.
#[derive(Debug, Clone)]
pub struct ClusterCore {
    pub nodes: Vec<NodeRuntime>,
    pub queues: BTreeMap<(NodeId, NodeId), VecDeque<Body>>,
    /// Byte accounting serializes every payload; the explorer turns it off.
    pub count_bytes: bool,
}

impl ClusterCore {
    fn size_of(&self, body: &Body) -> u64 {
        if self.count_bytes {
            HEADER_LEN as u64 + body.encoded_len()
        } else {
            0
        }
    }

    fn enqueue(&mut self, src: NodeId, dst: NodeId, body: Body) {
        let len = self.size_of(&body);
        self.nodes[src as usize].counters.on_send(body.kind(), false, src, dst, len);
        self.queues.entry((src, dst)).or_default().push_back(body);
    }

    fn enqueue_outbox(&mut self, from: NodeId, outbox: Vec<(NodeId, Body)>) {
        for (to, body) in outbox {
            if to == from {
                let h = self.nodes[from as usize].handle(from, body);
                self.enqueue_outbox(from, h.outbox);
            } else {
                self.enqueue(from, to, body);
            }
        }
    }

    /// Delivers the head of the (src, dst) queue. Returns false if empty.
    pub fn deliver_one(&mut self, src: NodeId, dst: NodeId) -> bool {
        let Some(body) = self.queues.get_mut(&(src, dst)).and_then(|q| q.pop_front()) else {
            return false;
        };
        if self.queues.get(&(src, dst)).is_some_and(|q| q.is_empty()) {
            self.queues.remove(&(src, dst));
        }
        self.nodes[dst as usize].counters.on_receive(body.kind(), false);
        if let Body::Invalidate { bases } = &body {
            for &b in bases {
                self.nodes[src as usize].heap.notice_delivered(b);
            }
        }
        let h = self.nodes[dst as usize].handle(src, body);
        if let Some(Body::Fail(e)) = &h.reply {
            warn!("one-way message {src}->{dst} failed: {e}");
        }
        self.enqueue_outbox(dst, h.outbox);
        true
    }

    fn drain(&mut self, src: NodeId, dst: NodeId) {
        while self.deliver_one(src, dst) {}
    }

    pub fn pending(&self) -> usize {
        self.queues.values().map(|q| q.len()).sum()
    }

    pub fn fingerprint<H: Hasher>(&self, h: &mut H) {
        for n in &self.nodes {
            n.fingerprint(h);
        }
        self.queues.hash(h);
    }
}

/// [`Fabric`] view of one node inside a [`ClusterCore`].
pub struct LoopFabric<'a> {
    core: &'a mut ClusterCore,
    me: NodeId,
    task: Option<TaskId>,
}

impl<'a> LoopFabric<'a> {
    pub fn new(core: &'a mut ClusterCore, me: NodeId, task: Option<TaskId>) -> Self {
        LoopFabric { core, me, task }
    }
}

impl Fabric for LoopFabric<'_> {
    fn me(&self) -> NodeId {
        self.me
    }

    fn node(&mut self) -> &mut NodeRuntime {
        &mut self.core.nodes[self.me as usize]
    }

    fn request(&mut self, dst: NodeId, body: Body) -> Result<Body> {
        let me = self.me;
        if dst as usize >= self.core.nodes.len() {
            return Err(Error::UnknownNode(dst));
        }
        self.core.drain(me, dst);
        let kind = body.kind();
        let len = self.core.size_of(&body);
        self.core.nodes[me as usize].counters.on_send(kind, false, me, dst, len);
        self.core.nodes[dst as usize].counters.on_receive(kind, false);
        let h = self.core.nodes[dst as usize].handle(me, body);
        let reply = h.reply.unwrap_or(Body::Ack);
        let rlen = self.core.size_of(&reply);
        self.core.nodes[dst as usize].counters.on_send(kind, true, dst, me, rlen);
        self.core.nodes[me as usize].counters.on_receive(kind, true);
        self.core.enqueue_outbox(dst, h.outbox);
        self.core.drain(dst, me);
        Ok(reply)
    }

    fn send(&mut self, dst: NodeId, body: Body) -> Result<()> {
        if dst as usize >= self.core.nodes.len() {
            return Err(Error::UnknownNode(dst));
        }
        self.core.enqueue(self.me, dst, body);
        Ok(())
    }

    fn task(&self) -> Option<TaskId> {
        self.task
    }

    fn node_count(&self) -> u16 {
        self.core.nodes.len() as u16
    }
}

pub type Chooser = Box<dyn FnMut(&[Choice]) -> usize>;

/// The loopback cluster: nodes, queues, task environment and scheduler.
pub struct Cluster {
    pub core: ClusterCore,
    pub env: Env,
    pub log: ExecLog,
    chooser: Option<Chooser>,
    /// Scheduler quanta executed so far.
    pub quanta: u64,
    /// Heartbeat and rebalance period in quanta; `None` disables both.
    pub heartbeat_every: Option<u64>,
    /// Record of every choice applied, replayable as a schedule.
    pub trace: Vec<Choice>,
    pub record_trace: bool,
    rr: usize,
}

impl Clone for Cluster {
    /// The chooser is not cloned.
    fn clone(&self) -> Self {
        Cluster {
            core: self.core.clone(),
            env: self.env.clone(),
            log: self.log.clone(),
            chooser: None,
            quanta: self.quanta,
            heartbeat_every: self.heartbeat_every,
            trace: self.trace.clone(),
            record_trace: self.record_trace,
            rr: self.rr,
        }
    }
}

impl Cluster {
    pub fn new(spec: ClusterSpec, env: Env) -> Result<Self> {
        let cfg = spec.node_config()?;
        let nodes = (0..spec.nodes).map(|i| NodeRuntime::new(i, cfg)).collect();
        Ok(Cluster {
            core: ClusterCore { nodes, queues: BTreeMap::new(), count_bytes: true },
            env,
            log: ExecLog::default(),
            chooser: None,
            quanta: 0,
            heartbeat_every: Some(10),
            trace: Vec::new(),
            record_trace: false,
            rr: 0,
        })
    }

    pub fn node_count(&self) -> u16 {
        self.core.nodes.len() as u16
    }

    pub fn node(&self, n: NodeId) -> &NodeRuntime {
        &self.core.nodes[n as usize]
    }

    pub fn node_mut(&mut self, n: NodeId) -> &mut NodeRuntime {
        &mut self.core.nodes[n as usize]
    }

    pub fn set_chooser(&mut self, chooser: Chooser) {
        self.chooser = Some(chooser);
    }

    pub fn clear_chooser(&mut self) {
        self.chooser = None;
    }

    /// Runs `body` as driver code on node `n`, outside any task.
    pub fn with_node<R>(&mut self, n: NodeId, body: impl FnOnce(&mut dyn Fabric) -> R) -> R {
        let mut f = LoopFabric::new(&mut self.core, n, None);
        body(&mut f)
    }

    /// Every enabled choice, in a canonical order.
    pub fn choices(&self) -> Vec<Choice> {
        let mut out = Vec::new();
        for (&(s, d), q) in &self.core.queues {
            if !q.is_empty() {
                out.push(Choice::Deliver(s, d));
            }
        }
        for n in &self.core.nodes {
            let mut ts: Vec<TaskId> = n.run_queue.iter().copied().collect();
            ts.sort();
            ts.dedup();
            out.extend(ts.into_iter().map(|t| Choice::Run(n.id, t)));
        }
        out
    }

    /// Applies one choice. Returns the task outcome for `Run` choices.
    pub fn apply(&mut self, c: Choice) -> Result<Option<Outcome>> {
        if self.record_trace {
            self.trace.push(c);
        }
        match c {
            Choice::Deliver(s, d) => {
                if !self.core.deliver_one(s, d) {
                    return Err(Error::Config(format!("no message queued on {s}->{d}")));
                }
                Ok(None)
            }
            Choice::Run(n, t) => {
                self.quanta += 1;
                let mut f = LoopFabric::new(&mut self.core, n, Some(t));
                let out = runtime::run_step(&mut f, &self.env, &mut self.log, t)?;
                if let Some(p) = self.heartbeat_every {
                    if p > 0 && self.quanta.is_multiple_of(p) {
                        self.heartbeat_round()?;
                    }
                }
                Ok(Some(out))
            }
        }
    }

    /// Every node reports to the controller, then the controller rebalances.
    pub fn heartbeat_round(&mut self) -> Result<()> {
        for n in 0..self.node_count() {
            self.with_node(n, runtime::heartbeat)?;
        }
        self.core.drain_all_to(0);
        self.with_node(0, runtime::rebalance)?;
        Ok(())
    }

    fn default_pick(&mut self, choices: &[Choice]) -> usize {
        // Messages first, then tasks round-robin.
        if let Some(i) = choices.iter().position(|c| matches!(c, Choice::Deliver(..))) {
            return i;
        }
        self.rr = self.rr.wrapping_add(1);
        self.rr % choices.len()
    }

    /// Runs until nothing is enabled or `max_steps` choices were applied.
    /// Returns the number of choices applied.
    pub fn run(&mut self, max_steps: u64) -> Result<u64> {
        let mut steps = 0;
        loop {
            let cs = self.choices();
            if cs.is_empty() {
                return Ok(steps);
            }
            if steps >= max_steps {
                return Err(Error::Config(format!("no quiescence after {max_steps} steps")));
            }
            let i = match self.chooser.as_mut() {
                Some(ch) => ch(&cs),
                None => self.default_pick(&cs),
            };
            let c = *cs.get(i).ok_or_else(|| Error::Config(format!("chooser picked {i} of {}", cs.len())))?;
            self.apply(c)?;
            steps += 1;
        }
    }

    /// Applies a recorded schedule verbatim.
    pub fn replay(&mut self, schedule: &[Choice]) -> Result<()> {
        for &c in schedule {
            if !self.choices().contains(&c) {
                return Err(Error::Config(format!("schedule choice `{c}` is not enabled")));
            }
            self.apply(c)?;
        }
        Ok(())
    }

    /// Spawns a root task from driver code on `from`.
    pub fn spawn(&mut self, from: NodeId, func: FnId, frame: Frame, placement: Placement) -> Result<TaskId> {
        self.with_node(from, |f| runtime::spawn(f, func, frame, placement))
    }

    /// Result of a finished root task spawned from `from`.
    pub fn take_result(&mut self, from: NodeId, task: TaskId) -> Option<Value> {
        self.core.nodes[from as usize].join_results.remove(&task)
    }

    pub fn counters(&self) -> Counters {
        let mut c = Counters::default();
        for n in &self.core.nodes {
            c.merge(&n.counters);
        }
        c
    }

    /// Structural checks on every node plus message conservation.
    pub fn audit(&self) -> Result<()> {
        for n in &self.core.nodes {
            n.heap.audit()?;
            n.cache.audit()?;
        }
        if self.core.pending() == 0 {
            let c = self.counters();
            if c.total_sent() != c.total_received() {
                return Err(Error::Config(format!(
                    "message conservation: {} sent, {} received",
                    c.total_sent(),
                    c.total_received()
                )));
            }
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.core.fingerprint(&mut h);
        self.log.fingerprint(&mut h);
        h.finish()
    }
}

impl ClusterCore {
    fn drain_all_to(&mut self, dst: NodeId) {
        let srcs: Vec<NodeId> = self.queues.keys().filter(|(_, d)| *d == dst).map(|(s, _)| *s).collect();
        for s in srcs {
            self.drain(s, dst);
        }
    }
}
