//! The program interpreter task body and the execution log it writes.
//!
//! Every op runs as one scheduler quantum. Besides driving the protocol,
//! the interpreter maintains a ghost model of each object (latest words,
//! write count, latest address, live handle counts, vector clocks) and
//! records a violation whenever an access disagrees with it.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::addressing::{GlobalAddr, NodeId};
use crate::error::{Error, Result};
use crate::protocol::handles::{Access, Backing, OwnerHandle, ProjectedHandle, ProjectionOrigin, SharedHandle};
use crate::protocol::ops;
use crate::runtime::sync::{self, ChanRef, MutexRef};
use crate::runtime::task::{FnId, Frame, Step, TaskId, Value, Wait};
use crate::runtime::{self, Placement, TaskCtx};
use crate::transport::{call, unexpected, Body, Fabric};
use crate::verifier::program::{ObjNo, Op, Place, ProtoProgram};
use crate::verifier::{Invariant, Violation};

/// Registry id of the interpreter.
pub const INTERP_FN: FnId = 1;

/// Ghost state of one logical object.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct GhostObj {
    /// Heap identity (origin node, sequence) once known.
    pub tag: Option<(NodeId, u64)>,
    pub words: Vec<u64>,
    /// Completed writes to the primary copy.
    pub version: u64,
    /// Address left by the most recent writer.
    pub latest: Option<GlobalAddr>,
    /// Last address handed out for reading, with the version it showed.
    pub published: Option<(GlobalAddr, u64)>,
    pub live: bool,
    pub shared: u32,
    pub exclusive: u32,
    pub tie_root: Option<ObjNo>,
    pub tie_children: Vec<ObjNo>,
    /// Owners stored inside this object's words.
    pub embedded: BTreeMap<u32, ObjNo>,
    pub owned_by_embedding: bool,
    /// Shared through counted handles; the count word is a separate record.
    pub counted: bool,
    pub last_write: Option<(u32, u32)>,
    pub reads: Vec<(u32, u32)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GuardKind {
    Read,
    Write,
}

/// An access made while holding a mutex, in the host's grant order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GuardEvent {
    pub mutex: MutexRef,
    pub seq: u64,
    pub routine: u32,
    pub pc: u32,
    pub kind: GuardKind,
    pub word: u32,
    pub value: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecLog {
    /// Ghost checks are only meaningful when one log sees every node.
    pub checks: bool,
    /// Observed results keyed by (routine, op index).
    pub reads: BTreeMap<(u32, u32), u64>,
    pub ghost: BTreeMap<ObjNo, GhostObj>,
    pub clocks: BTreeMap<u32, Vec<u32>>,
    pub final_clocks: BTreeMap<u32, Vec<u32>>,
    pub task_routine: BTreeMap<TaskId, u32>,
    pub chan_clocks: BTreeMap<ChanRef, VecDeque<Vec<u32>>>,
    pub mutex_clocks: BTreeMap<MutexRef, Vec<u32>>,
    /// Routine inside each mutex, per the grants seen.
    pub mutex_holders: BTreeMap<MutexRef, u32>,
    pub guard_log: Vec<GuardEvent>,
    pub done: BTreeSet<u32>,
    /// Not part of the fingerprint: the explorer drains these as it goes.
    pub violations: Vec<Violation>,
    pub errors: Vec<String>,
    /// Messages sent by the executing node during each op, by kind.
    pub op_msgs: BTreeMap<(u32, u32), [u64; 14]>,
}

/// The parts of a log that survive a trip between processes: what was
/// observed, guarded accesses and per-op message counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogDigest {
    #[serde(with = "crate::transport::pair_keys")]
    pub reads: BTreeMap<(u32, u32), u64>,
    pub guards: Vec<GuardEvent>,
    #[serde(with = "crate::transport::pair_keys")]
    pub op_msgs: BTreeMap<(u32, u32), [u64; 14]>,
    pub done: BTreeSet<u32>,
    pub errors: Vec<String>,
}

impl LogDigest {
    /// Combines digests from different nodes. Per-op counts add up; each
    /// op runs on one node at a time but may move between ops.
    pub fn merge(&mut self, other: LogDigest) {
        self.reads.extend(other.reads);
        self.guards.extend(other.guards);
        for (k, v) in other.op_msgs {
            let e = self.op_msgs.entry(k).or_insert([0; 14]);
            for i in 0..14 {
                e[i] += v[i];
            }
        }
        self.done.extend(other.done);
        self.errors.extend(other.errors);
    }

    pub fn op_sent(&self, routine: u32, pc: u32, kind: crate::transport::MessageKind) -> u64 {
        self.op_msgs.get(&(routine, pc)).map_or(0, |k| k[kind.code() as usize - 1])
    }
}

impl Default for ExecLog {
    fn default() -> Self {
        ExecLog {
            checks: true,
            reads: BTreeMap::new(),
            ghost: BTreeMap::new(),
            clocks: BTreeMap::new(),
            final_clocks: BTreeMap::new(),
            task_routine: BTreeMap::new(),
            chan_clocks: BTreeMap::new(),
            mutex_clocks: BTreeMap::new(),
            mutex_holders: BTreeMap::new(),
            guard_log: Vec::new(),
            done: BTreeSet::new(),
            violations: Vec::new(),
            errors: Vec::new(),
            op_msgs: BTreeMap::new(),
        }
    }
}

impl ExecLog {
    pub fn unchecked() -> Self {
        ExecLog { checks: false, ..Default::default() }
    }

    pub fn digest(&self) -> LogDigest {
        LogDigest {
            reads: self.reads.clone(),
            guards: self.guard_log.clone(),
            op_msgs: self.op_msgs.clone(),
            done: self.done.clone(),
            errors: self.errors.clone(),
        }
    }

    pub fn fingerprint<H: Hasher>(&self, h: &mut H) {
        self.reads.hash(h);
        self.ghost.hash(h);
        self.clocks.hash(h);
        self.final_clocks.hash(h);
        self.chan_clocks.hash(h);
        self.mutex_clocks.hash(h);
        self.mutex_holders.hash(h);
        self.guard_log.hash(h);
        self.done.hash(h);
    }

    pub fn task_error(&mut self, task: TaskId, e: &Error) {
        self.errors.push(format!("{task}: {e}"));
    }

    pub fn violate(&mut self, invariant: Invariant, detail: String) {
        if self.checks {
            self.violations.push(Violation { invariant, detail });
        }
    }

    /// Messages sent during op `pc` of `routine`, summed over kinds given.
    pub fn op_sent(&self, routine: u32, pc: u32, kind: crate::transport::MessageKind) -> u64 {
        self.op_msgs.get(&(routine, pc)).map_or(0, |k| k[kind.code() as usize - 1])
    }

    fn clock(&mut self, r: u32) -> &mut Vec<u32> {
        self.clocks.entry(r).or_default()
    }

    fn tick(&mut self, r: u32) -> u32 {
        let c = self.clock(r);
        if c.len() <= r as usize {
            c.resize(r as usize + 1, 0);
        }
        c[r as usize] += 1;
        c[r as usize]
    }

    fn join_clock(&mut self, r: u32, other: &[u32]) {
        let c = self.clock(r);
        if c.len() < other.len() {
            c.resize(other.len(), 0);
        }
        for (a, b) in c.iter_mut().zip(other) {
            *a = (*a).max(*b);
        }
    }

    /// Event `ev` (routine, local time) happened before `r`'s present.
    fn hb(&self, ev: (u32, u32), r: u32) -> bool {
        self.clocks.get(&r).and_then(|c| c.get(ev.0 as usize)).is_some_and(|&t| t >= ev.1)
    }

    fn g(&mut self, obj: ObjNo) -> &mut GhostObj {
        self.ghost.entry(obj).or_default()
    }

    fn access(&mut self, obj: ObjNo, r: u32, write: bool) {
        if !self.checks {
            return;
        }
        let now = self.clocks.get(&r).and_then(|c| c.get(r as usize)).copied().unwrap_or(0);
        let gh = self.ghost.get(&obj).cloned().unwrap_or_default();
        if let Some(w) = gh.last_write {
            if !self.hb(w, r) {
                let inv = if write { Invariant::Atomicity } else { Invariant::Swmr };
                self.violate(inv, format!("object {obj}: access by routine {r} races a write by routine {}", w.0));
            }
        }
        if write {
            for &rd in &gh.reads {
                if !self.hb(rd, r) {
                    self.violate(Invariant::Swmr, format!("object {obj}: write by routine {r} races a read by routine {}", rd.0));
                }
            }
            let g = self.g(obj);
            g.last_write = Some((r, now));
            g.reads.clear();
        } else {
            let g = self.g(obj);
            g.reads.retain(|e| e.0 != r);
            g.reads.push((r, now));
        }
    }

    fn publish(&mut self, obj: ObjNo, g: GlobalAddr) {
        let gh = self.g(obj);
        let version = gh.version;
        let prev = gh.published.replace((g, version));
        if let Some((g0, v0)) = prev {
            if g0 == g && v0 != version {
                self.violate(
                    Invariant::AddressChangeOnWrite,
                    format!("object {obj} republished at {g} after modification (version {v0} -> {version})"),
                );
            }
        }
    }

    fn expect_latest(&mut self, obj: ObjNo, g: GlobalAddr) {
        if let Some(latest) = self.ghost.get(&obj).and_then(|o| o.latest) {
            if latest != g {
                self.violate(Invariant::UpdatedVisible, format!("owner of object {obj} holds {g}, last writer left {latest}"));
            }
        }
    }

    fn kill(&mut self, obj: ObjNo) {
        let children = self.g(obj).tie_children.clone();
        let embedded: Vec<ObjNo> = self.g(obj).embedded.values().copied().collect();
        self.g(obj).live = false;
        for c in children.into_iter().chain(embedded) {
            self.kill(c);
        }
    }
}

enum Flow {
    Next,
    Block(Wait),
    Return(Value),
}

fn bad(op: &Op, v: &Value) -> Error {
    Error::Task(format!("{}: variable holds {}", op.name(), v.kind()))
}

fn copyable(v: &Value) -> bool {
    matches!(v, Value::Word(_) | Value::Chan(_) | Value::Mutex(_) | Value::Unit)
}

fn read_word(f: &mut dyn Fabric, base: u64, offset: u64) -> Result<u64> {
    let b = f.node().heap.read_raw(base, offset, 8)?;
    Ok(u64::from_le_bytes(b.try_into().unwrap()))
}

fn write_word(f: &mut dyn Fabric, base: u64, offset: u64, v: u64) -> Result<()> {
    f.node().heap.write_raw(base, offset, &v.to_le_bytes())
}

fn words_to_bytes(words: &[u64]) -> Vec<u8> {
    words.iter().flat_map(|w| w.to_le_bytes()).collect()
}

fn addr_of(f: &mut dyn Fabric, v: &Value) -> Result<GlobalAddr> {
    match v {
        Value::Owner(h) => f.node().owner_addr(h),
        Value::Shared(s) => Ok(s.addr()),
        Value::Exclusive(m) => Ok(m.addr()),
        Value::Counted(c) => Ok(c.inner.addr()),
        Value::Stack(s) => Ok(GlobalAddr::from_base(s.base)),
        v => Err(Error::Task(format!("{} has no address", v.kind()))),
    }
}

/// Writes initial bytes into a freshly allocated object wherever it lives.
fn init_object(f: &mut dyn Fabric, g: GlobalAddr, bytes: Vec<u8>) -> Result<()> {
    let host = f.node().cfg.map.node_of(g)?;
    if host == f.me() {
        return f.node().heap.write_raw(g.base(), 0, &bytes);
    }
    match call(f, host, Body::WriteBytes { base: g.base(), offset: 0, bytes })? {
        Body::Ack => Ok(()),
        b => Err(unexpected(&b)),
    }
}

/// Checks a local copy about to be read against the ghost object.
fn check_copy(log: &mut ExecLog, f: &mut dyn Fabric, obj: ObjNo, l: u64, word: Option<(u32, u64)>) -> Result<()> {
    if !log.checks {
        return Ok(());
    }
    let tag = f.node().heap.tag_of(l)?;
    let gh = log.g(obj).clone();
    if let Some(t) = gh.tag {
        if (tag.origin, tag.seq) != t {
            log.violate(
                Invariant::StaleElimination,
                format!("read of object {obj} reached a copy of another object ({}:{})", tag.origin, tag.seq),
            );
            return Ok(());
        }
        if tag.version < gh.version {
            log.violate(
                Invariant::StaleElimination,
                format!("object {obj} read from a copy at version {} (latest {})", tag.version, gh.version),
            );
            return Ok(());
        }
    }
    if let Some((w, v)) = word {
        let expect = gh.words.get(w as usize).copied().unwrap_or(0);
        if v != expect {
            log.violate(Invariant::DataValue, format!("object {obj} word {w}: read {v}, latest write {expect}"));
        }
    }
    Ok(())
}

fn tied_sum_expected(log: &ExecLog, root: ObjNo) -> u64 {
    let mut sum = 0u64;
    let mut cur = Some(root);
    while let Some(o) = cur {
        let g = log.ghost.get(&o);
        sum = sum.wrapping_add(g.and_then(|g| g.words.first().copied()).unwrap_or(0));
        cur = g.and_then(|g| g.tie_children.first().copied());
    }
    sum
}

fn embedded_sum_expected(log: &ExecLog, root: ObjNo, next: u32) -> u64 {
    let mut sum = 0u64;
    let mut cur = Some(root);
    while let Some(o) = cur {
        let g = log.ghost.get(&o);
        sum = sum.wrapping_add(g.and_then(|g| g.words.first().copied()).unwrap_or(0));
        cur = g.and_then(|g| g.embedded.get(&next).copied());
    }
    sum
}

fn finish(log: &mut ExecLog, r: u32) {
    let c = log.clocks.get(&r).cloned().unwrap_or_default();
    log.final_clocks.insert(r, c);
    log.done.insert(r);
}

/// Runs one op of the routine in `frame`.
pub fn step(ctx: &mut TaskCtx<'_>, frame: &mut Frame) -> Result<Step> {
    let prog = ctx.env.program.clone().ok_or_else(|| Error::Task("no program loaded".into()))?;
    let r = frame.routine;
    let pc = frame.pc;
    ctx.log.task_routine.insert(ctx.task, r);
    let Some(op) = prog.op(r, pc) else {
        finish(ctx.log, r);
        return Ok(Step::Done(Value::Unit));
    };
    ctx.log.tick(r);
    let before = ctx.f.node().counters.sent;
    let res = exec(ctx, frame, &prog, r, pc, op);
    let after = ctx.f.node().counters.sent;
    let slot = ctx.log.op_msgs.entry((r, pc)).or_insert([0; 14]);
    for i in 0..14 {
        slot[i] += after[i] - before[i];
    }
    let flow = match res {
        Ok(flow) => flow,
        Err(e) => {
            ctx.log.errors.push(format!("routine {r} op {pc} ({}): {e}", op.name()));
            ctx.log.violate(Invariant::Runtime, format!("routine {r} op {pc} ({}): {e}", op.name()));
            finish(ctx.log, r);
            return Err(e);
        }
    };
    match flow {
        Flow::Next => {
            frame.pc += 1;
            if frame.pc as usize >= prog.routines[r as usize].ops.len() {
                finish(ctx.log, r);
                Ok(Step::Done(Value::Unit))
            } else {
                Ok(Step::Yield)
            }
        }
        Flow::Block(w) => Ok(Step::Block(w)),
        Flow::Return(v) => {
            frame.pc = prog.routines[r as usize].ops.len() as u32;
            finish(ctx.log, r);
            Ok(Step::Done(v))
        }
    }
}

fn owner_of(op: &Op, v: &Value) -> Result<OwnerHandle> {
    match v {
        Value::Owner(h) => Ok(h.clone()),
        v => Err(bad(op, v)),
    }
}

fn exec(ctx: &mut TaskCtx<'_>, frame: &mut Frame, prog: &ProtoProgram, r: u32, pc: u32, op: &Op) -> Result<Flow> {
    let f: &mut dyn Fabric = &mut *ctx.f;
    let log: &mut ExecLog = &mut *ctx.log;
    match op {
        Op::Alloc { dst, obj, init, on } => {
            let size = 8 * init.len().max(1) as u64;
            let h = match on {
                Some(n) => {
                    let (g, ident) = runtime::alloc_on(f, *n, size)?;
                    f.node().new_slot(g, ident)
                }
                None => runtime::allocate(f, size)?,
            };
            let s = *f.node().slot(&h)?;
            init_object(f, s.g, words_to_bytes(init))?;
            let g = log.g(*obj);
            *g = GhostObj {
                tag: Some(s.ident),
                words: init.clone(),
                version: 1,
                latest: Some(s.g),
                live: true,
                ..Default::default()
            };
            frame.set(*dst, Value::Owner(h));
        }
        Op::TiedAlloc { root, parent, dst, obj, root_obj, parent_obj, init } => {
            let rh = owner_of(op, frame.var(*root))?;
            let path = match parent {
                None => Vec::new(),
                Some(p) => match frame.var(*p) {
                    Value::Tied { handle, .. } => handle.path.clone(),
                    v => return Err(bad(op, v)),
                },
            };
            log.expect_latest(*root_obj, f.node().owner_addr(&rh)?);
            let size = 8 * init.len().max(1) as u64;
            let t = ops::tied_alloc(f, &rh, &path, size)?;
            let rg = f.node().owner_addr(&rh)?;
            log.g(*root_obj).latest = Some(rg);
            let (tag, words, version) = if f.node().is_local(rg)? {
                let child = ops::tied_local(&f.node().heap, rg.base(), &t.path)?;
                f.node().heap.write_raw(child, 0, &words_to_bytes(init))?;
                let tag = f.node().heap.tag_of(child)?;
                (Some((tag.origin, tag.seq)), init.clone(), 1)
            } else {
                (None, vec![0; init.len()], 0)
            };
            *log.g(*obj) = GhostObj { tag, words, version, live: true, tie_root: Some(*root_obj), ..Default::default() };
            log.g(*parent_obj).tie_children.push(*obj);
            frame.set(*dst, Value::Tied { root: *root, handle: t });
        }
        Op::MakeShared { src, dst, obj } => {
            let mut v = frame.var(*src).clone();
            let s = match &mut v {
                Value::Owner(h) => {
                    if log.g(*obj).exclusive > 0 {
                        log.violate(Invariant::Swmr, format!("object {obj} shared by its owner while an exclusive handle is live"));
                    }
                    log.expect_latest(*obj, f.node().owner_addr(h)?);
                    let s = ops::make_shared_from_owner(f, h)?;
                    log.publish(*obj, s.addr());
                    s
                }
                Value::Exclusive(m) => {
                    let s = ops::make_shared_from_exclusive(f, m);
                    log.publish(*obj, s.addr());
                    s
                }
                Value::Shared(s0) => ops::share_shared(s0),
                v => return Err(bad(op, v)),
            };
            frame.set(*src, v);
            log.g(*obj).shared += 1;
            frame.set(*dst, Value::Shared(s));
        }
        Op::MakeExclusive { src, dst, obj } => {
            let h = owner_of(op, frame.var(*src))?;
            if log.g(*obj).shared > 0 {
                log.violate(Invariant::Swmr, format!("exclusive handle to object {obj} while shared handles are live"));
            }
            log.expect_latest(*obj, f.node().owner_addr(&h)?);
            let m = ops::make_exclusive(f, &h)?;
            log.g(*obj).exclusive += 1;
            frame.set(*dst, Value::Exclusive(m));
        }
        Op::Read { src, word, obj } => {
            let l = read_local(f, log, frame, op, *src, *obj)?;
            let val = read_word(f, l, 8 * *word as u64)?;
            check_copy(log, f, *obj, l, Some((*word, val)))?;
            log.access(*obj, r, false);
            log.reads.insert((r, pc), val);
        }
        Op::Write { dst, word, value, obj } => {
            let l = write_local(f, log, frame, op, *dst, *obj)?;
            write_word(f, l, 8 * *word as u64, *value)?;
            ghost_write(log, *obj, *word, *value);
            log.access(*obj, r, true);
        }
        Op::Add { dst, src, dst_obj, src_obj } => {
            let ls = read_local(f, log, frame, op, *src, *src_obj)?;
            let delta = read_word(f, ls, 0)?;
            check_copy(log, f, *src_obj, ls, Some((0, delta)))?;
            log.access(*src_obj, r, false);
            let ld = write_local(f, log, frame, op, *dst, *dst_obj)?;
            let old = read_word(f, ld, 0)?;
            check_copy(log, f, *dst_obj, ld, Some((0, old)))?;
            let new = old.wrapping_add(delta);
            write_word(f, ld, 0, new)?;
            ghost_write(log, *dst_obj, 0, new);
            log.access(*dst_obj, r, true);
            log.reads.insert((r, pc), new);
        }
        Op::Drop { var, obj } => {
            let v = frame.take(*var);
            drop_value(f, log, v, *obj, r)?;
        }
        Op::Spawn { routine, place, args, dst } => {
            let placement = match place {
                Place::Auto => Placement::Auto,
                Place::Node(n) => Placement::Node(*n),
                Place::Near(v) => Placement::Near(addr_of(f, frame.var(*v))?),
            };
            let mut vars = Vec::with_capacity(args.len());
            for &a in args {
                let v = frame.var(a).clone();
                if copyable(&v) {
                    vars.push(v);
                } else {
                    vars.push(frame.take(a));
                }
            }
            let parent = log.clock(r).clone();
            log.clocks.insert(*routine, parent);
            let id = runtime::spawn(f, INTERP_FN, Frame::new(*routine, vars), placement)?;
            log.task_routine.insert(id, *routine);
            frame.set(*dst, Value::Join(id));
        }
        Op::Join { src, dst } => {
            let child = match frame.var(*src) {
                Value::Join(t) => *t,
                v => return Err(bad(op, v)),
            };
            let Some(v) = runtime::try_join(f, child) else {
                return Ok(Flow::Block(Wait::Join(child)));
            };
            frame.set(*src, Value::Unit);
            if let Some(cr) = log.task_routine.get(&child).copied() {
                if let Some(c) = log.final_clocks.get(&cr).cloned() {
                    log.join_clock(r, &c);
                }
            }
            if let Value::Failed(msg) = &v {
                return Err(Error::Task(format!("joined task failed: {msg}")));
            }
            if let Some(d) = dst {
                frame.set(*d, v);
            }
        }
        Op::Return { var } => return Ok(Flow::Return(frame.take(*var))),
        Op::ChanNew { dst } => {
            let ch = sync::channel_new(f)?;
            frame.set(*dst, Value::Chan(ch));
        }
        Op::Send { chan, src } => {
            let ch = match frame.var(*chan) {
                Value::Chan(c) => *c,
                v => return Err(bad(op, v)),
            };
            let v = if copyable(frame.var(*src)) { frame.var(*src).clone() } else { frame.take(*src) };
            let c = log.clock(r).clone();
            log.chan_clocks.entry(ch).or_default().push_back(c);
            sync::channel_send(f, ch, v)?;
        }
        Op::Recv { chan, dst } => {
            let ch = match frame.var(*chan) {
                Value::Chan(c) => *c,
                v => return Err(bad(op, v)),
            };
            if !frame.waiting {
                sync::channel_recv(f, ch)?;
                frame.waiting = true;
            }
            let task = ctx_task(f)?;
            let Some(v) = f.node().tasks.get_mut(&task).and_then(|t| t.mailbox.take()) else {
                return Ok(Flow::Block(Wait::Recv(ch)));
            };
            frame.waiting = false;
            if let Value::Failed(msg) = &v {
                return Err(Error::Task(msg.clone()));
            }
            if let Some(c) = log.chan_clocks.get_mut(&ch).and_then(|q| q.pop_front()) {
                log.join_clock(r, &c);
            }
            frame.set(*dst, v);
        }
        Op::Close { chan } => {
            let ch = match frame.var(*chan) {
                Value::Chan(c) => *c,
                v => return Err(bad(op, v)),
            };
            sync::channel_close(f, ch)?;
        }
        Op::Atomic { src, op: aop, obj } => {
            let g = addr_of(f, frame.var(*src))?;
            let prior = sync::atomic_op(f, g, *aop)?;
            let gh = log.g(*obj);
            let expect = gh.words.first().copied().unwrap_or(0);
            if let Some(new) = aop.apply(expect) {
                if gh.words.is_empty() {
                    gh.words.push(0);
                }
                gh.words[0] = new;
                gh.version += 1;
            }
            if prior != expect {
                log.violate(Invariant::DataValue, format!("atomic on object {obj} saw {prior}, latest {expect}"));
            }
        }
        Op::MutexNew { src, dst, obj } => {
            let h = owner_of(op, frame.var(*src))?;
            log.expect_latest(*obj, f.node().owner_addr(&h)?);
            frame.take(*src);
            let m = sync::mutex_new(f, h)?;
            frame.set(*dst, Value::Mutex(m));
        }
        Op::Lock { mutex, dst } => {
            let mx = match frame.var(*mutex) {
                Value::Mutex(m) => *m,
                v => return Err(bad(op, v)),
            };
            if !frame.waiting {
                sync::mutex_lock(f, mx)?;
                frame.waiting = true;
            }
            let task = ctx_task(f)?;
            let Some(v) = f.node().tasks.get_mut(&task).and_then(|t| t.mailbox.take()) else {
                return Ok(Flow::Block(Wait::Lock(mx)));
            };
            frame.waiting = false;
            if let Some(other) = log.mutex_holders.insert(mx, r) {
                log.violate(Invariant::Atomicity, format!("mutex {}:{} granted to routine {r} while routine {other} holds it", mx.host, mx.id));
            }
            if let Some(c) = log.mutex_clocks.get(&mx).cloned() {
                log.join_clock(r, &c);
            }
            frame.set(*dst, v);
        }
        Op::Unlock { guard } => {
            let v = frame.take(*guard);
            unlock(f, log, v, r)?;
        }
        Op::GuardRead { guard, word, obj } => {
            let g = match frame.var(*guard) {
                Value::Guard(g) => g.clone(),
                v => return Err(bad(op, v)),
            };
            let val = u64::from_le_bytes(sync::guard_read(f, &g, 8 * *word as u64, 8)?.try_into().unwrap());
            let expect = log.g(*obj).words.get(*word as usize).copied().unwrap_or(0);
            if val != expect {
                log.violate(Invariant::DataValue, format!("guarded object {obj} word {word}: read {val}, latest {expect}"));
            }
            log.access(*obj, r, false);
            log.guard_log.push(GuardEvent { mutex: g.mutex, seq: g.seq, routine: r, pc, kind: GuardKind::Read, word: *word, value: val });
        }
        Op::GuardWrite { guard, word, value, obj } => {
            let g = match frame.var(*guard) {
                Value::Guard(g) => g.clone(),
                v => return Err(bad(op, v)),
            };
            sync::guard_write(f, &g, 8 * *word as u64, &value.to_le_bytes())?;
            guard_ghost_write(log, *obj, *word, *value, r);
            log.guard_log.push(GuardEvent { mutex: g.mutex, seq: g.seq, routine: r, pc, kind: GuardKind::Write, word: *word, value: *value });
        }
        Op::GuardAdd { guard, word, delta, obj } => {
            let g = match frame.var(*guard) {
                Value::Guard(g) => g.clone(),
                v => return Err(bad(op, v)),
            };
            let old = u64::from_le_bytes(sync::guard_read(f, &g, 8 * *word as u64, 8)?.try_into().unwrap());
            let expect = log.g(*obj).words.get(*word as usize).copied().unwrap_or(0);
            if old != expect {
                log.violate(Invariant::DataValue, format!("guarded object {obj} word {word}: read {old}, latest {expect}"));
            }
            let new = old.wrapping_add(*delta);
            sync::guard_write(f, &g, 8 * *word as u64, &new.to_le_bytes())?;
            guard_ghost_write(log, *obj, *word, new, r);
            log.guard_log.push(GuardEvent { mutex: g.mutex, seq: g.seq, routine: r, pc, kind: GuardKind::Read, word: *word, value: old });
            log.guard_log.push(GuardEvent { mutex: g.mutex, seq: g.seq, routine: r, pc, kind: GuardKind::Write, word: *word, value: new });
        }
        Op::FetchTieGroup { src, obj } => {
            let mut s = match frame.var(*src) {
                Value::Shared(s) => s.clone(),
                v => return Err(bad(op, v)),
            };
            let l = ops::fetch_tie_group(f, &mut s)?;
            frame.set(*src, Value::Shared(s));
            check_copy(log, f, *obj, l, None)?;
            log.access(*obj, r, false);
        }
        Op::SumTied { src, obj } => {
            let mut s = match frame.var(*src) {
                Value::Shared(s) => s.clone(),
                v => return Err(bad(op, v)),
            };
            let l = ops::shared_deref(f, &mut s)?;
            frame.set(*src, Value::Shared(s));
            check_copy(log, f, *obj, l, None)?;
            let mut sum = 0u64;
            let mut b = Some(l);
            while let Some(base) = b {
                sum = sum.wrapping_add(read_word(f, base, 0)?);
                b = f.node().heap.record(base)?.tie_children.first().copied();
            }
            let expect = tied_sum_expected(log, *obj);
            if log.checks && sum != expect {
                log.violate(Invariant::DataValue, format!("tied sum from object {obj}: {sum}, expected {expect}"));
            }
            log.access(*obj, r, false);
            log.reads.insert((r, pc), sum);
        }
        Op::Embed { parent, word, child, parent_obj, child_obj } => {
            let ph = owner_of(op, frame.var(*parent))?;
            let ch = owner_of(op, frame.var(*child))?;
            let cg = f.node().owner_addr(&ch)?;
            log.expect_latest(*parent_obj, f.node().owner_addr(&ph)?);
            let l = ops::owner_write(f, &ph)?;
            write_word(f, l, 8 * *word as u64, cg.raw())?;
            frame.take(*child);
            f.node().slots.remove(&ch.slot);
            let pg = f.node().owner_addr(&ph)?;
            let p = log.g(*parent_obj);
            if p.words.len() <= *word as usize {
                p.words.resize(*word as usize + 1, 0);
            }
            p.words[*word as usize] = cg.raw();
            p.version += 1;
            p.latest = Some(pg);
            p.embedded.insert(*word, *child_obj);
            log.g(*child_obj).owned_by_embedding = true;
            log.access(*parent_obj, r, true);
        }
        Op::SumEmbedded { src, next, obj } => {
            let mut s = match frame.var(*src) {
                Value::Shared(s) => s.clone(),
                v => return Err(bad(op, v)),
            };
            let l = ops::shared_deref(f, &mut s)?;
            frame.set(*src, Value::Shared(s));
            check_copy(log, f, *obj, l, None)?;
            let mut sum = read_word(f, l, 0)?;
            let mut g = read_word(f, l, 8 * *next as u64)?;
            while g != 0 {
                let mut h = SharedHandle::from_embedded(GlobalAddr(g));
                let lb = ops::shared_deref(f, &mut h)?;
                sum = sum.wrapping_add(read_word(f, lb, 0)?);
                g = read_word(f, lb, 8 * *next as u64)?;
                ops::shared_drop(f, h)?;
            }
            let expect = embedded_sum_expected(log, *obj, *next);
            if log.checks && sum != expect {
                log.violate(Invariant::DataValue, format!("embedded sum from object {obj}: {sum}, expected {expect}"));
            }
            log.access(*obj, r, false);
            log.reads.insert((r, pc), sum);
        }
        Op::ProjAcquire { src, word, words, mode, dst, obj } => {
            let origin = match frame.var(*src) {
                Value::Owner(h) => ProjectionOrigin::Heap { g: f.node().owner_addr(h)?, owner: Some(f.node().slot_ref(h)) },
                Value::Exclusive(m) => ProjectionOrigin::Heap { g: m.addr(), owner: Some(m.owner_slot()) },
                Value::Shared(s) => ProjectionOrigin::Heap { g: s.addr(), owner: None },
                Value::Counted(c) => ProjectionOrigin::Heap { g: c.inner.addr(), owner: None },
                Value::Stack(s) => ProjectionOrigin::Stack { base: s.base },
                v => return Err(bad(op, v)),
            };
            let p = ops::projected_acquire(f, origin, 8 * *word as u64, 8 * *words as u64, *mode)?;
            match mode {
                Access::Exclusive => {
                    if log.g(*obj).shared > 0 {
                        log.violate(Invariant::Swmr, format!("exclusive projection of object {obj} while shared handles are live"));
                    }
                    log.g(*obj).exclusive += 1;
                }
                Access::Shared => log.g(*obj).shared += 1,
            }
            frame.set(*dst, Value::Projected(p));
        }
        Op::ProjRead { proj, word, obj } => {
            let p = match frame.var(*proj) {
                Value::Projected(p) => p.clone(),
                v => return Err(bad(op, v)),
            };
            let (rec, rel) = p.local_range();
            let val = read_word(f, rec, rel + 8 * *word as u64)?;
            let w = (p.offset / 8) as u32 + *word;
            if matches!(p.backing, Backing::Private(_)) {
                let expect = log.g(*obj).words.get(w as usize).copied().unwrap_or(0);
                if log.checks && val != expect {
                    log.violate(Invariant::DataValue, format!("projection of object {obj} word {w}: read {val}, latest {expect}"));
                }
            } else {
                check_copy(log, f, *obj, rec, Some((w, val)))?;
            }
            log.access(*obj, r, false);
            log.reads.insert((r, pc), val);
        }
        Op::ProjWrite { proj, word, value, obj } => {
            let p = match frame.var(*proj) {
                Value::Projected(p) => p.clone(),
                v => return Err(bad(op, v)),
            };
            if p.mode != Access::Exclusive {
                return Err(Error::SwmrViolation("write through a shared projection".into()));
            }
            let (rec, rel) = p.local_range();
            write_word(f, rec, rel + 8 * *word as u64, *value)?;
            let w = (p.offset / 8) as u32 + *word;
            let g = log.g(*obj);
            if g.words.len() <= w as usize {
                g.words.resize(w as usize + 1, 0);
            }
            g.words[w as usize] = *value;
            if p.backing == Backing::Direct {
                g.version += 1;
            }
            log.access(*obj, r, true);
        }
        Op::StackNew { dst, words, obj } => {
            let s = ops::stack_new(f, 8 * (*words).max(1) as u64)?;
            let tag = f.node().heap.tag_of(s.base)?;
            *log.g(*obj) = GhostObj {
                tag: Some((tag.origin, tag.seq)),
                words: vec![0; (*words).max(1) as usize],
                version: 0,
                live: true,
                ..Default::default()
            };
            frame.set(*dst, Value::Stack(s));
        }
        Op::CountedNew { src, dst, obj } => {
            let h = owner_of(op, frame.var(*src))?;
            log.expect_latest(*obj, f.node().owner_addr(&h)?);
            frame.take(*src);
            let c = sync::counted_new(f, h)?;
            log.publish(*obj, c.inner.addr());
            log.g(*obj).shared += 1;
            log.g(*obj).counted = true;
            frame.set(*dst, Value::Counted(c));
        }
        Op::CountedClone { src, dst, obj } => {
            let c = match frame.var(*src) {
                Value::Counted(c) => c.clone(),
                v => return Err(bad(op, v)),
            };
            let c2 = sync::counted_clone(f, &c)?;
            log.g(*obj).shared += 1;
            frame.set(*dst, Value::Counted(c2));
        }
        Op::Yield => {}
    }
    let _ = prog;
    Ok(Flow::Next)
}

/// Local base to read through the handle in `var`.
fn read_local(f: &mut dyn Fabric, log: &mut ExecLog, frame: &mut Frame, op: &Op, var: u32, obj: ObjNo) -> Result<u64> {
    let mut v = frame.var(var).clone();
    let l = match &mut v {
        Value::Owner(h) => {
            let g = f.node().owner_addr(h)?;
            log.expect_latest(obj, g);
            if !f.node().is_local(g)? {
                log.publish(obj, g);
            }
            ops::owner_read(f, h)?
        }
        Value::Shared(s) => ops::shared_deref(f, s)?,
        Value::Exclusive(m) => {
            let l = ops::exclusive_deref(f, m)?;
            log.g(obj).latest = Some(m.addr());
            l
        }
        Value::Counted(c) => sync::counted_deref(f, c)?,
        v => return Err(bad(op, v)),
    };
    frame.set(var, v);
    Ok(l)
}

/// Local base to write through the owner or exclusive handle in `var`.
fn write_local(f: &mut dyn Fabric, log: &mut ExecLog, frame: &mut Frame, op: &Op, var: u32, obj: ObjNo) -> Result<u64> {
    let mut v = frame.var(var).clone();
    let l = match &mut v {
        Value::Owner(h) => {
            log.expect_latest(obj, f.node().owner_addr(h)?);
            let l = ops::owner_write(f, h)?;
            log.g(obj).latest = Some(f.node().owner_addr(h)?);
            l
        }
        Value::Exclusive(m) => {
            let l = ops::exclusive_deref(f, m)?;
            log.g(obj).latest = Some(m.addr());
            l
        }
        v => return Err(bad(op, v)),
    };
    frame.set(var, v);
    Ok(l)
}

fn ghost_write(log: &mut ExecLog, obj: ObjNo, word: u32, value: u64) {
    let g = log.g(obj);
    if g.words.len() <= word as usize {
        g.words.resize(word as usize + 1, 0);
    }
    g.words[word as usize] = value;
    g.version += 1;
}

/// Frees the owners stored inside `obj`, whose bytes are at local `l`.
fn free_embedded(f: &mut dyn Fabric, log: &mut ExecLog, obj: ObjNo, l: u64) -> Result<()> {
    let embedded = log.g(obj).embedded.clone();
    for (word, child) in embedded {
        let g = GlobalAddr(read_word(f, l, 8 * word as u64)?);
        if log.ghost.get(&child).is_some_and(|c| !c.embedded.is_empty()) {
            let mut s = SharedHandle::from_embedded(g);
            let lc = ops::shared_deref(f, &mut s)?;
            free_embedded(f, log, child, lc)?;
            ops::shared_drop(f, s)?;
        }
        ops::free_object(f, g)?;
    }
    Ok(())
}

fn ctx_task(f: &mut dyn Fabric) -> Result<TaskId> {
    f.task().ok_or_else(|| Error::Task("blocking op outside a task".into()))
}

fn guard_ghost_write(log: &mut ExecLog, obj: ObjNo, word: u32, value: u64, r: u32) {
    let g = log.g(obj);
    if g.words.len() <= word as usize {
        g.words.resize(word as usize + 1, 0);
    }
    g.words[word as usize] = value;
    g.version += 1;
    log.access(obj, r, true);
}

fn unlock(f: &mut dyn Fabric, log: &mut ExecLog, v: Value, r: u32) -> Result<()> {
    let Value::Guard(g) = v else {
        return Err(Error::Task(format!("unlock: variable holds {}", v.kind())));
    };
    let c = log.clock(r).clone();
    log.mutex_clocks.insert(g.mutex, c);
    log.mutex_holders.remove(&g.mutex);
    sync::mutex_unlock(f, g.mutex)
}

fn release_projection(f: &mut dyn Fabric, log: &mut ExecLog, p: ProjectedHandle, obj: Option<ObjNo>) -> Result<()> {
    let private = matches!(p.backing, Backing::Private(_));
    let mode = p.mode;
    let owner = match p.origin {
        ProjectionOrigin::Heap { owner, .. } => owner,
        ProjectionOrigin::Stack { .. } => None,
    };
    ops::projected_release(f, p)?;
    if let Some(o) = obj {
        let me = f.me();
        let latest = match owner {
            Some(s) if mode == Access::Exclusive && s.node == me => f.node().slots.get(&s.slot).map(|s| s.g),
            _ => None,
        };
        let g = log.g(o);
        match mode {
            Access::Exclusive => {
                g.exclusive = g.exclusive.saturating_sub(1);
                if private {
                    g.version += 1;
                }
                if latest.is_some() {
                    g.latest = latest;
                }
            }
            Access::Shared => g.shared = g.shared.saturating_sub(1),
        }
    }
    Ok(())
}

fn drop_value(f: &mut dyn Fabric, log: &mut ExecLog, v: Value, obj: Option<ObjNo>, r: u32) -> Result<()> {
    match v {
        Value::Owner(h) => {
            if let Some(o) = obj {
                log.expect_latest(o, f.node().owner_addr(&h)?);
                if log.ghost.get(&o).is_some_and(|g| !g.embedded.is_empty()) {
                    let l = ops::owner_read(f, &h)?;
                    free_embedded(f, log, o, l)?;
                }
            }
            ops::owner_drop(f, h)?;
            if let Some(o) = obj {
                log.kill(o);
            }
        }
        Value::Shared(s) => {
            ops::shared_drop(f, s)?;
            if let Some(o) = obj {
                let g = log.g(o);
                g.shared = g.shared.saturating_sub(1);
            }
        }
        Value::Exclusive(m) => {
            ops::exclusive_drop(f, m)?;
            if let Some(o) = obj {
                let g = log.g(o);
                g.exclusive = g.exclusive.saturating_sub(1);
            }
        }
        Value::Counted(c) => {
            let freed = sync::counted_drop(f, c)?;
            if let Some(o) = obj {
                let g = log.g(o);
                g.shared = g.shared.saturating_sub(1);
                if freed {
                    log.kill(o);
                }
            }
        }
        Value::Stack(s) => {
            ops::stack_drop(f, s)?;
            if let Some(o) = obj {
                log.kill(o);
            }
        }
        Value::Projected(p) => release_projection(f, log, p, obj)?,
        v @ Value::Guard(_) => unlock(f, log, v, r)?,
        Value::InTransit(d) => {
            let h = f.node().attach_owner(d);
            ops::owner_drop(f, h)?;
            if let Some(o) = obj {
                log.kill(o);
            }
        }
        _ => {}
    }
    Ok(())
}
