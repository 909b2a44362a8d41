//! Per-node runtime state and the node's message responder.
//!
//! `handle` never sends anything itself: it mutates local state and
//! returns the reply plus any follow-up messages, which the transport
//! delivers. That keeps the responder free of application tasks.

use std::collections::{BTreeMap, VecDeque};
use std::hash::{Hash, Hasher};

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::addressing::{ColorBits, ExtWord, GlobalAddr, NodeId, PartitionMap};
use crate::cache::{CacheEntry, CacheMap};
use crate::error::{Error, Result};
use crate::heap::HeapPartition;
use crate::protocol::handles::{DetachedOwner, ObjId, OwnerHandle, OwnerSlot, SlotRef};
use crate::runtime::controller::{Answer, Controller, NodeReport, Query, TaskSummary};
use crate::runtime::sync::{ChanMsg, ChanState, Guard, MutexMsg, MutexRef, MutexState};
use crate::runtime::task::{TaskDescriptor, TaskId, TaskRecord, TaskState, Value, Wait};
use crate::transport::{Body, Counters};

/// Deliberate protocol bugs, used to show that the verifier notices them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Faults {
    pub skip_write_back: bool,
    pub strip_color_key: bool,
    pub skip_u_reset: bool,
    pub skip_transfer_evict: bool,
    pub skip_invalidate: bool,
}

impl Faults {
    pub const NAMES: [&'static str; 5] =
        ["skip-write-back", "strip-color-key", "skip-u-reset", "skip-transfer-evict", "skip-invalidate"];

    pub fn by_name(name: &str) -> Option<Faults> {
        let mut f = Faults::default();
        match name {
            "skip-write-back" => f.skip_write_back = true,
            "strip-color-key" => f.strip_color_key = true,
            "skip-u-reset" => f.skip_u_reset = true,
            "skip-transfer-evict" => f.skip_transfer_evict = true,
            "skip-invalidate" => f.skip_invalidate = true,
            _ => return None,
        }
        Some(f)
    }

    pub fn any(&self) -> bool {
        *self != Faults::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeConfig {
    pub map: PartitionMap,
    pub color_bits: ColorBits,
    pub faults: Faults,
    /// Local allocations stop above this heap usage (percent).
    pub pressure_pct: u32,
    /// The cache is swept above this heap usage (percent).
    pub sweep_pct: u32,
    pub cores: u32,
}

impl NodeConfig {
    pub fn new(map: PartitionMap) -> Self {
        NodeConfig { map, color_bits: ColorBits::DEFAULT, faults: Faults::default(), pressure_pct: 90, sweep_pct: 85, cores: 4 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeStats {
    pub local_allocs: u64,
    pub remote_allocs: u64,
    pub sweeps: u64,
    pub swept_entries: u64,
    pub relocations: u64,
    pub migrations_in: u64,
    pub migrations_out: u64,
    pub migration_refusals: u64,
    pub tasks_done: u64,
    pub steps: u64,
    pub stale_deallocs: u64,
}

/// What the responder produced for one incoming message.
#[derive(Debug, Default)]
pub struct Handled {
    pub reply: Option<Body>,
    pub outbox: Vec<(NodeId, Body)>,
}

impl Handled {
    fn reply(b: Body) -> Self {
        Handled { reply: Some(b), outbox: Vec::new() }
    }

    fn result(r: Result<Body>) -> Self {
        Self::reply(r.unwrap_or_else(Body::Fail))
    }
}

#[derive(Debug, Clone)]
pub struct NodeRuntime {
    pub id: NodeId,
    pub cfg: NodeConfig,
    pub heap: HeapPartition,
    pub cache: CacheMap,
    /// Owner address fields, addressed by exclusive handles' `o` word.
    pub slots: BTreeMap<u64, OwnerSlot>,
    next_slot: u64,
    /// Cached copies of remote stack values, keyed by the stack base.
    pub stack_cache: BTreeMap<u64, CacheEntry>,
    /// Live exclusive projections on this node: (record base, offset, len).
    pub projections: std::collections::BTreeSet<(u64, u64, u64)>,
    pub tasks: BTreeMap<TaskId, TaskRecord>,
    pub run_queue: VecDeque<TaskId>,
    /// Task whose step is executing right now.
    pub running: Option<TaskId>,
    next_task: u32,
    /// Completed children's results, waiting to be joined.
    pub join_results: BTreeMap<TaskId, Value>,
    pub mutexes: BTreeMap<u32, MutexState>,
    pub channels: BTreeMap<u32, ChanState>,
    next_sync: u32,
    pub controller: Option<Controller>,
    pub counters: Counters,
    pub stats: NodeStats,
}

impl NodeRuntime {
    pub fn new(id: NodeId, cfg: NodeConfig) -> Self {
        let mut cache = CacheMap::new();
        cache.set_keyed_by_base(cfg.faults.strip_color_key);
        NodeRuntime {
            id,
            cfg,
            heap: HeapPartition::new(id, cfg.map.range(id)),
            cache,
            slots: BTreeMap::new(),
            next_slot: 1,
            stack_cache: BTreeMap::new(),
            projections: Default::default(),
            tasks: BTreeMap::new(),
            run_queue: VecDeque::new(),
            running: None,
            next_task: 1,
            join_results: BTreeMap::new(),
            mutexes: BTreeMap::new(),
            channels: BTreeMap::new(),
            next_sync: 1,
            controller: (id == 0).then(|| Controller::new(cfg.map, cfg.cores)),
            counters: Counters::default(),
            stats: NodeStats::default(),
        }
    }

    /// Hashes everything that can influence future behaviour; counters and
    /// statistics are left out.
    pub fn fingerprint<H: Hasher>(&self, h: &mut H) {
        self.heap.hash(h);
        self.cache.hash(h);
        self.slots.hash(h);
        self.next_slot.hash(h);
        self.stack_cache.hash(h);
        self.projections.hash(h);
        self.tasks.hash(h);
        self.run_queue.hash(h);
        self.next_task.hash(h);
        self.join_results.hash(h);
        self.mutexes.hash(h);
        self.channels.hash(h);
        self.next_sync.hash(h);
    }

    pub fn bits(&self) -> ColorBits {
        self.cfg.color_bits
    }

    pub fn is_local(&self, g: GlobalAddr) -> Result<bool> {
        self.cfg.map.is_local(g, self.id)
    }

    // ---- owner slots ----

    pub fn new_slot(&mut self, g: GlobalAddr, ident: ObjId) -> OwnerHandle {
        self.insert_slot(OwnerSlot { g, ext: ExtWord::NULL, lent_exclusive: false, ident })
    }

    fn insert_slot(&mut self, s: OwnerSlot) -> OwnerHandle {
        let id = self.next_slot;
        self.next_slot += 1;
        self.slots.insert(id, s);
        OwnerHandle { slot: id }
    }

    pub fn slot(&self, h: &OwnerHandle) -> Result<&OwnerSlot> {
        self.slots.get(&h.slot).ok_or(Error::DeadHandle)
    }

    pub fn slot_mut(&mut self, h: &OwnerHandle) -> Result<&mut OwnerSlot> {
        self.slots.get_mut(&h.slot).ok_or(Error::DeadHandle)
    }

    pub fn slot_ref(&self, h: &OwnerHandle) -> SlotRef {
        SlotRef { node: self.id, slot: h.slot }
    }

    /// Current colored address held by an owner on this node.
    pub fn owner_addr(&self, h: &OwnerHandle) -> Result<GlobalAddr> {
        Ok(self.slot(h)?.g)
    }

    // ---- cached copies ----

    pub fn free_copy(&mut self, local: u64) -> Result<()> {
        self.heap.free_group(local, 0).map(|_| ())
    }

    /// Drops one cache reference to `g`, reclaiming a doomed copy.
    pub fn release_copy(&mut self, g: GlobalAddr) -> Result<()> {
        if let Some(l) = self.cache.release(g)?.free {
            self.free_copy(l)?;
        }
        Ok(())
    }

    pub fn evict_copy(&mut self, g: GlobalAddr) -> Result<()> {
        if let Some(l) = self.cache.evict(g) {
            self.free_copy(l)?;
        }
        Ok(())
    }

    pub fn sweep_cache(&mut self) -> usize {
        let freed = self.cache.sweep_unreferenced();
        for &l in &freed {
            let _ = self.free_copy(l);
        }
        self.stats.sweeps += 1;
        self.stats.swept_entries += freed.len() as u64;
        freed.len()
    }

    /// Sweeps unreferenced copies when usage is above the sweep threshold.
    pub fn relieve_pressure(&mut self, incoming: u64) {
        let cap = self.heap.capacity();
        if (self.heap.used() + incoming) * 100 > cap * self.cfg.sweep_pct as u64 {
            self.sweep_cache();
        }
    }

    pub fn below_pressure(&self, size: u64) -> bool {
        let need = size.div_ceil(crate::heap::ALIGN) * crate::heap::ALIGN;
        (self.heap.used() + need) * 100 <= self.heap.capacity() * self.cfg.pressure_pct as u64
            && self.heap.can_fit(size)
    }

    // ---- ownership transfer ----

    /// Removes an owner from this node for shipping elsewhere: releases the
    /// owner's own cache reference, evicts the now-unreferenced copy and
    /// resets the extension word.
    pub fn detach_owner(&mut self, h: OwnerHandle) -> Result<DetachedOwner> {
        let s = *self.slot(&h)?;
        if s.lent_exclusive {
            return Err(Error::SwmrViolation(format!("transfer of {} while an exclusive handle is live", s.g)));
        }
        self.slots.remove(&h.slot);
        if self.cfg.faults.skip_transfer_evict {
            return Ok(DetachedOwner { g: s.g, ext: s.ext, ident: s.ident });
        }
        if s.ext.payload() != 0 {
            self.release_copy(s.g)?;
        }
        self.evict_copy(s.g)?;
        Ok(DetachedOwner { g: s.g, ext: ExtWord::NULL, ident: s.ident })
    }

    pub fn attach_owner(&mut self, d: DetachedOwner) -> OwnerHandle {
        self.insert_slot(OwnerSlot { g: d.g, ext: d.ext, lent_exclusive: false, ident: d.ident })
    }

    /// Prepares a value for leaving the current task.
    pub fn detach_value(&mut self, v: Value) -> Result<Value> {
        Ok(match v {
            Value::Owner(h) => Value::InTransit(self.detach_owner(h)?),
            Value::Shared(mut r) => {
                if r.l != 0 {
                    self.release_copy(r.g)?;
                    r.l = 0;
                }
                Value::Shared(r)
            }
            Value::Counted(mut c) => {
                if c.inner.l != 0 {
                    self.release_copy(c.inner.g)?;
                    c.inner.l = 0;
                }
                Value::Counted(c)
            }
            v @ (Value::Projected(_) | Value::Guard(_)) => return Err(Error::NotTransferable(v.kind().into())),
            v => v,
        })
    }

    pub fn attach_value(&mut self, v: Value) -> Value {
        match v {
            Value::InTransit(d) => Value::Owner(self.attach_owner(d)),
            v => v,
        }
    }

    // ---- freeing ----

    /// Frees a local object (and its tie group) and returns the
    /// invalidation notices for every other node.
    pub fn free_local(&mut self, base: u64) -> Result<Vec<(NodeId, Body)>> {
        let others = self.cfg.map.node_count() as u32 - 1;
        let skip = self.cfg.faults.skip_invalidate;
        let bases = self.heap.free_group(base, if skip { 0 } else { others })?;
        if skip {
            return Ok(Vec::new());
        }
        Ok(self
            .cfg
            .map
            .nodes()
            .filter(|&n| n != self.id)
            .map(|n| (n, Body::Invalidate { bases: bases.clone() }))
            .collect())
    }

    fn invalidate(&mut self, bases: &[u64]) {
        for &b in bases {
            for l in self.cache.invalidate_base(b) {
                let _ = self.free_copy(l);
            }
        }
    }

    // ---- tasks ----

    pub fn mint_task(&mut self) -> TaskId {
        let t = TaskId { node: self.id, seq: self.next_task };
        self.next_task += 1;
        t
    }

    pub fn note_request(&mut self, task: TaskId, dst: NodeId) {
        if let Some(t) = self.tasks.get_mut(&task) {
            *t.remote_requests.entry(dst).or_default() += 1;
            t.window_requests += 1;
        }
    }

    /// Installs an arriving task; its values are attached here.
    pub fn start_task(&mut self, mut desc: TaskDescriptor) {
        let vars = std::mem::take(&mut desc.frame.vars);
        desc.frame.vars = vars.into_iter().map(|v| self.attach_value(v)).collect();
        let id = desc.id;
        self.tasks.insert(id, TaskRecord::new(desc));
        self.run_queue.push_back(id);
    }

    pub fn wake(&mut self, task: TaskId, mailbox: Option<Value>) {
        match self.tasks.get_mut(&task) {
            Some(t) => {
                if mailbox.is_some() {
                    t.mailbox = mailbox;
                }
                if !t.is_runnable() {
                    t.state = TaskState::Runnable;
                    self.run_queue.push_back(task);
                }
            }
            None => warn!("node {}: wake for unknown task {task}", self.id),
        }
    }

    pub fn runnable_count(&self) -> u32 {
        self.tasks.values().filter(|t| t.is_runnable()).count() as u32
    }

    pub fn report(&self) -> NodeReport {
        let usage = self.heap.usage_by_task();
        NodeReport {
            node: self.id,
            used: self.heap.used(),
            capacity: self.heap.capacity(),
            runnable: self.runnable_count(),
            tasks: self
                .tasks
                .values()
                .map(|t| TaskSummary {
                    id: t.id(),
                    heap_bytes: usage.get(&t.id()).copied().unwrap_or(0),
                    window_requests: t.window_requests,
                    most_accessed: t.most_accessed(),
                    migratable: self.migratable(t.id()).is_ok(),
                })
                .collect(),
        }
    }

    /// Closes the remote-access window after a heartbeat.
    pub fn reset_windows(&mut self) {
        for t in self.tasks.values_mut() {
            t.window_requests = 0;
        }
    }

    pub fn migratable(&self, id: TaskId) -> Result<()> {
        let t = self.tasks.get(&id).ok_or(Error::UnknownTask(id))?;
        let refuse = |why: &str| Err(Error::NotMigratable(id, why.into()));
        if !t.is_runnable() || self.running == Some(id) {
            return Err(Error::TaskNotParked(id));
        }
        if t.outstanding > 0 {
            return refuse("has unjoined children");
        }
        for v in &t.desc.frame.vars {
            match v {
                Value::Owner(h) if self.slot(h).map(|s| s.lent_exclusive).unwrap_or(false) => {
                    return refuse("an owner is lent to an exclusive handle")
                }
                Value::Projected(_) | Value::Guard(_) => return refuse("holds a node-local borrow"),
                _ => {}
            }
        }
        Ok(())
    }

    /// Removes a parked task and detaches its values for shipping.
    pub fn pack_task(&mut self, id: TaskId) -> Result<TaskRecord> {
        self.migratable(id)?;
        let mut rec = self.tasks.remove(&id).unwrap();
        self.run_queue.retain(|t| *t != id);
        let vars = std::mem::take(&mut rec.desc.frame.vars);
        let mut out = Vec::with_capacity(vars.len());
        for v in vars {
            out.push(self.detach_value(v)?);
        }
        rec.desc.frame.vars = out;
        self.stats.migrations_out += 1;
        Ok(rec)
    }

    pub fn unpack_task(&mut self, mut rec: TaskRecord) {
        let vars = std::mem::take(&mut rec.desc.frame.vars);
        rec.desc.frame.vars = vars.into_iter().map(|v| self.attach_value(v)).collect();
        rec.state = TaskState::Runnable;
        let id = rec.id();
        self.tasks.insert(id, rec);
        self.run_queue.push_back(id);
        self.stats.migrations_in += 1;
    }

    fn next_sync_id(&mut self) -> u32 {
        let id = self.next_sync;
        self.next_sync += 1;
        id
    }

    fn guard_for(&self, id: u32, seq: u64) -> Result<Guard> {
        let m = &self.mutexes[&id];
        let s = self.slots.get(&m.slot).ok_or(Error::DeadHandle)?;
        Ok(Guard {
            mutex: MutexRef { host: self.id, id },
            seq,
            slot: SlotRef { node: self.id, slot: m.slot },
            g: s.g,
            ident: s.ident,
        })
    }

    // ---- responder ----

    pub fn handle(&mut self, from: NodeId, body: Body) -> Handled {
        debug!("node {} <- {}: {:?}", self.id, from, body.kind());
        match body {
            Body::Fetch { base } | Body::MoveOut { base } => Handled::result(self.export(base)),
            Body::Dealloc { base } => match self.free_local(base) {
                Ok(outbox) => Handled { reply: None, outbox },
                Err(e) => {
                    warn!("node {}: dealloc of {base:#x} from node {from}: {e}", self.id);
                    self.stats.stale_deallocs += 1;
                    Handled::default()
                }
            },
            Body::WriteBack { slot, g, update } => Handled::result(match self.slots.get_mut(&slot) {
                Some(s) => {
                    if update {
                        s.g = g;
                    }
                    s.lent_exclusive = false;
                    Ok(Body::Ack)
                }
                None => Err(Error::DeadHandle),
            }),
            Body::WriteBytes { base, offset, bytes } => {
                Handled::result(self.heap.write_raw(base, offset, &bytes).map(|_| Body::Ack))
            }
            Body::Invalidate { bases } => {
                self.invalidate(&bases);
                Handled::default()
            }
            Body::Alloc { size, tie, task } => Handled::result(self.alloc_for(size, tie, task)),
            Body::Atomic { base, op } => Handled::result(self.atomic(base, op)),
            Body::Mutex(m) => self.handle_mutex(m),
            Body::Channel(c) => self.handle_channel(c),
            Body::Spawn(desc) => {
                self.start_task(desc);
                Handled::default()
            }
            Body::TaskDone { child, value } => {
                let value = self.attach_value(value);
                self.join_results.insert(child, value);
                let waiting: Vec<TaskId> = self
                    .tasks
                    .values()
                    .filter(|t| t.state == TaskState::Blocked(Wait::Join(child)))
                    .map(|t| t.id())
                    .collect();
                for t in waiting {
                    self.wake(t, None);
                }
                Handled::default()
            }
            Body::MigrateOrder { task, dest } => {
                if dest == self.id {
                    return Handled::default();
                }
                match self.pack_task(task) {
                    Ok(rec) => Handled { reply: None, outbox: vec![(dest, Body::MigrateShip(Box::new(rec)))] },
                    Err(e) => {
                        warn!("node {}: migration of {task} refused: {e}", self.id);
                        self.stats.migration_refusals += 1;
                        Handled::default()
                    }
                }
            }
            Body::MigrateShip(rec) => {
                self.unpack_task(*rec);
                Handled::default()
            }
            Body::Query(q) => Handled::reply(Body::Answer(self.answer(from, q))),
            Body::Heartbeat(report) => {
                if let Some(c) = self.controller.as_mut() {
                    if report.node != self.id {
                        c.heartbeats += 1;
                    }
                    c.observe(report);
                }
                Handled::default()
            }
            other => Handled::reply(Body::Fail(Error::UnexpectedReply(format!("{:?} is not a request", other.kind())))),
        }
    }

    fn export(&self, base: u64) -> Result<Body> {
        if !self.heap.contains(base) {
            let owner = self.cfg.map.node_of_base(base)?;
            return Err(Error::WrongNode { base, owner, node: self.id });
        }
        Ok(Body::Images(self.heap.export_group(base)?))
    }

    pub fn alloc_for(&mut self, size: u64, tie: Option<(u64, Vec<u32>)>, task: Option<TaskId>) -> Result<Body> {
        self.relieve_pressure(size);
        let parent = match &tie {
            Some((root, path)) => Some(crate::protocol::ops::tied_local(&self.heap, *root, path)?),
            None => None,
        };
        let base = self.heap.alloc_tagged(size, None, task)?;
        let mut index = 0;
        if let Some(p) = parent {
            if let Err(e) = self.heap.add_tie_child(p, base) {
                let _ = self.heap.free_raw(base, 0);
                return Err(e);
            }
            index = self.heap.record(p)?.tie_children.len() as u32 - 1;
        }
        self.stats.remote_allocs += 1;
        Ok(Body::Allocated { base, seq: self.heap.tag_of(base)?.seq, index })
    }

    fn atomic(&mut self, base: u64, op: crate::runtime::sync::AtomicOp) -> Result<Body> {
        let bytes = self.heap.read_raw(base, 0, 8)?;
        let prior = u64::from_le_bytes(bytes.try_into().unwrap());
        if let Some(new) = op.apply(prior) {
            self.heap.write_raw(base, 0, &new.to_le_bytes())?;
        }
        Ok(Body::Word(prior))
    }

    fn handle_mutex(&mut self, m: MutexMsg) -> Handled {
        match m {
            MutexMsg::Create { owner } => {
                let h = self.attach_owner(owner);
                let id = self.next_sync_id();
                self.mutexes.insert(id, MutexState { slot: h.slot, holder: None, queue: VecDeque::new(), grants: 0 });
                Handled::reply(Body::Mutex(MutexMsg::Created { id }))
            }
            MutexMsg::Lock { id, task, node } => {
                let Some(m) = self.mutexes.get_mut(&id) else {
                    return Handled::reply(Body::Fail(Error::DeadHandle));
                };
                // Grants always travel as a separate notice, contended or not.
                m.queue.push_back((task, node));
                let mut out = Handled::reply(Body::Mutex(MutexMsg::Queued));
                if let Err(e) = self.grant_next(id, &mut out) {
                    return Handled::reply(Body::Fail(e));
                }
                out
            }
            MutexMsg::Unlock { id, task } => {
                let Some(m) = self.mutexes.get_mut(&id) else {
                    return Handled::reply(Body::Fail(Error::DeadHandle));
                };
                if m.holder != Some(task) {
                    return Handled::reply(Body::Fail(Error::NotMutexHolder(id)));
                }
                m.holder = None;
                let mut out = Handled::reply(Body::Ack);
                if let Err(e) = self.grant_next(id, &mut out) {
                    return Handled::reply(Body::Fail(e));
                }
                out
            }
            MutexMsg::Grant { task, guard } => {
                self.wake(task, Some(Value::Guard(guard)));
                Handled::default()
            }
            other => Handled::reply(Body::Fail(Error::UnexpectedReply(format!("{other:?}")))),
        }
    }

    fn handle_channel(&mut self, c: ChanMsg) -> Handled {
        match c {
            ChanMsg::Create => {
                let id = self.next_sync_id();
                self.channels.insert(id, ChanState::default());
                Handled::reply(Body::Channel(ChanMsg::Created { id }))
            }
            ChanMsg::Send { id, value } => {
                let Some(ch) = self.channels.get_mut(&id) else {
                    return Handled::reply(Body::Fail(Error::ChannelClosed(id)));
                };
                if ch.closed {
                    return Handled::reply(Body::Fail(Error::ChannelClosed(id)));
                }
                ch.queue.push_back(value);
                let mut out = Handled::reply(Body::Ack);
                self.match_channel(id, &mut out);
                out
            }
            ChanMsg::Recv { id, task, node } => {
                let Some(ch) = self.channels.get_mut(&id) else {
                    return Handled::reply(Body::Fail(Error::ChannelClosed(id)));
                };
                // Values always travel as a separate notice, waiting or not.
                ch.waiters.push_back((task, node));
                let mut out = Handled::reply(Body::Channel(ChanMsg::Queued));
                self.match_channel(id, &mut out);
                out
            }
            ChanMsg::Close { id } => {
                let mut out = Handled::reply(Body::Ack);
                if let Some(ch) = self.channels.get_mut(&id) {
                    ch.closed = true;
                    self.match_channel(id, &mut out);
                }
                out
            }
            ChanMsg::Deliver { task, value } => {
                let v = self.attach_value(value);
                self.wake(task, Some(v));
                Handled::default()
            }
            other => Handled::reply(Body::Fail(Error::UnexpectedReply(format!("{other:?}")))),
        }
    }

    fn grant_next(&mut self, id: u32, out: &mut Handled) -> Result<()> {
        let m = self.mutexes.get_mut(&id).ok_or(Error::DeadHandle)?;
        if m.holder.is_some() {
            return Ok(());
        }
        let Some((next, node)) = m.queue.pop_front() else {
            return Ok(());
        };
        m.holder = Some(next);
        m.grants += 1;
        let seq = m.grants;
        let guard = self.guard_for(id, seq)?;
        out.outbox.push((node, Body::Mutex(MutexMsg::Grant { task: next, guard })));
        Ok(())
    }

    fn match_channel(&mut self, id: u32, out: &mut Handled) {
        let Some(ch) = self.channels.get_mut(&id) else { return };
        while !ch.queue.is_empty() && !ch.waiters.is_empty() {
            let value = ch.queue.pop_front().unwrap();
            let (task, node) = ch.waiters.pop_front().unwrap();
            out.outbox.push((node, Body::Channel(ChanMsg::Deliver { task, value })));
        }
        if ch.closed && ch.queue.is_empty() {
            for (task, node) in ch.waiters.drain(..) {
                let value = Value::Failed(Error::ChannelClosed(id).to_string());
                out.outbox.push((node, Body::Channel(ChanMsg::Deliver { task, value })));
            }
        }
    }

    fn answer(&mut self, from: NodeId, q: Query) -> Answer {
        let me = self.report();
        let Some(c) = self.controller.as_mut() else {
            return Answer::NotController;
        };
        c.observe(me);
        match q {
            Query::PlaceAlloc { size } => Answer::Node(c.place_alloc(size, from)),
            Query::PlaceSpawn { task } => Answer::Node(Some(c.place_spawn(task, from))),
            Query::Locate(task) => Answer::Node(c.locations.get(&task).copied()),
            Query::Record { task, node } => {
                c.locations.insert(task, node);
                Answer::Ok
            }
        }
    }
}
