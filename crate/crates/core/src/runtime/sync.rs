//! Distributed synchronization: channels, mutexes, atomics and the
//! shared-count handle. Each primitive is hosted on one node, which
//! serializes every operation on it; clients reach it with messages.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::addressing::{GlobalAddr, NodeId};
use crate::error::{Error, Result};
use crate::protocol::handles::{DetachedOwner, ObjId, SharedHandle, SlotRef};
use crate::protocol::ops;
use crate::runtime::task::{TaskId, Value};
use crate::transport::{call, unexpected, Body, Fabric};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChanRef {
    pub host: NodeId,
    pub id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MutexRef {
    pub host: NodeId,
    pub id: u32,
}

/// Proof of holding a mutex. The guarded object is pinned at the host for
/// the mutex's lifetime, so `g` stays valid while the guard is held.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Guard {
    pub mutex: MutexRef,
    /// Grant sequence number on the host (FIFO order).
    pub seq: u64,
    pub slot: SlotRef,
    pub g: GlobalAddr,
    pub ident: ObjId,
}

/// Reference-counted read-only handle. The count is an 8-byte word on the
/// object's host.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CountedHandle {
    pub counter: GlobalAddr,
    pub inner: SharedHandle,
    pub ident: ObjId,
}

/// A stack value published for borrowing by other tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StackRef {
    pub base: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AtomicOp {
    FetchAdd(u64),
    CompareSwap { expected: u64, new: u64 },
    Load,
}

impl AtomicOp {
    /// New value for `prior`, or `None` when nothing is stored.
    pub fn apply(self, prior: u64) -> Option<u64> {
        match self {
            AtomicOp::FetchAdd(d) => Some(prior.wrapping_add(d)),
            AtomicOp::CompareSwap { expected, new } => (prior == expected).then_some(new),
            AtomicOp::Load => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MutexMsg {
    Create { owner: DetachedOwner },
    Created { id: u32 },
    Lock { id: u32, task: TaskId, node: NodeId },
    Queued,
    Unlock { id: u32, task: TaskId },
    /// Host to waiter: the lock is yours.
    Grant { task: TaskId, guard: Guard },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ChanMsg {
    Create,
    Created { id: u32 },
    Send { id: u32, value: Value },
    Recv { id: u32, task: TaskId, node: NodeId },
    Queued,
    Close { id: u32 },
    /// Host to a parked receiver.
    Deliver { task: TaskId, value: Value },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MutexState {
    /// Owner slot (on the host) of the guarded object.
    pub slot: u64,
    pub holder: Option<TaskId>,
    pub queue: VecDeque<(TaskId, NodeId)>,
    pub grants: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub struct ChanState {
    pub queue: VecDeque<Value>,
    pub waiters: VecDeque<(TaskId, NodeId)>,
    pub closed: bool,
}


// ---- atomics ----

/// Executes `op` on the first word of the object at `g`, on its host.
pub fn atomic_op(f: &mut dyn Fabric, g: GlobalAddr, op: AtomicOp) -> Result<u64> {
    let host = f.node().cfg.map.node_of(g)?;
    match call(f, host, Body::Atomic { base: g.base(), op })? {
        Body::Word(prior) => Ok(prior),
        b => Err(unexpected(&b)),
    }
}

// ---- mutex ----

/// Moves `owner` into a new mutex hosted where the object lives.
pub fn mutex_new(f: &mut dyn Fabric, owner: crate::protocol::handles::OwnerHandle) -> Result<MutexRef> {
    let detached = f.node().detach_owner(owner)?;
    let host = f.node().cfg.map.node_of(detached.g)?;
    match call(f, host, Body::Mutex(MutexMsg::Create { owner: detached }))? {
        Body::Mutex(MutexMsg::Created { id }) => Ok(MutexRef { host, id }),
        b => Err(unexpected(&b)),
    }
}

/// Queues a lock request. The guard arrives later in the task's mailbox.
pub fn mutex_lock(f: &mut dyn Fabric, mx: MutexRef) -> Result<()> {
    let task = f.task().ok_or_else(|| Error::Task("lock outside a task".into()))?;
    let node = f.me();
    match call(f, mx.host, Body::Mutex(MutexMsg::Lock { id: mx.id, task, node }))? {
        Body::Mutex(MutexMsg::Queued) => Ok(()),
        b => Err(unexpected(&b)),
    }
}

pub fn mutex_unlock(f: &mut dyn Fabric, mx: MutexRef) -> Result<()> {
    let task = f.task().ok_or_else(|| Error::Task("unlock outside a task".into()))?;
    match call(f, mx.host, Body::Mutex(MutexMsg::Unlock { id: mx.id, task }))? {
        Body::Ack => Ok(()),
        b => Err(unexpected(&b)),
    }
}

/// Reads `len` bytes at `offset` of the guarded object. The object stays
/// at the mutex host; a remote holder reads an uncached copy.
pub fn guard_read(f: &mut dyn Fabric, guard: &Guard, offset: u64, len: u64) -> Result<Vec<u8>> {
    if f.node().is_local(guard.g)? {
        return f.node().heap.read_raw(guard.g.base(), offset, len);
    }
    let host = guard.mutex.host;
    let images = match call(f, host, Body::Fetch { base: guard.g.base() })? {
        Body::Images(i) => i,
        b => return Err(unexpected(&b)),
    };
    let root = images.first().ok_or_else(|| Error::UnexpectedReply("empty image list".into()))?;
    let size = root.bytes.len() as u64;
    if offset.checked_add(len).is_none_or(|end| end > size) {
        return Err(Error::OutOfBounds { base: guard.g.base(), offset, len, size });
    }
    Ok(root.bytes[offset as usize..(offset + len) as usize].to_vec())
}

/// Writes through the guard in place at the mutex host.
pub fn guard_write(f: &mut dyn Fabric, guard: &Guard, offset: u64, bytes: &[u8]) -> Result<()> {
    if f.node().is_local(guard.g)? {
        return f.node().heap.write_raw(guard.g.base(), offset, bytes);
    }
    let host = guard.mutex.host;
    match call(f, host, Body::WriteBytes { base: guard.g.base(), offset, bytes: bytes.to_vec() })? {
        Body::Ack => Ok(()),
        b => Err(unexpected(&b)),
    }
}

// ---- channels ----

pub fn channel_new(f: &mut dyn Fabric) -> Result<ChanRef> {
    let host = f.me();
    match call(f, host, Body::Channel(ChanMsg::Create))? {
        Body::Channel(ChanMsg::Created { id }) => Ok(ChanRef { host, id }),
        b => Err(unexpected(&b)),
    }
}

/// Sends `value`; owner handles undergo ownership transfer on the way.
pub fn channel_send(f: &mut dyn Fabric, ch: ChanRef, value: Value) -> Result<()> {
    let value = f.node().detach_value(value)?;
    match call(f, ch.host, Body::Channel(ChanMsg::Send { id: ch.id, value }))? {
        Body::Ack => Ok(()),
        b => Err(unexpected(&b)),
    }
}

/// Queues a receive. The value arrives later in the task's mailbox.
pub fn channel_recv(f: &mut dyn Fabric, ch: ChanRef) -> Result<()> {
    let task = f.task().ok_or_else(|| Error::Task("recv outside a task".into()))?;
    let node = f.me();
    match call(f, ch.host, Body::Channel(ChanMsg::Recv { id: ch.id, task, node }))? {
        Body::Channel(ChanMsg::Queued) => Ok(()),
        b => Err(unexpected(&b)),
    }
}

pub fn channel_close(f: &mut dyn Fabric, ch: ChanRef) -> Result<()> {
    call(f, ch.host, Body::Channel(ChanMsg::Close { id: ch.id })).map(|_| ())
}

// ---- shared count ----

/// Turns an owner into the first counted handle. The counter word lives on
/// the object's host.
pub fn counted_new(f: &mut dyn Fabric, owner: crate::protocol::handles::OwnerHandle) -> Result<CountedHandle> {
    let detached = f.node().detach_owner(owner)?;
    let host = f.node().cfg.map.node_of(detached.g)?;
    let (counter, _) = crate::runtime::alloc_on(f, host, 8)?;
    atomic_op(f, counter, AtomicOp::FetchAdd(1))?;
    Ok(CountedHandle { counter, inner: SharedHandle::from_embedded(detached.g), ident: detached.ident })
}

pub fn counted_clone(f: &mut dyn Fabric, h: &CountedHandle) -> Result<CountedHandle> {
    atomic_op(f, h.counter, AtomicOp::FetchAdd(1))?;
    Ok(CountedHandle { counter: h.counter, inner: SharedHandle::from_embedded(h.inner.addr()), ident: h.ident })
}

pub fn counted_deref(f: &mut dyn Fabric, h: &mut CountedHandle) -> Result<u64> {
    ops::shared_deref(f, &mut h.inner)
}

/// Drops one reference; the last one frees the object and the counter.
/// Returns whether this call freed them.
pub fn counted_drop(f: &mut dyn Fabric, h: CountedHandle) -> Result<bool> {
    let g = h.inner.addr();
    ops::shared_drop(f, h.inner)?;
    let prior = atomic_op(f, h.counter, AtomicOp::FetchAdd(u64::MAX))?;
    match prior {
        0 => {
            atomic_op(f, h.counter, AtomicOp::FetchAdd(1))?;
            Err(Error::CounterUnderflow(g))
        }
        1 => {
            ops::free_object(f, g)?;
            ops::free_object(f, h.counter)?;
            Ok(true)
        }
        _ => Ok(false),
    }
}
