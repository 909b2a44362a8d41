//! Dereference and drop logic for every handle kind.
//!
//! Reads of remote objects go through the node cache under the object's
//! colored address; writes first make the object local (moving it, or
//! adopting an unreferenced cached copy) and then bump the color once per
//! write epoch, which retires every cached copy elsewhere without a message.

use crate::addressing::{append_color, ExtWord, GlobalAddr, U_BIT};
use crate::error::{Error, Result};
use crate::heap::HeapPartition;
use crate::protocol::handles::{
    Access, Backing, DetachedOwner, ExclusiveHandle, OwnerHandle, ProjectedHandle, ProjectionOrigin, SharedHandle,
    SlotRef, TiedHandle,
};
use crate::runtime::sync::StackRef;
use crate::transport::{call, flush, post, unexpected, Body, Fabric};

fn fetch_images(f: &mut dyn Fabric, body: Body, host: u16) -> Result<Vec<crate::heap::ObjectImage>> {
    match call(f, host, body)? {
        Body::Images(images) => Ok(images),
        b => Err(unexpected(&b)),
    }
}

/// Snapshot of a remote object (and its tie group) installed in the local
/// partition. One request, one reply.
pub fn copy_object(f: &mut dyn Fabric, base: u64) -> Result<u64> {
    let host = f.node().cfg.map.node_of_base(base)?;
    if host == f.me() {
        return Err(Error::AlreadyLocal(base));
    }
    let images = fetch_images(f, Body::Fetch { base }, host)?;
    let node = f.node();
    node.relieve_pressure(images.iter().map(|i| i.bytes.len() as u64).sum());
    Ok(node.heap.install_group(&images, None)?[0])
}

/// Relocates a remote object (and its tie group) into the local partition
/// and asks the old host to free the original. Returns the new address,
/// color 0.
pub fn move_object(f: &mut dyn Fabric, base: u64) -> Result<GlobalAddr> {
    let host = f.node().cfg.map.node_of_base(base)?;
    if host == f.me() {
        return Err(Error::AlreadyLocal(base));
    }
    let images = fetch_images(f, Body::MoveOut { base }, host)?;
    let task = f.task();
    let node = f.node();
    node.relieve_pressure(images.iter().map(|i| i.bytes.len() as u64).sum());
    let new = node.heap.install_group(&images, task)?[0];
    post(f, host, Body::Dealloc { base })?;
    Ok(GlobalAddr::from_base(new))
}

/// Moves a local object to a fresh local base (color 0) and frees the old
/// one cluster-wide.
fn relocate_local(f: &mut dyn Fabric, base: u64) -> Result<GlobalAddr> {
    let node = f.node();
    let images = node.heap.export_group(base)?;
    let task = node.heap.record(base)?.task;
    let new = node.heap.install_group(&images, task)?[0];
    let outbox = node.free_local(base)?;
    node.stats.relocations += 1;
    flush(f, outbox)?;
    Ok(GlobalAddr::from_base(new))
}

/// Next color for a write epoch. At the last color the object is moved
/// instead (move-on-overflow), which also resets the color to 0.
pub fn bump_color(f: &mut dyn Fabric, g: GlobalAddr) -> Result<GlobalAddr> {
    let bits = f.node().bits();
    if g.color() < bits.max_color() {
        return append_color(g, g.color() + 1, bits);
    }
    if f.node().is_local(g)? {
        relocate_local(f, g.base())
    } else {
        move_object(f, g.base())
    }
}

/// Atomic lookup-or-fetch of `g` in the node cache; returns the copy.
fn cache_acquire(f: &mut dyn Fabric, g: GlobalAddr) -> Result<u64> {
    if let Some(l) = f.node().cache.try_hit(g) {
        return Ok(l);
    }
    f.node().cache.begin_fetch(g);
    match copy_object(f, g.base()) {
        Ok(l) => {
            f.node().cache.insert_fetched(g, l);
            Ok(l)
        }
        Err(e) => {
            f.node().cache.abort_fetch(g);
            Err(e)
        }
    }
}

// ---- shared handles ----

pub fn shared_deref(f: &mut dyn Fabric, r: &mut SharedHandle) -> Result<u64> {
    if f.node().is_local(r.g)? {
        return Ok(r.g.base());
    }
    if r.l == 0 {
        r.l = cache_acquire(f, r.g)?;
    }
    Ok(r.l)
}

pub fn shared_drop(f: &mut dyn Fabric, r: SharedHandle) -> Result<()> {
    if r.l != 0 {
        f.node().release_copy(r.g)?;
    }
    Ok(())
}

/// Brings a remote tie group into the local cache in one round trip and
/// returns the local root; children are then reached with [`tied_local`].
pub fn fetch_tie_group(f: &mut dyn Fabric, r: &mut SharedHandle) -> Result<u64> {
    shared_deref(f, r)
}

pub fn share_shared(r: &SharedHandle) -> SharedHandle {
    SharedHandle { g: r.g, l: 0 }
}

// ---- owner ----

pub fn owner_read(f: &mut dyn Fabric, p: &OwnerHandle) -> Result<u64> {
    let s = *f.node().slot(p)?;
    if s.lent_exclusive {
        return Err(Error::SwmrViolation(format!("owner read of {} while lent", s.g)));
    }
    if f.node().is_local(s.g)? {
        return Ok(s.g.base());
    }
    if s.ext.payload() != 0 {
        return Ok(s.ext.payload());
    }
    let l = cache_acquire(f, s.g)?;
    let slot = f.node().slot_mut(p)?;
    slot.ext = ExtWord((slot.ext.0 & U_BIT) | l);
    Ok(l)
}

/// Drops the owner's own cache reference, if it holds one.
fn release_owner_copy(f: &mut dyn Fabric, p: &OwnerHandle) -> Result<()> {
    let s = *f.node().slot(p)?;
    if s.ext.payload() != 0 {
        f.node().release_copy(s.g)?;
        let slot = f.node().slot_mut(p)?;
        slot.ext = ExtWord(slot.ext.0 & U_BIT);
    }
    Ok(())
}

pub fn owner_write(f: &mut dyn Fabric, p: &OwnerHandle) -> Result<u64> {
    let s = *f.node().slot(p)?;
    if s.lent_exclusive {
        return Err(Error::SwmrViolation(format!("owner write of {} while lent", s.g)));
    }
    if f.node().is_local(s.g)? {
        if !s.ext.updated() {
            let g = bump_color(f, s.g)?;
            let slot = f.node().slot_mut(p)?;
            slot.g = g;
            slot.ext = slot.ext.set_u();
        }
        return Ok(f.node().slot(p)?.g.base());
    }
    release_owner_copy(f, p)?;
    let g = match f.node().cache.extract_for_promotion(s.g)? {
        Some(l) => {
            let host = f.node().cfg.map.node_of(s.g)?;
            let task = f.task();
            for b in f.node().heap.group(l)? {
                f.node().heap.set_task_of(b, task)?;
            }
            post(f, host, Body::Dealloc { base: s.g.base() })?;
            GlobalAddr::from_base(l)
        }
        None => move_object(f, s.g.base())?,
    };
    let slot = f.node().slot_mut(p)?;
    slot.g = g;
    slot.ext = ExtWord::NULL.set_u();
    Ok(g.base())
}

pub fn make_shared_from_owner(f: &mut dyn Fabric, p: &OwnerHandle) -> Result<SharedHandle> {
    let skip = f.node().cfg.faults.skip_u_reset;
    let slot = f.node().slot_mut(p)?;
    if slot.lent_exclusive {
        return Err(Error::SwmrViolation(format!("sharing {} while lent", slot.g)));
    }
    if !skip {
        slot.ext = slot.ext.reset_u();
    }
    Ok(SharedHandle { g: slot.g, l: 0 })
}

pub fn make_shared_from_exclusive(f: &mut dyn Fabric, m: &mut ExclusiveHandle) -> SharedHandle {
    if !f.node().cfg.faults.skip_u_reset {
        m.o = m.o.reset_u();
    }
    SharedHandle { g: m.g, l: 0 }
}

pub fn make_exclusive(f: &mut dyn Fabric, p: &OwnerHandle) -> Result<ExclusiveHandle> {
    if f.node().slot(p)?.lent_exclusive {
        return Err(Error::SwmrViolation("second exclusive handle from one owner".into()));
    }
    release_owner_copy(f, p)?;
    let me = f.me();
    let slot = f.node().slot_mut(p)?;
    slot.lent_exclusive = true;
    Ok(exclusive_for_slot(slot.g, SlotRef { node: me, slot: p.slot }))
}

pub fn exclusive_for_slot(g: GlobalAddr, slot: SlotRef) -> ExclusiveHandle {
    ExclusiveHandle { g, o: ExtWord::with_payload(slot.encode()) }
}

pub fn exclusive_deref(f: &mut dyn Fabric, m: &mut ExclusiveHandle) -> Result<u64> {
    if f.node().is_local(m.g)? {
        if !m.o.updated() {
            m.o = m.o.set_u();
            m.g = bump_color(f, m.g)?;
        }
    } else {
        m.o = m.o.set_u();
        m.g = move_object(f, m.g.base())?;
    }
    Ok(m.g.base())
}

/// Writes the handle's address back into the owner's slot and waits for
/// the acknowledgement when the slot is remote.
pub fn exclusive_drop(f: &mut dyn Fabric, m: ExclusiveHandle) -> Result<()> {
    let slot = SlotRef::decode(m.o.payload());
    let update = !f.node().cfg.faults.skip_write_back;
    if slot.node == f.me() {
        let s = f.node().slots.get_mut(&slot.slot).ok_or(Error::DeadHandle)?;
        if update {
            s.g = m.g;
        }
        s.lent_exclusive = false;
        return Ok(());
    }
    match call(f, slot.node, Body::WriteBack { slot: slot.slot, g: m.g, update })? {
        Body::Ack => Ok(()),
        b => Err(unexpected(&b)),
    }
}

/// Frees the object at `g` (with its tie group) on its host; every other
/// node is told to drop its copies.
pub fn free_object(f: &mut dyn Fabric, g: GlobalAddr) -> Result<()> {
    let host = f.node().cfg.map.node_of(g)?;
    if host == f.me() {
        let outbox = f.node().free_local(g.base())?;
        flush(f, outbox)
    } else {
        post(f, host, Body::Dealloc { base: g.base() })
    }
}

pub fn owner_drop(f: &mut dyn Fabric, p: OwnerHandle) -> Result<()> {
    let s = *f.node().slot(&p)?;
    if s.lent_exclusive {
        return Err(Error::SwmrViolation(format!("drop of {} while lent", s.g)));
    }
    release_owner_copy(f, &p)?;
    f.node().slots.remove(&p.slot);
    free_object(f, s.g)
}

/// Ownership transfer, source side: the handle leaves this node.
pub fn transfer_owner(f: &mut dyn Fabric, p: OwnerHandle) -> Result<DetachedOwner> {
    f.node().detach_owner(p)
}

/// Ownership transfer, destination side.
pub fn receive_owner(f: &mut dyn Fabric, d: DetachedOwner) -> OwnerHandle {
    f.node().attach_owner(d)
}

// ---- tie groups ----

/// Local base of the tied object at `path` below `root`.
pub fn tied_local(heap: &HeapPartition, root: u64, path: &[u32]) -> Result<u64> {
    let mut b = root;
    for &i in path {
        let r = heap.record(b)?;
        b = *r.tie_children.get(i as usize).ok_or(Error::OutOfBounds {
            base: b,
            offset: i as u64,
            len: 1,
            size: r.tie_children.len() as u64,
        })?;
    }
    Ok(b)
}

/// Allocates a child tied to the object at `path` under `root`, on the
/// group's current node. Adding a child changes the group, so it counts
/// as a write epoch on the root.
pub fn tied_alloc(f: &mut dyn Fabric, root: &OwnerHandle, path: &[u32], size: u64) -> Result<TiedHandle> {
    let s = *f.node().slot(root)?;
    if s.lent_exclusive {
        return Err(Error::SwmrViolation(format!("tied allocation under {} while lent", s.g)));
    }
    release_owner_copy(f, root)?;
    let host = f.node().cfg.map.node_of(s.g)?;
    let task = f.task();
    let index = match call(f, host, Body::Alloc { size, tie: Some((s.g.base(), path.to_vec())), task })? {
        Body::Allocated { index, .. } => index,
        b => return Err(unexpected(&b)),
    };
    if !s.ext.updated() {
        let g = bump_color(f, s.g)?;
        let slot = f.node().slot_mut(root)?;
        slot.g = g;
        slot.ext = slot.ext.set_u();
    }
    let mut p = path.to_vec();
    p.push(index);
    Ok(TiedHandle { path: p })
}

// ---- projections ----

/// Borrows `len` bytes at `offset` of a heap object or stack value.
/// Remote exclusive borrows work on a private copy that is written back on
/// release; remote shared stack borrows share one eagerly evicted copy.
pub fn projected_acquire(
    f: &mut dyn Fabric,
    origin: ProjectionOrigin,
    offset: u64,
    len: u64,
    mode: Access,
) -> Result<ProjectedHandle> {
    let (base, local) = match origin {
        ProjectionOrigin::Heap { g, .. } => (g.base(), f.node().is_local(g)?),
        ProjectionOrigin::Stack { base } => (base, f.node().heap.contains(base)),
    };
    let mk = |record, rel, backing| ProjectedHandle { origin, offset, len, mode, record, rel, backing };
    if mode == Access::Exclusive {
        let node = f.node();
        let clash = node.projections.iter().any(|&(b, o, l)| b == base && o < offset + len && offset < o + l);
        if clash {
            return Err(Error::SwmrViolation(format!("overlapping exclusive projection of {base:#x}")));
        }
    }
    let h = if local {
        let size = f.node().heap.size_of(base)?;
        if offset + len > size {
            return Err(Error::OutOfBounds { base, offset, len, size });
        }
        mk(base, offset, Backing::Direct)
    } else {
        match (origin, mode) {
            (ProjectionOrigin::Heap { g, .. }, Access::Shared) => {
                let l = cache_acquire(f, g)?;
                mk(l, offset, Backing::Cached(g))
            }
            (ProjectionOrigin::Stack { base }, Access::Shared) => {
                let hit = f.node().stack_cache.get_mut(&base).map(|e| {
                    e.count += 1;
                    e.local_base
                });
                let l = match hit {
                    Some(l) => l,
                    None => {
                        let l = copy_object(f, base)?;
                        f.node().stack_cache.insert(base, crate::cache::CacheEntry { local_base: l, count: 1 });
                        l
                    }
                };
                mk(l, offset, Backing::StackCache(base))
            }
            (_, Access::Exclusive) => {
                let host = f.node().cfg.map.node_of_base(base)?;
                let images = fetch_images(f, Body::Fetch { base }, host)?;
                let bytes = &images[0].bytes;
                if offset + len > bytes.len() as u64 {
                    return Err(Error::OutOfBounds { base, offset, len, size: bytes.len() as u64 });
                }
                let slice = bytes[offset as usize..(offset + len) as usize].to_vec();
                let task = f.task();
                let heap = &mut f.node().heap;
                let rec = heap.alloc_tagged(len.max(1), None, task)?;
                heap.write_raw(rec, 0, &slice)?;
                mk(rec, 0, Backing::Private(rec))
            }
        }
    };
    if mode == Access::Exclusive {
        f.node().projections.insert((base, offset, len));
    }
    Ok(h)
}

/// Ends a projection. Exclusive heap borrows write back and start a new
/// write epoch on the containing owner (which must live on this node).
pub fn projected_release(f: &mut dyn Fabric, h: ProjectedHandle) -> Result<()> {
    let base = match h.origin {
        ProjectionOrigin::Heap { g, .. } => g.base(),
        ProjectionOrigin::Stack { base } => base,
    };
    match h.backing {
        Backing::Direct => {}
        Backing::Cached(g) => f.node().release_copy(g)?,
        Backing::StackCache(b) => {
            let node = f.node();
            let e = node.stack_cache.get_mut(&b).ok_or(Error::ReleaseWithoutAcquire(GlobalAddr::from_base(b)))?;
            e.count -= 1;
            if e.count == 0 {
                let l = e.local_base;
                node.stack_cache.remove(&b);
                node.free_copy(l)?;
            }
        }
        Backing::Private(rec) => {
            let bytes = f.node().heap.read_raw(rec, 0, h.len)?;
            let host = f.node().cfg.map.node_of_base(base)?;
            match call(f, host, Body::WriteBytes { base, offset: h.offset, bytes })? {
                Body::Ack => {}
                b => return Err(unexpected(&b)),
            }
            f.node().heap.free_raw(rec, 0)?;
        }
    }
    if h.mode == Access::Exclusive {
        f.node().projections.remove(&(base, h.offset, h.len));
        if let ProjectionOrigin::Heap { owner: Some(slot), .. } = h.origin {
            if slot.node != f.me() {
                return Err(Error::Task("containing owner must be on the releasing node".into()));
            }
            let s = *f.node().slots.get(&slot.slot).ok_or(Error::DeadHandle)?;
            let g = bump_color(f, s.g)?;
            let s = f.node().slots.get_mut(&slot.slot).ok_or(Error::DeadHandle)?;
            s.g = g;
            // A later owner write must bump again.
            s.ext = s.ext.reset_u();
        }
    }
    Ok(())
}

/// Publishes a zero-filled stack value of `size` bytes on this node.
pub fn stack_new(f: &mut dyn Fabric, size: u64) -> Result<StackRef> {
    let task = f.task();
    Ok(StackRef { base: f.node().heap.alloc_tagged(size, None, task)? })
}

pub fn stack_drop(f: &mut dyn Fabric, s: StackRef) -> Result<()> {
    f.node().heap.free_raw(s.base, 0).map(|_| ())
}
