//! One node's slice of the global heap.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::addressing::NodeId;
use crate::error::{Error, Result};
use crate::runtime::task::TaskId;

pub const ALIGN: u64 = 16;

fn align_up(n: u64) -> u64 {
    n.div_ceil(ALIGN) * ALIGN
}

/// Identity of a logical object, preserved across copies and moves.
/// `version` counts completed user writes; the verifier uses it to tell a
/// fresh copy from a stale one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct ObjectTag {
    pub origin: NodeId,
    pub seq: u64,
    pub version: u64,
}

impl ObjectTag {
    pub fn same_object(&self, other: &ObjectTag) -> bool {
        self.origin == other.origin && self.seq == other.seq
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AllocationRecord {
    pub base: u64,
    pub size: u64,
    pub payload: Vec<u8>,
    pub live: bool,
    pub tie_children: Vec<u64>,
    pub tag: ObjectTag,
    pub task: Option<TaskId>,
}

/// Portable image of one object (and its position in a tie group), used by
/// fetch/move replies.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectImage {
    pub bytes: Vec<u8>,
    pub tag: ObjectTag,
    /// Indices of tied children inside the enclosing image list.
    pub children: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
struct Quarantined {
    size: u64,
    pending: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HeapPartition {
    node: NodeId,
    lo: u64,
    start: u64,
    end: u64,
    cursor: u64,
    records: BTreeMap<u64, AllocationRecord>,
    /// Reusable `(base, size)` blocks.
    free: Vec<(u64, u64)>,
    /// Freed bases whose invalidation notices are still in flight.
    quarantine: BTreeMap<u64, Quarantined>,
    used: u64,
    next_seq: u64,
}

impl HeapPartition {
    pub fn new(node: NodeId, range: Range<u64>) -> Self {
        // Offset 0 is the null address and is never handed out.
        let start = range.start.max(ALIGN);
        HeapPartition {
            node,
            lo: range.start,
            start,
            end: range.end,
            cursor: start,
            records: BTreeMap::new(),
            free: Vec::new(),
            quarantine: BTreeMap::new(),
            used: 0,
            next_seq: 1,
        }
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    /// Partition size in bytes.
    pub fn capacity(&self) -> u64 {
        self.end - self.lo
    }

    /// Bytes held by live records (aligned sizes), cache copies included.
    pub fn used(&self) -> u64 {
        self.used
    }

    pub fn usage(&self) -> f64 {
        self.used as f64 / self.capacity() as f64
    }

    pub fn contains(&self, base: u64) -> bool {
        base >= self.start && base < self.end
    }

    pub fn live_count(&self) -> usize {
        self.records.values().filter(|r| r.live).count()
    }

    pub fn live_records(&self) -> impl Iterator<Item = &AllocationRecord> {
        self.records.values().filter(|r| r.live)
    }

    pub fn quarantined(&self) -> usize {
        self.quarantine.len()
    }

    /// Whether `size` more bytes would fit, without allocating.
    pub fn can_fit(&self, size: u64) -> bool {
        let need = align_up(size.max(1));
        self.free.iter().any(|&(_, s)| s >= need) || self.cursor + need <= self.end
    }

    pub fn alloc_raw(&mut self, size: u64) -> Result<u64> {
        self.alloc_tagged(size, None, None)
    }

    /// Allocates a zero-filled record. A fresh tag is minted unless one is
    /// supplied (moves and copies keep the source's identity).
    pub fn alloc_tagged(&mut self, size: u64, tag: Option<ObjectTag>, task: Option<TaskId>) -> Result<u64> {
        if size == 0 {
            return Err(Error::ZeroSize);
        }
        let need = align_up(size);
        let base = if let Some(i) = self.free.iter().position(|&(_, s)| s >= need) {
            let (base, s) = self.free.remove(i);
            if s > need {
                self.free.push((base + need, s - need));
            }
            base
        } else if self.cursor + need <= self.end {
            let base = self.cursor;
            self.cursor += need;
            base
        } else {
            return Err(Error::OutOfMemory { node: self.node, size });
        };
        let tag = tag.unwrap_or_else(|| {
            let t = ObjectTag { origin: self.node, seq: self.next_seq, version: 0 };
            self.next_seq += 1;
            t
        });
        self.used += need;
        self.records.insert(
            base,
            AllocationRecord {
                base,
                size,
                payload: vec![0; size as usize],
                live: true,
                tie_children: Vec::new(),
                tag,
                task,
            },
        );
        Ok(base)
    }

    fn check_owned(&self, base: u64) -> Result<()> {
        if self.contains(base) {
            Ok(())
        } else {
            Err(Error::UnknownBase(base))
        }
    }

    pub fn record(&self, base: u64) -> Result<&AllocationRecord> {
        self.check_owned(base)?;
        match self.records.get(&base) {
            Some(r) if r.live => Ok(r),
            Some(_) => Err(Error::DeadRecord(base)),
            None => Err(Error::UnknownBase(base)),
        }
    }

    fn record_mut(&mut self, base: u64) -> Result<&mut AllocationRecord> {
        self.check_owned(base)?;
        match self.records.get_mut(&base) {
            Some(r) if r.live => Ok(r),
            Some(_) => Err(Error::DeadRecord(base)),
            None => Err(Error::UnknownBase(base)),
        }
    }

    pub fn size_of(&self, base: u64) -> Result<u64> {
        Ok(self.record(base)?.size)
    }

    pub fn tag_of(&self, base: u64) -> Result<ObjectTag> {
        Ok(self.record(base)?.tag)
    }

    pub fn read_raw(&self, base: u64, offset: u64, len: u64) -> Result<Vec<u8>> {
        let r = self.record(base)?;
        if offset.checked_add(len).is_none_or(|e| e > r.size) {
            return Err(Error::OutOfBounds { base, offset, len, size: r.size });
        }
        Ok(r.payload[offset as usize..(offset + len) as usize].to_vec())
    }

    pub fn read_object(&self, base: u64) -> Result<(Vec<u8>, ObjectTag)> {
        let r = self.record(base)?;
        Ok((r.payload.clone(), r.tag))
    }

    /// Stores `bytes` at `offset`. A non-empty write counts as one new
    /// version of the object.
    pub fn write_raw(&mut self, base: u64, offset: u64, bytes: &[u8]) -> Result<()> {
        let r = self.record_mut(base)?;
        let len = bytes.len() as u64;
        if offset.checked_add(len).is_none_or(|e| e > r.size) {
            return Err(Error::OutOfBounds { base, offset, len, size: r.size });
        }
        if bytes.is_empty() {
            return Ok(());
        }
        r.payload[offset as usize..(offset + len) as usize].copy_from_slice(bytes);
        r.tag.version += 1;
        Ok(())
    }

    /// Marks `base` dead. The block stays quarantined until
    /// `pending_notices` invalidation notices have been delivered.
    pub fn free_raw(&mut self, base: u64, pending_notices: u32) -> Result<AllocationRecord> {
        self.check_owned(base)?;
        let r = match self.records.get_mut(&base) {
            Some(r) if r.live => r,
            Some(_) => return Err(Error::DoubleFree(base)),
            None => return Err(Error::UnknownBase(base)),
        };
        r.live = false;
        let snapshot = r.clone();
        r.payload = Vec::new();
        r.tie_children.clear();
        let size = align_up(snapshot.size);
        self.used -= size;
        if pending_notices == 0 {
            self.free.push((base, size));
        } else {
            self.quarantine.insert(base, Quarantined { size, pending: pending_notices });
        }
        Ok(snapshot)
    }

    /// Transport completion for one invalidation notice about `base`.
    pub fn notice_delivered(&mut self, base: u64) {
        if let Some(q) = self.quarantine.get_mut(&base) {
            q.pending = q.pending.saturating_sub(1);
            if q.pending == 0 {
                let q = self.quarantine.remove(&base).unwrap();
                self.free.push((base, q.size));
            }
        }
    }

    pub fn add_tie_child(&mut self, parent: u64, child: u64) -> Result<()> {
        self.record(child)?;
        self.record_mut(parent)?.tie_children.push(child);
        Ok(())
    }

    /// `base` and all transitively tied children, parent first.
    pub fn group(&self, base: u64) -> Result<Vec<u64>> {
        let mut out = Vec::new();
        let mut stack = vec![base];
        while let Some(b) = stack.pop() {
            let r = self.record(b)?;
            out.push(b);
            stack.extend(r.tie_children.iter().rev());
        }
        Ok(out)
    }

    pub fn export_group(&self, base: u64) -> Result<Vec<ObjectImage>> {
        let members = self.group(base)?;
        let index: BTreeMap<u64, usize> = members.iter().enumerate().map(|(i, &b)| (b, i)).collect();
        members
            .iter()
            .map(|&b| {
                let r = self.record(b)?;
                Ok(ObjectImage {
                    bytes: r.payload.clone(),
                    tag: r.tag,
                    children: r.tie_children.iter().map(|c| index[c]).collect(),
                })
            })
            .collect()
    }

    /// Allocates and fills every image; returns the new bases in image
    /// order (the group root first). All-or-nothing.
    pub fn install_group(&mut self, images: &[ObjectImage], task: Option<TaskId>) -> Result<Vec<u64>> {
        let total: u64 = images.iter().map(|i| align_up(i.bytes.len().max(1) as u64)).sum();
        if self.used + total > self.capacity() {
            return Err(Error::OutOfMemory { node: self.node, size: total });
        }
        let mut bases = Vec::with_capacity(images.len());
        for img in images {
            match self.alloc_tagged(img.bytes.len() as u64, Some(img.tag), task) {
                Ok(b) => bases.push(b),
                Err(e) => {
                    for b in bases {
                        let _ = self.free_raw(b, 0);
                    }
                    return Err(e);
                }
            }
        }
        for (img, &b) in images.iter().zip(&bases) {
            let r = self.records.get_mut(&b).unwrap();
            r.payload.copy_from_slice(&img.bytes);
            r.tie_children = img.children.iter().map(|&c| bases[c]).collect();
        }
        Ok(bases)
    }

    /// Frees a whole tie group; returns the freed bases.
    pub fn free_group(&mut self, base: u64, pending_notices: u32) -> Result<Vec<u64>> {
        let members = self.group(base)?;
        for &b in &members {
            self.free_raw(b, pending_notices)?;
        }
        Ok(members)
    }

    /// Full-table audit: live records are in range and pairwise disjoint,
    /// and `used` matches.
    pub fn audit(&self) -> Result<()> {
        let mut prev_end = self.start;
        let mut used = 0;
        for r in self.live_records() {
            if r.base < prev_end || r.base + r.size > self.end {
                return Err(Error::OutOfBounds { base: r.base, offset: 0, len: r.size, size: r.size });
            }
            if r.payload.len() as u64 != r.size {
                return Err(Error::DeadRecord(r.base));
            }
            prev_end = r.base + align_up(r.size);
            used += align_up(r.size);
        }
        if used != self.used {
            return Err(Error::Io(format!("heap accounting drift: {used} != {}", self.used)));
        }
        Ok(())
    }

    /// Bytes held per allocating task.
    pub fn usage_by_task(&self) -> BTreeMap<TaskId, u64> {
        let mut out = BTreeMap::new();
        for r in self.live_records() {
            if let Some(t) = r.task {
                *out.entry(t).or_default() += align_up(r.size);
            }
        }
        out
    }

    /// Reattributes records allocated by `task` (task migration).
    pub fn set_task_of(&mut self, base: u64, task: Option<TaskId>) -> Result<()> {
        self.record_mut(base)?.task = task;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn heap() -> HeapPartition {
        HeapPartition::new(1, 1024..2048)
    }

    #[test]
    fn disjoint_allocations() {
        let mut h = heap();
        let a = h.alloc_raw(16).unwrap();
        let b = h.alloc_raw(16).unwrap();
        assert!(a + 16 <= b || b + 16 <= a);
        assert!(h.contains(a) && h.contains(b));
        h.audit().unwrap();
    }

    #[test]
    fn zero_and_exhaustion() {
        let mut h = heap();
        assert_eq!(h.alloc_raw(0), Err(Error::ZeroSize));
        while h.alloc_raw(100).is_ok() {}
        assert!(matches!(h.alloc_raw(100), Err(Error::OutOfMemory { node: 1, .. })));
        h.audit().unwrap();
    }

    #[test]
    fn null_offset_is_never_allocated() {
        let mut h = HeapPartition::new(0, 0..1024);
        assert_eq!(h.alloc_raw(8).unwrap(), ALIGN);
    }

    #[test]
    fn read_write_roundtrip() {
        let mut h = heap();
        let a = h.alloc_raw(16).unwrap();
        assert_eq!(h.read_raw(a, 0, 16).unwrap(), vec![0; 16]);
        h.write_raw(a, 8, &[1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
        assert_eq!(h.read_raw(a, 8, 8).unwrap(), vec![1, 2, 3, 4, 5, 6, 7, 8]);
        assert!(matches!(h.read_raw(a, 8, 9), Err(Error::OutOfBounds { .. })));
        let v = h.tag_of(a).unwrap().version;
        h.write_raw(a, 0, &[]).unwrap();
        assert_eq!(h.tag_of(a).unwrap().version, v);
    }

    #[test]
    fn free_paths() {
        let mut h = heap();
        let a = h.alloc_raw(16).unwrap();
        h.free_raw(a, 0).unwrap();
        assert_eq!(h.free_raw(a, 0), Err(Error::DoubleFree(a)));
        assert_eq!(h.read_raw(a, 0, 1), Err(Error::DeadRecord(a)));
        assert_eq!(h.write_raw(a, 0, &[1]), Err(Error::DeadRecord(a)));
        assert_eq!(h.free_raw(10, 0), Err(Error::UnknownBase(10)));
        assert_eq!(h.used(), 0);
    }

    #[test]
    fn quarantine_delays_reuse() {
        let mut h = heap();
        let a = h.alloc_raw(16).unwrap();
        h.free_raw(a, 2).unwrap();
        let b = h.alloc_raw(16).unwrap();
        assert_ne!(a, b);
        h.notice_delivered(a);
        h.free_raw(b, 0).unwrap();
        // b is reusable immediately; a still waits for one notice.
        assert_eq!(h.alloc_raw(16).unwrap(), b);
        h.notice_delivered(a);
        assert_eq!(h.alloc_raw(16).unwrap(), a);
    }

    #[test]
    fn tie_group_export_install() {
        let mut src = heap();
        let root = src.alloc_raw(8).unwrap();
        let c1 = src.alloc_raw(8).unwrap();
        let c2 = src.alloc_raw(8).unwrap();
        src.write_raw(c2, 0, &[2; 8]).unwrap();
        src.add_tie_child(root, c1).unwrap();
        src.add_tie_child(c1, c2).unwrap();
        let images = src.export_group(root).unwrap();
        assert_eq!(images.len(), 3);

        let mut dst = HeapPartition::new(2, 2048..4096);
        let bases = dst.install_group(&images, None).unwrap();
        assert_eq!(dst.group(bases[0]).unwrap(), bases);
        assert_eq!(dst.read_raw(bases[2], 0, 8).unwrap(), vec![2; 8]);
        assert_eq!(dst.tag_of(bases[2]).unwrap(), src.tag_of(c2).unwrap());
        assert_eq!(src.free_group(root, 0).unwrap().len(), 3);
        assert_eq!(src.live_count(), 0);
    }
}
