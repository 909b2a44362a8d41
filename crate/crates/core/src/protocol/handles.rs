use serde::{Deserialize, Serialize};

use crate::addressing::{ExtWord, GlobalAddr, NodeId};

/// Location of an owner's address field: an entry in a node's owner-slot
/// table. Packed into the 63-bit payload of an exclusive handle's
/// extension word as `node << 48 | slot`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SlotRef {
    pub node: NodeId,
    pub slot: u64,
}

impl SlotRef {
    const SLOT_BITS: u32 = 48;

    pub fn encode(self) -> u64 {
        ((self.node as u64) << Self::SLOT_BITS) | (self.slot & ((1 << Self::SLOT_BITS) - 1))
    }

    pub fn decode(payload: u64) -> Self {
        SlotRef { node: (payload >> Self::SLOT_BITS) as NodeId, slot: payload & ((1 << Self::SLOT_BITS) - 1) }
    }
}

/// Logical identity of an object (node that first allocated it and that
/// node's allocation sequence number). Survives moves and transfers.
pub type ObjId = (NodeId, u64);

/// The owner's address field and extension word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OwnerSlot {
    pub g: GlobalAddr,
    /// `U` flag plus the local-copy address used by owner reads.
    pub ext: ExtWord,
    /// An exclusive handle derived from this owner is live.
    pub lent_exclusive: bool,
    pub ident: ObjId,
}

/// Unique owner of an object. The handle names a slot on the node where
/// the holding task runs; the slot holds the authoritative colored address.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OwnerHandle {
    pub(crate) slot: u64,
}

impl OwnerHandle {
    pub fn slot_id(&self) -> u64 {
        self.slot
    }
}

/// An owner handle in flight between tasks or nodes. The transfer resets
/// the extension word, so normally only the address travels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DetachedOwner {
    pub g: GlobalAddr,
    pub ext: ExtWord,
    pub ident: ObjId,
}

/// Read-only reference. `g` is frozen at creation; `l` is the local copy
/// (0 when none has been taken yet).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SharedHandle {
    pub(crate) g: GlobalAddr,
    pub(crate) l: u64,
}

impl SharedHandle {
    /// A reference to an object whose owner pointer is embedded in another
    /// object's bytes.
    pub fn from_embedded(g: GlobalAddr) -> Self {
        SharedHandle { g, l: 0 }
    }

    pub fn addr(&self) -> GlobalAddr {
        self.g
    }

    pub fn local_copy(&self) -> Option<u64> {
        (self.l != 0).then_some(self.l)
    }
}

/// Write-capable reference: colored address plus the owner's slot.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExclusiveHandle {
    pub(crate) g: GlobalAddr,
    pub(crate) o: ExtWord,
}

impl ExclusiveHandle {
    pub fn addr(&self) -> GlobalAddr {
        self.g
    }

    pub fn owner_slot(&self) -> SlotRef {
        SlotRef::decode(self.o.payload())
    }

    pub fn color_updated(&self) -> bool {
        self.o.updated()
    }
}

/// Child of a tie group, addressed by its path from the group root.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TiedHandle {
    pub path: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Access {
    Shared,
    Exclusive,
}

/// Where a projected (partial or stack) borrow came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProjectionOrigin {
    /// Part of a heap object; `owner` is the containing owner's slot.
    Heap { g: GlobalAddr, owner: Option<SlotRef> },
    /// A stack value published by a task; it lives in the publishing
    /// node's partition but has no owner handle.
    Stack { base: u64 },
}

/// Copy-and-write-back borrow of a byte range.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProjectedHandle {
    pub origin: ProjectionOrigin,
    pub offset: u64,
    pub len: u64,
    pub mode: Access,
    /// Local record holding the bytes and the range's offset inside it.
    pub(crate) record: u64,
    pub(crate) rel: u64,
    pub(crate) backing: Backing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub(crate) enum Backing {
    /// Direct access to a local origin.
    Direct,
    /// A cached whole-object copy keyed by the origin address.
    Cached(GlobalAddr),
    /// A private copy owned by the projection.
    Private(u64),
    /// An eagerly evicted stack-value cache entry keyed by the stack base.
    StackCache(u64),
}

impl ProjectedHandle {
    /// Local record base and offset of the projected bytes.
    pub fn local_range(&self) -> (u64, u64) {
        (self.record, self.rel)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slot_ref_roundtrip() {
        let s = SlotRef { node: 7, slot: 0x1234 };
        assert_eq!(SlotRef::decode(s.encode()), s);
        assert_eq!(ExtWord::with_payload(s.encode()).set_u().payload(), s.encode());
    }
}
