//! The coherence protocol: handle types and their operations.

pub mod handles;
pub mod ops;

pub use handles::{
    Access, DetachedOwner, ExclusiveHandle, ObjId, OwnerHandle, OwnerSlot, ProjectedHandle, ProjectionOrigin,
    SharedHandle, SlotRef, TiedHandle,
};
