//! Straight-line task programs over the handle API.
//!
//! A program is a list of routines; routine 0 is started by the driver and
//! every other routine is started by exactly one `Spawn`. Variables are
//! per-routine slots. Ops that touch an object name it with an object
//! number so the checkers know what a handle is supposed to reach.

use serde::{Deserialize, Serialize};

use crate::addressing::NodeId;
use crate::protocol::handles::Access;
use crate::runtime::sync::AtomicOp;

pub type Var = u32;
/// Logical object number, unique per allocation op.
pub type ObjNo = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Place {
    Auto,
    Node(NodeId),
    /// Where the object held in this variable lives.
    Near(Var),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Op {
    /// New object of `init.len()` words. `on` forces the host node.
    Alloc { dst: Var, obj: ObjNo, init: Vec<u64>, on: Option<NodeId> },
    /// New object tied under the owner in `root` (to the tied child in
    /// `parent`, or the root itself).
    TiedAlloc { root: Var, parent: Option<Var>, dst: Var, obj: ObjNo, root_obj: ObjNo, parent_obj: ObjNo, init: Vec<u64> },
    /// Shared handle from an owner, exclusive or shared handle.
    MakeShared { src: Var, dst: Var, obj: ObjNo },
    MakeExclusive { src: Var, dst: Var, obj: ObjNo },
    Read { src: Var, word: u32, obj: ObjNo },
    Write { dst: Var, word: u32, value: u64, obj: ObjNo },
    /// Releases whatever the variable holds; `obj` names the object a
    /// handle refers to.
    Drop { var: Var, obj: Option<ObjNo> },
    /// Adds word 0 of `src`'s object to word 0 of `dst`'s object; the new
    /// value is observed.
    Add { dst: Var, src: Var, dst_obj: ObjNo, src_obj: ObjNo },
    Spawn { routine: u32, place: Place, args: Vec<Var>, dst: Var },
    Join { src: Var, dst: Option<Var> },
    /// Ends the routine, handing the variable's value to the joiner.
    Return { var: Var },
    ChanNew { dst: Var },
    Send { chan: Var, src: Var },
    Recv { chan: Var, dst: Var },
    Close { chan: Var },
    /// Atomic op on word 0; the prior value is not observed.
    Atomic { src: Var, op: AtomicOp, obj: ObjNo },
    /// Moves the owner in `src` into a new mutex hosted with the object.
    MutexNew { src: Var, dst: Var, obj: ObjNo },
    Lock { mutex: Var, dst: Var },
    Unlock { guard: Var },
    GuardRead { guard: Var, word: u32, obj: ObjNo },
    GuardWrite { guard: Var, word: u32, value: u64, obj: ObjNo },
    GuardAdd { guard: Var, word: u32, delta: u64, obj: ObjNo },
    /// One round trip for the whole tie group of the shared handle's object.
    FetchTieGroup { src: Var, obj: ObjNo },
    /// Sum of word 0 along the chain of first tied children, starting at
    /// the shared handle's object.
    SumTied { src: Var, obj: ObjNo },
    /// Stores the owner in `child` inside word `word` of `parent`'s object.
    Embed { parent: Var, word: u32, child: Var, parent_obj: ObjNo, child_obj: ObjNo },
    /// Sum of word 0 along a chain of embedded owners linked through `next`.
    SumEmbedded { src: Var, next: u32, obj: ObjNo },
    ProjAcquire { src: Var, word: u32, words: u32, mode: Access, dst: Var, obj: ObjNo },
    /// Word index relative to the projected range.
    ProjRead { proj: Var, word: u32, obj: ObjNo },
    ProjWrite { proj: Var, word: u32, value: u64, obj: ObjNo },
    StackNew { dst: Var, words: u32, obj: ObjNo },
    CountedNew { src: Var, dst: Var, obj: ObjNo },
    CountedClone { src: Var, dst: Var, obj: ObjNo },
    Yield,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Alloc { .. } => "alloc",
            Op::TiedAlloc { .. } => "tied-alloc",
            Op::MakeShared { .. } => "make-shared",
            Op::MakeExclusive { .. } => "make-exclusive",
            Op::Read { .. } => "read",
            Op::Write { .. } => "write",
            Op::Drop { .. } => "drop",
            Op::Add { .. } => "add",
            Op::Spawn { .. } => "spawn",
            Op::Join { .. } => "join",
            Op::Return { .. } => "return",
            Op::ChanNew { .. } => "chan-new",
            Op::Send { .. } => "send",
            Op::Recv { .. } => "recv",
            Op::Close { .. } => "close",
            Op::Atomic { .. } => "atomic",
            Op::MutexNew { .. } => "mutex-new",
            Op::Lock { .. } => "lock",
            Op::Unlock { .. } => "unlock",
            Op::GuardRead { .. } => "guard-read",
            Op::GuardWrite { .. } => "guard-write",
            Op::GuardAdd { .. } => "guard-add",
            Op::FetchTieGroup { .. } => "fetch-tie-group",
            Op::SumTied { .. } => "sum-tied",
            Op::Embed { .. } => "embed",
            Op::SumEmbedded { .. } => "sum-embedded",
            Op::ProjAcquire { .. } => "proj-acquire",
            Op::ProjRead { .. } => "proj-read",
            Op::ProjWrite { .. } => "proj-write",
            Op::StackNew { .. } => "stack-new",
            Op::CountedNew { .. } => "counted-new",
            Op::CountedClone { .. } => "counted-clone",
            Op::Yield => "yield",
        }
    }

    /// Ops whose result the oracle comparison covers.
    pub fn is_observed(&self) -> bool {
        matches!(self, Op::Read { .. } | Op::Add { .. } | Op::SumTied { .. } | Op::SumEmbedded { .. } | Op::ProjRead { .. })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Routine {
    pub ops: Vec<Op>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProtoProgram {
    pub name: String,
    pub routines: Vec<Routine>,
    /// Node that runs routine 0.
    pub root_node: NodeId,
    /// Smallest cluster the program needs.
    pub nodes: u16,
}

impl ProtoProgram {
    pub fn new(name: impl Into<String>, nodes: u16) -> Self {
        ProtoProgram { name: name.into(), routines: vec![Routine::default()], root_node: 0, nodes }
    }

    pub fn op(&self, routine: u32, pc: u32) -> Option<&Op> {
        self.routines.get(routine as usize)?.ops.get(pc as usize)
    }

    pub fn op_count(&self) -> usize {
        self.routines.iter().map(|r| r.ops.len()).sum()
    }

    pub fn max_ops_per_routine(&self) -> usize {
        self.routines.iter().map(|r| r.ops.len()).max().unwrap_or(0)
    }

    /// Adds an empty routine and returns its index.
    pub fn add_routine(&mut self) -> u32 {
        self.routines.push(Routine::default());
        self.routines.len() as u32 - 1
    }

    pub fn push(&mut self, routine: u32, op: Op) -> &mut Self {
        self.routines[routine as usize].ops.push(op);
        self
    }

    pub fn object_count(&self) -> u32 {
        let mut n = 0;
        for r in &self.routines {
            for op in &r.ops {
                match op {
                    Op::Alloc { obj, .. } | Op::TiedAlloc { obj, .. } | Op::StackNew { obj, .. } => n = n.max(obj + 1),
                    _ => {}
                }
            }
        }
        n
    }

    /// Human-readable listing, one op per line.
    pub fn listing(&self) -> String {
        let mut s = format!("program {} (nodes {}, root on node {})\n", self.name, self.nodes, self.root_node);
        for (i, r) in self.routines.iter().enumerate() {
            s.push_str(&format!("routine {i}:\n"));
            for (pc, op) in r.ops.iter().enumerate() {
                s.push_str(&format!("  {pc:3}: {op:?}\n"));
            }
        }
        s
    }
}
