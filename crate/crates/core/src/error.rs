use serde::{Deserialize, Serialize};

use crate::addressing::{GlobalAddr, NodeId};
use crate::runtime::task::TaskId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize, thiserror::Error)]
pub enum Error {
    #[error("null global address")]
    NullAddress,
    #[error("address {0:#x} is outside every node partition")]
    OutOfRange(u64),
    #[error("color {color} does not fit in {bits} color bits")]
    ColorOverflow { color: u64, bits: u8 },

    #[error("zero-sized allocation")]
    ZeroSize,
    #[error("node {node} partition cannot fit {size} bytes")]
    OutOfMemory { node: NodeId, size: u64 },
    #[error("no node in the cluster can fit {size} bytes")]
    ClusterExhausted { size: u64 },
    #[error("double free of base {0:#x}")]
    DoubleFree(u64),
    #[error("no allocation at base {0:#x}")]
    UnknownBase(u64),
    #[error("base {base:#x} belongs to node {owner}, not node {node}")]
    WrongNode { base: u64, owner: NodeId, node: NodeId },
    #[error("allocation at {0:#x} is dead")]
    DeadRecord(u64),
    #[error("access [{offset}, {offset}+{len}) outside object {base:#x} of size {size}")]
    OutOfBounds { base: u64, offset: u64, len: u64, size: u64 },
    #[error("object {0:#x} is already local")]
    AlreadyLocal(u64),

    #[error("release of {0} without a matching acquire")]
    ReleaseWithoutAcquire(GlobalAddr),
    #[error("no cache entry for {0}")]
    NotCached(GlobalAddr),
    #[error("single-writer/multiple-reader violation: {0}")]
    SwmrViolation(String),
    #[error("handle used after drop")]
    DeadHandle,

    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} is unreachable")]
    NodeDown(NodeId),
    #[error("schedule hooks are only supported by the loopback transport")]
    HookUnsupported,
    #[error("malformed frame: {0}")]
    Codec(String),
    #[error("unexpected reply: {0}")]
    UnexpectedReply(String),

    #[error("unknown task function {0}")]
    UnknownFunction(u32),
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("task {0} is not parked at a yield point")]
    TaskNotParked(TaskId),
    #[error("channel {0} is closed")]
    ChannelClosed(u32),
    #[error("mutex {0} unlocked by a task that does not hold it")]
    NotMutexHolder(u32),
    #[error("shared-count underflow on {0}")]
    CounterUnderflow(GlobalAddr),
    #[error("task {0} cannot migrate: {1}")]
    NotMigratable(TaskId, String),
    #[error("value of kind {0} cannot leave its task")]
    NotTransferable(String),
    #[error("task failed: {0}")]
    Task(String),

    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
