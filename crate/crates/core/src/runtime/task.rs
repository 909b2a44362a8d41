//! Task descriptors, resumable frames and the values tasks hold.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::addressing::NodeId;
use crate::protocol::handles::{
    DetachedOwner, ExclusiveHandle, OwnerHandle, ProjectedHandle, SharedHandle, TiedHandle,
};
use crate::runtime::sync::{ChanRef, CountedHandle, Guard, MutexRef, StackRef};

/// Tasks are named by the node that created them plus a per-node counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TaskId {
    pub node: NodeId,
    pub seq: u32,
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}.{}", self.node, self.seq)
    }
}

/// Index into the registered task-function table.
pub type FnId = u32;

/// Anything a task can hold in a variable or pass to another task.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Value {
    #[default]
    Unit,
    Word(u64),
    Bytes(Vec<u8>),
    Owner(OwnerHandle),
    /// An owner being shipped to another task; attached on arrival.
    InTransit(DetachedOwner),
    Shared(SharedHandle),
    Exclusive(ExclusiveHandle),
    /// Tied child of the owner held in variable `root`.
    Tied { root: u32, handle: TiedHandle },
    Projected(ProjectedHandle),
    Counted(CountedHandle),
    Stack(StackRef),
    Join(TaskId),
    Chan(ChanRef),
    Mutex(MutexRef),
    Guard(Guard),
    Failed(String),
}

impl Value {
    pub fn word(&self) -> Option<u64> {
        match self {
            Value::Word(w) => Some(*w),
            _ => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Value::Unit => "unit",
            Value::Word(_) => "word",
            Value::Bytes(_) => "bytes",
            Value::Owner(_) => "owner",
            Value::InTransit(_) => "owner-in-transit",
            Value::Shared(_) => "shared",
            Value::Exclusive(_) => "exclusive",
            Value::Tied { .. } => "tied",
            Value::Projected(_) => "projected",
            Value::Counted(_) => "counted",
            Value::Stack(_) => "stack",
            Value::Join(_) => "join",
            Value::Chan(_) => "chan",
            Value::Mutex(_) => "mutex",
            Value::Guard(_) => "guard",
            Value::Failed(_) => "failed",
        }
    }
}

/// Resumption state saved at every yield point.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub struct Frame {
    /// Selects a sub-routine inside the function (a program task index for
    /// the interpreter).
    pub routine: u32,
    pub pc: u32,
    pub vars: Vec<Value>,
    /// Set while a lock or receive request is parked at the host.
    pub waiting: bool,
}

impl Frame {
    pub fn new(routine: u32, vars: Vec<Value>) -> Self {
        Frame { routine, pc: 0, vars, waiting: false }
    }

    pub fn var(&self, i: u32) -> &Value {
        self.vars.get(i as usize).unwrap_or(&Value::Unit)
    }

    pub fn set(&mut self, i: u32, v: Value) {
        let i = i as usize;
        if self.vars.len() <= i {
            self.vars.resize(i + 1, Value::Unit);
        }
        self.vars[i] = v;
    }

    pub fn take(&mut self, i: u32) -> Value {
        match self.vars.get_mut(i as usize) {
            Some(v) => std::mem::take(v),
            None => Value::Unit,
        }
    }
}

/// What a task asks of the scheduler after one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    Yield,
    Block(Wait),
    Done(Value),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Wait {
    Join(TaskId),
    Lock(MutexRef),
    Recv(ChanRef),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskState {
    Runnable,
    Blocked(Wait),
}

/// Everything needed to start a task on any node.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskDescriptor {
    pub id: TaskId,
    pub func: FnId,
    pub frame: Frame,
    /// Node that receives the completion notice.
    pub reply_to: NodeId,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskRecord {
    pub desc: TaskDescriptor,
    pub state: TaskState,
    /// Value delivered by a wake-up (lock grant, channel delivery).
    pub mailbox: Option<Value>,
    /// Requests issued on the task's behalf, by destination node.
    pub remote_requests: BTreeMap<NodeId, u64>,
    /// Requests since the last heartbeat window closed.
    pub window_requests: u64,
    /// Children spawned but not yet joined.
    pub outstanding: u32,
    pub steps: u64,
}

impl TaskRecord {
    pub fn new(desc: TaskDescriptor) -> Self {
        TaskRecord {
            desc,
            state: TaskState::Runnable,
            mailbox: None,
            remote_requests: BTreeMap::new(),
            window_requests: 0,
            outstanding: 0,
            steps: 0,
        }
    }

    pub fn id(&self) -> TaskId {
        self.desc.id
    }

    pub fn is_runnable(&self) -> bool {
        self.state == TaskState::Runnable
    }

    /// Node this task talks to most, if it has made any requests.
    pub fn most_accessed(&self) -> Option<NodeId> {
        self.remote_requests.iter().max_by_key(|(n, c)| (**c, std::cmp::Reverse(**n))).map(|(n, _)| *n)
    }
}
