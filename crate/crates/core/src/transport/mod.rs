//! Inter-node messaging.
//!
//! Protocol code talks to other nodes only through the [`Fabric`] trait,
//! which both the in-process loopback cluster and the TCP backend
//! implement. Requests to the calling node itself are handled in place
//! and never counted as messages.

pub mod loopback;
pub mod tcp;
pub mod wire;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::addressing::{GlobalAddr, NodeId};
use crate::error::{Error, Result};
use crate::heap::ObjectImage;
use crate::runtime::controller::{Answer, NodeReport, Query};
use crate::runtime::node::NodeRuntime;
use crate::runtime::sync::{AtomicOp, ChanMsg, MutexMsg};
use crate::runtime::task::{TaskDescriptor, TaskId, TaskRecord, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u16)]
pub enum MessageKind {
    FetchCopy = 1,
    MoveFetch = 2,
    DeallocRequest = 3,
    OwnerWriteBack = 4,
    InvalidateNotice = 5,
    AllocRequest = 6,
    AtomicOp = 7,
    MutexOp = 8,
    ChannelData = 9,
    SpawnTask = 10,
    MigrateTask = 11,
    ControllerQuery = 12,
    ControllerReply = 13,
    Heartbeat = 14,
}

impl MessageKind {
    pub const ALL: [MessageKind; 14] = [
        MessageKind::FetchCopy,
        MessageKind::MoveFetch,
        MessageKind::DeallocRequest,
        MessageKind::OwnerWriteBack,
        MessageKind::InvalidateNotice,
        MessageKind::AllocRequest,
        MessageKind::AtomicOp,
        MessageKind::MutexOp,
        MessageKind::ChannelData,
        MessageKind::SpawnTask,
        MessageKind::MigrateTask,
        MessageKind::ControllerQuery,
        MessageKind::ControllerReply,
        MessageKind::Heartbeat,
    ];

    pub fn code(self) -> u16 {
        self as u16
    }

    pub fn from_code(code: u16) -> Result<Self> {
        Self::ALL
            .get((code as usize).wrapping_sub(1))
            .copied()
            .ok_or_else(|| Error::Codec(format!("unknown message kind {code}")))
    }

    fn index(self) -> usize {
        self as usize - 1
    }

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::FetchCopy => "FetchCopy",
            MessageKind::MoveFetch => "MoveFetch",
            MessageKind::DeallocRequest => "DeallocRequest",
            MessageKind::OwnerWriteBack => "OwnerWriteBack",
            MessageKind::InvalidateNotice => "InvalidateNotice",
            MessageKind::AllocRequest => "AllocRequest",
            MessageKind::AtomicOp => "AtomicOp",
            MessageKind::MutexOp => "MutexOp",
            MessageKind::ChannelData => "ChannelData",
            MessageKind::SpawnTask => "SpawnTask",
            MessageKind::MigrateTask => "MigrateTask",
            MessageKind::ControllerQuery => "ControllerQuery",
            MessageKind::ControllerReply => "ControllerReply",
            MessageKind::Heartbeat => "Heartbeat",
        }
    }

    /// Kind stamped on the reply to a request of this kind.
    pub fn reply_kind(self) -> MessageKind {
        match self {
            MessageKind::ControllerQuery => MessageKind::ControllerReply,
            k => k,
        }
    }

    /// Control-plane bookkeeping that is timing-dependent on a real network.
    pub fn is_housekeeping(self) -> bool {
        matches!(self, MessageKind::ControllerQuery | MessageKind::ControllerReply | MessageKind::Heartbeat)
    }
}

/// Message payloads. Requests, one-way notices and replies share one type;
/// [`Body::kind`] gives the wire kind of a non-reply body.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Body {
    /// Copy of an object and its tie group.
    Fetch { base: u64 },
    /// Same, on behalf of a mover that will deallocate the original.
    MoveOut { base: u64 },
    Images(Vec<ObjectImage>),
    Dealloc { base: u64 },
    WriteBack { slot: u64, g: GlobalAddr, update: bool },
    WriteBytes { base: u64, offset: u64, bytes: Vec<u8> },
    Invalidate { bases: Vec<u64> },
    /// Allocation on the receiving node; `tie` names a group root and the
    /// path to the parent the new object is tied to.
    Alloc { size: u64, tie: Option<(u64, Vec<u32>)>, task: Option<TaskId> },
    Allocated { base: u64, seq: u64, index: u32 },
    Atomic { base: u64, op: AtomicOp },
    Mutex(MutexMsg),
    Channel(ChanMsg),
    Spawn(TaskDescriptor),
    TaskDone { child: TaskId, value: Value },
    MigrateOrder { task: TaskId, dest: NodeId },
    MigrateShip(Box<TaskRecord>),
    Query(Query),
    Answer(Answer),
    Heartbeat(NodeReport),
    Ack,
    Word(u64),
    Fail(Error),
}

impl Body {
    pub fn kind(&self) -> MessageKind {
        match self {
            Body::Fetch { .. } | Body::Images(_) => MessageKind::FetchCopy,
            Body::MoveOut { .. } => MessageKind::MoveFetch,
            Body::Dealloc { .. } => MessageKind::DeallocRequest,
            Body::WriteBack { .. } | Body::WriteBytes { .. } => MessageKind::OwnerWriteBack,
            Body::Invalidate { .. } => MessageKind::InvalidateNotice,
            Body::Alloc { .. } | Body::Allocated { .. } => MessageKind::AllocRequest,
            Body::Atomic { .. } => MessageKind::AtomicOp,
            Body::Mutex(_) => MessageKind::MutexOp,
            Body::Channel(_) => MessageKind::ChannelData,
            Body::Spawn(_) | Body::TaskDone { .. } => MessageKind::SpawnTask,
            Body::MigrateOrder { .. } | Body::MigrateShip(_) => MessageKind::MigrateTask,
            Body::Query(_) => MessageKind::ControllerQuery,
            Body::Answer(_) => MessageKind::ControllerReply,
            Body::Heartbeat(_) => MessageKind::Heartbeat,
            Body::Ack | Body::Word(_) | Body::Fail(_) => MessageKind::ControllerReply,
        }
    }

    /// Turns a `Fail` reply into an error.
    pub fn into_result(self) -> Result<Body> {
        match self {
            Body::Fail(e) => Err(e),
            b => Ok(b),
        }
    }

    pub fn encoded_len(&self) -> u64 {
        serde_json::to_vec(self).map(|v| v.len() as u64).unwrap_or(0)
    }
}

pub fn unexpected(b: &Body) -> Error {
    Error::UnexpectedReply(format!("{b:?}").chars().take(120).collect())
}

/// Per-kind tallies kept by every node. Replies are counted under the kind
/// of the request they answer.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub sent: [u64; 14],
    pub received: [u64; 14],
    pub replies_sent: [u64; 14],
    pub replies_received: [u64; 14],
    /// Header plus payload bytes sent, by (src, dst).
    #[serde(with = "pair_keys")]
    pub bytes: BTreeMap<(NodeId, NodeId), u64>,
}

/// JSON maps need string keys; tuple-keyed maps travel as entry lists.
pub mod pair_keys {
    use std::collections::BTreeMap;

    use serde::de::DeserializeOwned;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<K: Serialize, V: Serialize, S: Serializer>(m: &BTreeMap<K, V>, s: S) -> Result<S::Ok, S::Error> {
        m.iter().collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, K, V, D>(d: D) -> Result<BTreeMap<K, V>, D::Error>
    where
        K: DeserializeOwned + Ord,
        V: DeserializeOwned,
        D: Deserializer<'de>,
    {
        Ok(Vec::<(K, V)>::deserialize(d)?.into_iter().collect())
    }
}

impl Counters {
    pub fn on_send(&mut self, kind: MessageKind, reply: bool, src: NodeId, dst: NodeId, bytes: u64) {
        if reply {
            self.replies_sent[kind.index()] += 1;
        } else {
            self.sent[kind.index()] += 1;
        }
        *self.bytes.entry((src, dst)).or_default() += bytes;
    }

    pub fn on_receive(&mut self, kind: MessageKind, reply: bool) {
        if reply {
            self.replies_received[kind.index()] += 1;
        } else {
            self.received[kind.index()] += 1;
        }
    }

    pub fn sent_of(&self, kind: MessageKind) -> u64 {
        self.sent[kind.index()]
    }

    pub fn received_of(&self, kind: MessageKind) -> u64 {
        self.received[kind.index()]
    }

    pub fn replies_of(&self, kind: MessageKind) -> u64 {
        self.replies_sent[kind.index()]
    }

    /// Every message put on the wire, replies included.
    pub fn total_sent(&self) -> u64 {
        self.sent.iter().chain(&self.replies_sent).sum()
    }

    pub fn total_received(&self) -> u64 {
        self.received.iter().chain(&self.replies_received).sum()
    }

    pub fn merge(&mut self, other: &Counters) {
        for i in 0..14 {
            self.sent[i] += other.sent[i];
            self.received[i] += other.received[i];
            self.replies_sent[i] += other.replies_sent[i];
            self.replies_received[i] += other.replies_received[i];
        }
        for (k, v) in &other.bytes {
            *self.bytes.entry(*k).or_default() += v;
        }
    }

    /// Request/notice counts keyed by kind name, zeros omitted.
    pub fn by_kind(&self) -> BTreeMap<&'static str, u64> {
        MessageKind::ALL
            .iter()
            .filter(|k| self.sent_of(**k) > 0)
            .map(|k| (k.name(), self.sent_of(*k)))
            .collect()
    }

    /// Difference `self - earlier`, for measuring a window.
    pub fn since(&self, earlier: &Counters) -> Counters {
        let mut out = self.clone();
        for i in 0..14 {
            out.sent[i] -= earlier.sent[i];
            out.received[i] -= earlier.received[i];
            out.replies_sent[i] -= earlier.replies_sent[i];
            out.replies_received[i] -= earlier.replies_received[i];
        }
        for (k, v) in &earlier.bytes {
            if let Some(x) = out.bytes.get_mut(k) {
                *x -= v;
            }
        }
        out
    }
}

/// A node's view of the cluster, as seen by protocol code.
pub trait Fabric {
    fn me(&self) -> NodeId;
    /// This node's state. Never hold the borrow across `request`.
    fn node(&mut self) -> &mut NodeRuntime;
    /// Round trip to another node. `Fail` replies are returned as-is.
    fn request(&mut self, dst: NodeId, body: Body) -> Result<Body>;
    /// One-way message to another node.
    fn send(&mut self, dst: NodeId, body: Body) -> Result<()>;
    /// Task on whose behalf messages are being sent.
    fn task(&self) -> Option<TaskId>;
    fn node_count(&self) -> u16;
}

/// Request/reply that short-circuits when `dst` is the calling node.
pub fn call(f: &mut dyn Fabric, dst: NodeId, body: Body) -> Result<Body> {
    let me = f.me();
    if dst == me {
        let h = f.node().handle(me, body);
        flush(f, h.outbox)?;
        return h.reply.unwrap_or(Body::Ack).into_result();
    }
    if dst >= f.node_count() {
        return Err(Error::UnknownNode(dst));
    }
    if let Some(t) = f.task() {
        f.node().note_request(t, dst);
    }
    f.request(dst, body)?.into_result()
}

/// One-way delivery; handled in place when `dst` is the calling node.
pub fn post(f: &mut dyn Fabric, dst: NodeId, body: Body) -> Result<()> {
    let me = f.me();
    if dst == me {
        let h = f.node().handle(me, body);
        return flush(f, h.outbox);
    }
    if dst >= f.node_count() {
        return Err(Error::UnknownNode(dst));
    }
    f.send(dst, body)
}

/// Sends `body` to every node except the caller.
pub fn broadcast(f: &mut dyn Fabric, body: Body) -> Result<()> {
    let me = f.me();
    for n in 0..f.node_count() {
        if n != me {
            f.send(n, body.clone())?;
        }
    }
    Ok(())
}

pub fn flush(f: &mut dyn Fabric, outbox: Vec<(NodeId, Body)>) -> Result<()> {
    for (dst, body) in outbox {
        post(f, dst, body)?;
    }
    Ok(())
}
