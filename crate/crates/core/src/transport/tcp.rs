//! Multi-process backend: one process per node, one TCP connection per
//! node pair, frames as laid out in [`wire`](super::wire).
//!
//! Each process runs a scheduler thread for its tasks, a reader thread and
//! a writer thread per peer, and a control listener answering `stats` and
//! `shutdown` lines. Node state sits behind one mutex; a task releases it
//! while it waits for a reply, so the responder keeps serving peers.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::addressing::NodeId;
use crate::error::{Error, Result};
use crate::runtime::node::{NodeConfig, NodeRuntime, NodeStats};
use crate::runtime::task::{TaskId, Value};
use crate::runtime::{self, Env};
use crate::transport::wire::{self, FLAG_REPLY, FLAG_WANTS_REPLY};
use crate::transport::{Body, Counters, Fabric};
use crate::verifier::interp::{ExecLog, LogDigest};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Peer {
    pub host: String,
    pub data_port: u16,
    pub control_port: u16,
}

/// Snapshot returned by the `stats` control command.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSnapshot {
    pub node: NodeId,
    pub counters: Counters,
    pub stats: NodeStats,
    pub heap_used: u64,
    pub live_objects: usize,
    pub cache_entries: usize,
    pub tasks: usize,
    pub heartbeats_seen: u64,
}

impl NodeSnapshot {
    pub fn of(n: &NodeRuntime) -> Self {
        NodeSnapshot {
            node: n.id,
            counters: n.counters.clone(),
            stats: n.stats.clone(),
            heap_used: n.heap.used(),
            live_objects: n.heap.live_count(),
            cache_entries: n.cache.len(),
            tasks: n.tasks.len(),
            heartbeats_seen: n.controller.as_ref().map_or(0, |c| c.heartbeats),
        }
    }
}

type Pending = HashMap<u32, (NodeId, Sender<Body>)>;

struct Shared {
    me: NodeId,
    nodes: u16,
    node: Mutex<NodeRuntime>,
    work: Condvar,
    out: Vec<Option<Mutex<Sender<Vec<u8>>>>>,
    pending: Mutex<Pending>,
    next_corr: AtomicU32,
    down: AtomicBool,
    timeout: Duration,
    /// Only this node's part of the run; cross-node ghost checks are off.
    log: Mutex<ExecLog>,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, NodeRuntime> {
        self.node.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Queues a frame for `dst`'s writer thread. Callers hold the node lock,
    /// which fixes the order of frames on each connection.
    fn push(&self, dst: NodeId, frame: Vec<u8>) -> Result<()> {
        let tx = self.out.get(dst as usize).and_then(|o| o.as_ref()).ok_or(Error::UnknownNode(dst))?;
        tx.lock().unwrap_or_else(|p| p.into_inner()).send(frame).map_err(|_| Error::NodeDown(dst))
    }

    /// Sends a one-way message; a message to self is handled in place.
    fn post(&self, n: &mut NodeRuntime, dst: NodeId, body: Body) -> Result<()> {
        if dst == self.me {
            let h = n.handle(self.me, body);
            for (d, b) in h.outbox {
                self.post(n, d, b)?;
            }
            return Ok(());
        }
        let frame = wire::encode_frame(body.kind(), self.me, dst, 0, 0, &body)?;
        n.counters.on_send(body.kind(), false, self.me, dst, frame.len() as u64);
        if let Body::Invalidate { bases } = &body {
            // Notices count as delivered once handed to the connection.
            for &b in bases {
                n.heap.notice_delivered(b);
            }
        }
        self.push(dst, frame)
    }
}

/// [`Fabric`] over the TCP backend. Holds the node lock between requests.
pub struct TcpFabric<'a> {
    sh: &'a Shared,
    guard: Option<MutexGuard<'a, NodeRuntime>>,
    task: Option<TaskId>,
}

impl<'a> TcpFabric<'a> {
    fn new(sh: &'a Shared, guard: Option<MutexGuard<'a, NodeRuntime>>, task: Option<TaskId>) -> Self {
        TcpFabric { sh, guard, task }
    }

    fn ensure(&mut self) -> &mut NodeRuntime {
        if self.guard.is_none() {
            self.guard = Some(self.sh.lock());
        }
        self.guard.as_mut().unwrap()
    }
}

impl Fabric for TcpFabric<'_> {
    fn me(&self) -> NodeId {
        self.sh.me
    }

    fn node(&mut self) -> &mut NodeRuntime {
        self.ensure()
    }

    fn request(&mut self, dst: NodeId, body: Body) -> Result<Body> {
        let sh = self.sh;
        if dst >= sh.nodes || dst == sh.me {
            return Err(Error::UnknownNode(dst));
        }
        let corr = sh.next_corr.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = mpsc::channel();
        sh.pending.lock().unwrap().insert(corr, (dst, tx));
        let frame = wire::encode_frame(body.kind(), sh.me, dst, FLAG_WANTS_REPLY, corr, &body)?;
        let n = self.ensure();
        n.counters.on_send(body.kind(), false, sh.me, dst, frame.len() as u64);
        sh.push(dst, frame)?;
        self.guard = None;
        match rx.recv_timeout(sh.timeout) {
            Ok(reply) => Ok(reply),
            Err(_) => {
                sh.pending.lock().unwrap().remove(&corr);
                Err(Error::NodeDown(dst))
            }
        }
    }

    fn send(&mut self, dst: NodeId, body: Body) -> Result<()> {
        let sh = self.sh;
        if dst >= sh.nodes {
            return Err(Error::UnknownNode(dst));
        }
        let n = self.ensure();
        sh.post(n, dst, body)
    }

    fn task(&self) -> Option<TaskId> {
        self.task
    }

    fn node_count(&self) -> u16 {
        self.sh.nodes
    }
}

/// A running node process.
pub struct TcpNode {
    sh: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
    control_port: u16,
}

pub struct TcpOptions {
    /// How long to wait for peers at startup and for replies afterwards.
    pub timeout: Duration,
    /// Scheduler quanta between heartbeats.
    pub heartbeat_every: u64,
}

impl Default for TcpOptions {
    fn default() -> Self {
        TcpOptions { timeout: Duration::from_secs(30), heartbeat_every: 10 }
    }
}

impl TcpNode {
    /// Binds, connects to every peer and starts the node's threads.
    /// Node `i` dials every lower index and accepts every higher one.
    pub fn start(peers: &[Peer], me: NodeId, cfg: NodeConfig, env: Env, opts: TcpOptions) -> Result<TcpNode> {
        let n = peers.len() as u16;
        if me >= n {
            return Err(Error::UnknownNode(me));
        }
        if cfg.map.node_count() != n {
            return Err(Error::Config(format!("config has {n} servers but partition map has {}", cfg.map.node_count())));
        }
        let my = &peers[me as usize];
        let listener = TcpListener::bind((my.host.as_str(), my.data_port))?;
        let control = TcpListener::bind((my.host.as_str(), my.control_port))?;
        let control_port = control.local_addr()?.port();
        let deadline = Instant::now() + opts.timeout;

        let mut streams: Vec<Option<TcpStream>> = (0..n).map(|_| None).collect();
        for j in 0..me {
            let p = &peers[j as usize];
            let s = loop {
                match TcpStream::connect((p.host.as_str(), p.data_port)) {
                    Ok(s) => break s,
                    Err(e) if Instant::now() < deadline => {
                        debug!("node {me}: waiting for node {j}: {e}");
                        thread::sleep(Duration::from_millis(50));
                    }
                    Err(_) => return Err(Error::NodeDown(j)),
                }
            };
            s.set_nodelay(true)?;
            (&s).write_all(&me.to_le_bytes())?;
            streams[j as usize] = Some(s);
        }
        listener.set_nonblocking(true)?;
        let mut missing = (me + 1..n).count();
        while missing > 0 {
            match listener.accept() {
                Ok((s, _)) => {
                    s.set_nonblocking(false)?;
                    s.set_nodelay(true)?;
                    let mut id = [0u8; 2];
                    (&s).read_exact(&mut id)?;
                    let j = u16::from_le_bytes(id);
                    if j <= me || j >= n || streams[j as usize].is_some() {
                        return Err(Error::Config(format!("node {me}: unexpected peer id {j}")));
                    }
                    streams[j as usize] = Some(s);
                    missing -= 1;
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    if Instant::now() > deadline {
                        return Err(Error::Config(format!("node {me}: {missing} peers never connected")));
                    }
                    thread::sleep(Duration::from_millis(20));
                }
                Err(e) => return Err(e.into()),
            }
        }
        info!("node {me}: connected to {} peers", n - 1);

        let mut out = Vec::with_capacity(n as usize);
        let mut writers = Vec::new();
        for s in &streams {
            match s {
                Some(s) => {
                    let (tx, rx) = mpsc::channel::<Vec<u8>>();
                    out.push(Some(Mutex::new(tx)));
                    writers.push((s.try_clone()?, rx));
                }
                None => out.push(None),
            }
        }
        let sh = Arc::new(Shared {
            me,
            nodes: n,
            node: Mutex::new(NodeRuntime::new(me, cfg)),
            work: Condvar::new(),
            out,
            pending: Mutex::new(HashMap::new()),
            next_corr: AtomicU32::new(1),
            down: AtomicBool::new(false),
            timeout: opts.timeout,
            log: Mutex::new(ExecLog::unchecked()),
        });

        let mut threads = Vec::new();
        for (s, rx) in writers {
            threads.push(thread::spawn(move || writer_loop(s, rx)));
        }
        for (j, s) in streams.into_iter().enumerate() {
            if let Some(s) = s {
                let sh = sh.clone();
                threads.push(thread::spawn(move || reader_loop(sh, j as NodeId, s)));
            }
        }
        {
            let sh = sh.clone();
            threads.push(thread::spawn(move || control_loop(sh, control)));
        }
        {
            let sh = sh.clone();
            let every = opts.heartbeat_every;
            threads.push(thread::spawn(move || scheduler_loop(sh, env, every)));
        }
        Ok(TcpNode { sh, threads, control_port })
    }

    pub fn me(&self) -> NodeId {
        self.sh.me
    }

    pub fn control_port(&self) -> u16 {
        self.control_port
    }

    /// Schedule hooks need the loopback backend.
    pub fn set_chooser(&self, _chooser: crate::transport::loopback::Chooser) -> Result<()> {
        Err(Error::HookUnsupported)
    }

    /// Runs driver code against this node, outside any task.
    pub fn with_fabric<R>(&self, body: impl FnOnce(&mut dyn Fabric) -> R) -> R {
        let mut f = TcpFabric::new(&self.sh, None, None);
        let r = body(&mut f);
        drop(f);
        self.sh.work.notify_all();
        r
    }

    /// Waits for a root task spawned by driver code on this node.
    pub fn wait_result(&self, task: TaskId, timeout: Duration) -> Result<Value> {
        let deadline = Instant::now() + timeout;
        let mut g = self.sh.lock();
        loop {
            if let Some(v) = g.join_results.remove(&task) {
                return Ok(v);
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(Error::Task(format!("{task} did not finish within {timeout:?}")));
            }
            g = self.sh.work.wait_timeout(g, left.min(Duration::from_millis(50))).unwrap().0;
        }
    }

    /// Waits until no task runs here and nothing has arrived for `quiet`.
    pub fn wait_idle(&self, quiet: Duration, timeout: Duration) -> Result<()> {
        let deadline = Instant::now() + timeout;
        let mut last = (u64::MAX, u64::MAX);
        let mut since = Instant::now();
        loop {
            let (busy, seen) = {
                let g = self.sh.lock();
                (!g.tasks.is_empty(), (g.counters.total_received(), g.counters.total_sent()))
            };
            if busy || seen != last {
                last = seen;
                since = Instant::now();
            } else if since.elapsed() >= quiet {
                return Ok(());
            }
            if Instant::now() > deadline {
                return Err(Error::Task("node never went idle".into()));
            }
            thread::sleep(Duration::from_millis(10));
        }
    }

    pub fn snapshot(&self) -> NodeSnapshot {
        NodeSnapshot::of(&self.sh.lock())
    }

    pub fn digest(&self) -> LogDigest {
        self.sh.log.lock().unwrap_or_else(|p| p.into_inner()).digest()
    }

    pub fn inspect<R>(&self, body: impl FnOnce(&NodeRuntime) -> R) -> R {
        body(&self.sh.lock())
    }

    pub fn is_shut_down(&self) -> bool {
        self.sh.down.load(Ordering::SeqCst)
    }

    /// Blocks until a `shutdown` control command arrives.
    pub fn wait_shutdown(&self) {
        let mut g = self.sh.lock();
        while !self.is_shut_down() {
            g = self.sh.work.wait_timeout(g, Duration::from_millis(100)).unwrap().0;
        }
    }

    pub fn shutdown(self) {
        self.sh.down.store(true, Ordering::SeqCst);
        self.sh.work.notify_all();
        // Readers and writers end when the peer processes close their sockets.
        drop(self.threads);
    }
}

fn writer_loop(mut s: TcpStream, rx: Receiver<Vec<u8>>) {
    for frame in rx {
        if let Err(e) = wire::write_frame(&mut s, &frame) {
            debug!("writer: {e}");
            return;
        }
    }
}

fn reader_loop(sh: Arc<Shared>, peer: NodeId, s: TcpStream) {
    let mut r = BufReader::new(s);
    loop {
        let (h, body) = match wire::read_frame(&mut r) {
            Ok(x) => x,
            Err(e) => {
                if !sh.down.load(Ordering::SeqCst) {
                    warn!("node {}: connection to node {peer} lost: {e}", sh.me);
                }
                let mut p = sh.pending.lock().unwrap();
                let dead: Vec<u32> = p.iter().filter(|(_, (d, _))| *d == peer).map(|(c, _)| *c).collect();
                for c in dead {
                    if let Some((_, tx)) = p.remove(&c) {
                        let _ = tx.send(Body::Fail(Error::NodeDown(peer)));
                    }
                }
                return;
            }
        };
        if h.src != peer || h.dst != sh.me {
            warn!("node {}: misrouted frame {h:?}", sh.me);
            continue;
        }
        let mut n = sh.lock();
        if h.is_reply() {
            n.counters.on_receive(h.kind, true);
            drop(n);
            if let Some((_, tx)) = sh.pending.lock().unwrap().remove(&h.corr) {
                let _ = tx.send(body);
            }
            continue;
        }
        n.counters.on_receive(h.kind, false);
        let handled = n.handle(peer, body);
        for (d, b) in handled.outbox {
            if let Err(e) = sh.post(&mut n, d, b) {
                warn!("node {}: outbox to {d}: {e}", sh.me);
            }
        }
        if h.wants_reply() {
            let reply = handled.reply.unwrap_or(Body::Ack);
            match wire::encode_frame(h.kind, sh.me, peer, FLAG_REPLY, h.corr, &reply) {
                Ok(frame) => {
                    n.counters.on_send(h.kind, true, sh.me, peer, frame.len() as u64);
                    let _ = sh.push(peer, frame);
                }
                Err(e) => warn!("node {}: reply encoding: {e}", sh.me),
            }
        } else if let Some(Body::Fail(e)) = handled.reply {
            warn!("node {}: one-way {:?} from {peer} failed: {e}", sh.me, h.kind);
        }
        drop(n);
        sh.work.notify_all();
    }
}

fn scheduler_loop(sh: Arc<Shared>, env: Env, heartbeat_every: u64) {
    let mut quanta = 0u64;
    let mut last_beat = Instant::now();
    loop {
        let mut g = sh.lock();
        let task = loop {
            if sh.down.load(Ordering::SeqCst) {
                return;
            }
            if let Some(&t) = g.run_queue.front() {
                break Some(t);
            }
            if last_beat.elapsed() > Duration::from_millis(100) {
                break None;
            }
            g = sh.work.wait_timeout(g, Duration::from_millis(20)).unwrap().0;
        };
        let mut f = TcpFabric::new(&sh, Some(g), task);
        if let Some(t) = task {
            quanta += 1;
            let mut log = sh.log.lock().unwrap_or_else(|p| p.into_inner());
            if let Err(e) = runtime::run_step(&mut f, &env, &mut log, t) {
                warn!("node {}: step of {t}: {e}", sh.me);
            }
        }
        let beat = match task {
            Some(_) => heartbeat_every > 0 && quanta.is_multiple_of(heartbeat_every),
            None => true,
        };
        if beat {
            last_beat = Instant::now();
            f.task = None;
            if let Err(e) = runtime::heartbeat(&mut f) {
                debug!("node {}: heartbeat: {e}", sh.me);
            }
            if sh.me == 0 {
                if let Err(e) = runtime::rebalance(&mut f) {
                    warn!("rebalance: {e}");
                }
            }
        }
        drop(f);
        sh.work.notify_all();
    }
}

fn control_loop(sh: Arc<Shared>, listener: TcpListener) {
    for conn in listener.incoming() {
        let Ok(s) = conn else { continue };
        let mut w = match s.try_clone() {
            Ok(w) => w,
            Err(_) => continue,
        };
        let mut line = String::new();
        if BufReader::new(s).read_line(&mut line).is_err() {
            continue;
        }
        let reply = match line.trim() {
            "stats" => serde_json::to_string(&NodeSnapshot::of(&sh.lock())).unwrap_or_default(),
            "log" => {
                let d = sh.log.lock().unwrap_or_else(|p| p.into_inner()).digest();
                serde_json::to_string(&d).unwrap_or_default()
            }
            "shutdown" => {
                sh.down.store(true, Ordering::SeqCst);
                sh.work.notify_all();
                "ok".to_string()
            }
            other => format!("error: unknown command `{other}`"),
        };
        let _ = writeln!(w, "{reply}");
        if sh.down.load(Ordering::SeqCst) {
            return;
        }
    }
}

/// Sends one control command to a node and returns its one-line answer.
pub fn control(host: &str, port: u16, command: &str) -> Result<String> {
    let mut s = TcpStream::connect((host, port))?;
    s.set_read_timeout(Some(Duration::from_secs(10)))?;
    writeln!(s, "{command}")?;
    let mut line = String::new();
    BufReader::new(s).read_line(&mut line)?;
    Ok(line.trim_end().to_string())
}

pub fn remote_digest(host: &str, port: u16) -> Result<LogDigest> {
    let line = control(host, port, "log")?;
    serde_json::from_str(&line).map_err(|e| Error::Codec(format!("{e}: {line}")))
}

pub fn remote_snapshot(host: &str, port: u16) -> Result<NodeSnapshot> {
    let line = control(host, port, "stats")?;
    serde_json::from_str(&line).map_err(|e| Error::Codec(format!("{e}: {line}")))
}

