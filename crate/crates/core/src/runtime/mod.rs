//! Node runtime services: allocation policy, task spawning and joining,
//! the step executor shared by both cluster backends, heartbeats and
//! controller-driven migration.

pub mod controller;
pub mod node;
pub mod sync;
pub mod task;

use std::sync::Arc;

use log::warn;

use crate::addressing::{GlobalAddr, NodeId};
use crate::error::{Error, Result};
use crate::protocol::handles::{ObjId, OwnerHandle};
use crate::runtime::controller::{Answer, Migration, Query};
use crate::runtime::task::{FnId, Frame, Step, TaskDescriptor, TaskId, TaskState, Value, Wait};
use crate::transport::{call, post, unexpected, Body, Fabric};
use crate::verifier::interp::ExecLog;

/// Signature of a registered task body. One call runs the task up to its
/// next yield point.
pub type TaskFn = fn(&mut TaskCtx<'_>, &mut Frame) -> Result<Step>;

/// Function table shared by every node (stands in for shipping closures).
#[derive(Clone, Default)]
pub struct Registry {
    fns: Vec<(FnId, &'static str, TaskFn)>,
}

impl Registry {
    pub fn register(&mut self, id: FnId, name: &'static str, f: TaskFn) {
        self.fns.retain(|(i, _, _)| *i != id);
        self.fns.push((id, name, f));
    }

    pub fn get(&self, id: FnId) -> Result<TaskFn> {
        self.fns.iter().find(|(i, _, _)| *i == id).map(|(_, _, f)| *f).ok_or(Error::UnknownFunction(id))
    }

    pub fn contains(&self, id: FnId) -> bool {
        self.get(id).is_ok()
    }
}

/// Read-only context shared by all tasks of a run.
#[derive(Clone, Default)]
pub struct Env {
    pub registry: Registry,
    pub program: Option<Arc<crate::verifier::program::ProtoProgram>>,
}

impl Env {
    /// Environment with the program interpreter registered.
    pub fn with_program(program: crate::verifier::program::ProtoProgram) -> Self {
        let mut registry = Registry::default();
        registry.register(crate::verifier::interp::INTERP_FN, "interp", crate::verifier::interp::step);
        Env { registry, program: Some(Arc::new(program)) }
    }
}

/// What a task body sees while it runs.
pub struct TaskCtx<'a> {
    pub f: &'a mut dyn Fabric,
    pub task: TaskId,
    pub env: &'a Env,
    pub log: &'a mut ExecLog,
}

impl TaskCtx<'_> {
    pub fn take_mailbox(&mut self) -> Option<Value> {
        let t = self.task;
        self.f.node().tasks.get_mut(&t).and_then(|r| r.mailbox.take())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    /// Controller picks the least-loaded node.
    Auto,
    Node(NodeId),
    /// Wherever the object at this address lives.
    Near(GlobalAddr),
}

// ---- allocation ----

/// Allocates locally while the partition is below the pressure threshold,
/// otherwise on the node the controller considers most vacant.
pub fn allocate(f: &mut dyn Fabric, size: u64) -> Result<OwnerHandle> {
    if size == 0 {
        return Err(Error::ZeroSize);
    }
    let me = f.me();
    let node = f.node();
    node.relieve_pressure(size);
    let target = if node.below_pressure(size) {
        me
    } else {
        match call(f, 0, Body::Query(Query::PlaceAlloc { size }))? {
            Body::Answer(Answer::Node(Some(n))) => n,
            Body::Answer(Answer::Node(None)) => return Err(Error::ClusterExhausted { size }),
            b => return Err(unexpected(&b)),
        }
    };
    let (g, ident) = alloc_on(f, target, size)?;
    Ok(f.node().new_slot(g, ident))
}

/// Raw allocation on a chosen node; returns the color-0 address.
pub fn alloc_on(f: &mut dyn Fabric, node: NodeId, size: u64) -> Result<(GlobalAddr, ObjId)> {
    if node == f.me() {
        let task = f.task();
        let n = f.node();
        let base = n.heap.alloc_tagged(size, None, task)?;
        n.stats.local_allocs += 1;
        return Ok((GlobalAddr::from_base(base), (node, n.heap.tag_of(base)?.seq)));
    }
    let task = f.task();
    match call(f, node, Body::Alloc { size, tie: None, task })? {
        Body::Allocated { base, seq, .. } => Ok((GlobalAddr::from_base(base), (node, seq))),
        b => Err(unexpected(&b)),
    }
}

// ---- tasks ----

pub fn spawn(f: &mut dyn Fabric, func: FnId, frame: Frame, placement: Placement) -> Result<TaskId> {
    let id = f.node().mint_task();
    let map = f.node().cfg.map;
    let target = match placement {
        Placement::Auto => match call(f, 0, Body::Query(Query::PlaceSpawn { task: id }))? {
            Body::Answer(Answer::Node(Some(n))) => n,
            Body::Answer(Answer::NotController) | Body::Answer(Answer::Node(None)) => f.me(),
            b => return Err(unexpected(&b)),
        },
        Placement::Node(n) => {
            map.check_node(n)?;
            n
        }
        Placement::Near(g) => map.node_of(g)?,
    };
    let mut frame = frame;
    let vars = std::mem::take(&mut frame.vars);
    let mut detached = Vec::with_capacity(vars.len());
    for v in vars {
        detached.push(f.node().detach_value(v)?);
    }
    frame.vars = detached;
    if let Some(parent) = f.task() {
        if let Some(t) = f.node().tasks.get_mut(&parent) {
            t.outstanding += 1;
        }
    }
    let desc = TaskDescriptor { id, func, frame, reply_to: f.me() };
    post(f, target, Body::Spawn(desc))?;
    Ok(id)
}

/// Runs on the node hosting `locator`.
pub fn spawn_to(f: &mut dyn Fabric, locator: GlobalAddr, func: FnId, frame: Frame) -> Result<TaskId> {
    if locator.is_null() {
        return Err(Error::NullAddress);
    }
    spawn(f, func, frame, Placement::Near(locator))
}

/// Takes a finished child's result, if it has arrived on this node.
pub fn try_join(f: &mut dyn Fabric, child: TaskId) -> Option<Value> {
    let v = f.node().join_results.remove(&child)?;
    if let Some(parent) = f.task() {
        if let Some(t) = f.node().tasks.get_mut(&parent) {
            t.outstanding = t.outstanding.saturating_sub(1);
        }
    }
    Some(v)
}

/// Result of running one step of one task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Yielded,
    Blocked(Wait),
    Finished(Value),
}

/// Executes one step of `task`, which must be runnable on this node.
pub fn run_step(f: &mut dyn Fabric, env: &Env, log: &mut ExecLog, task: TaskId) -> Result<Outcome> {
    let node = f.node();
    node.run_queue.retain(|t| *t != task);
    let rec = node.tasks.get_mut(&task).ok_or(Error::UnknownTask(task))?;
    if !rec.is_runnable() {
        return Err(Error::TaskNotParked(task));
    }
    rec.steps += 1;
    let func = rec.desc.func;
    let mut frame = std::mem::take(&mut rec.desc.frame);
    node.running = Some(task);
    node.stats.steps += 1;
    let result = match env.registry.get(func) {
        Ok(body) => {
            let mut ctx = TaskCtx { f, task, env, log };
            body(&mut ctx, &mut frame)
        }
        Err(e) => Err(e),
    };
    let node = f.node();
    node.running = None;
    let rec = node.tasks.get_mut(&task).ok_or(Error::UnknownTask(task))?;
    rec.desc.frame = frame;
    let outcome = match result {
        Ok(Step::Yield) => {
            node.run_queue.push_back(task);
            Outcome::Yielded
        }
        Ok(Step::Block(w)) => {
            // The wake-up may already have arrived during this step.
            let ready = match w {
                Wait::Join(c) => node.join_results.contains_key(&c),
                Wait::Lock(_) | Wait::Recv(_) => rec.mailbox.is_some(),
            };
            if ready {
                node.run_queue.push_back(task);
            } else {
                rec.state = TaskState::Blocked(w);
            }
            Outcome::Blocked(w)
        }
        Ok(Step::Done(v)) => Outcome::Finished(v),
        Err(e) => {
            warn!("task {task} failed: {e}");
            log.task_error(task, &e);
            Outcome::Finished(Value::Failed(e.to_string()))
        }
    };
    if let Outcome::Finished(v) = &outcome {
        let rec = f.node().tasks.remove(&task).unwrap();
        f.node().stats.tasks_done += 1;
        let value = f.node().detach_value(v.clone()).unwrap_or_else(|e| Value::Failed(e.to_string()));
        post(f, rec.desc.reply_to, Body::TaskDone { child: task, value })?;
    }
    Ok(outcome)
}

// ---- controller traffic ----

/// Sends this node's report to the controller and closes the remote-access
/// window.
pub fn heartbeat(f: &mut dyn Fabric) -> Result<()> {
    let report = f.node().report();
    f.node().reset_windows();
    post(f, 0, Body::Heartbeat(report))
}

/// Runs the load policies on node 0 and issues the resulting migrations.
pub fn rebalance(f: &mut dyn Fabric) -> Result<Vec<Migration>> {
    let me = f.node().report();
    let node = f.node();
    let c = node.controller.as_mut().ok_or_else(|| Error::Config("rebalance must run on node 0".into()))?;
    c.observe(me);
    let actions = c.rebalance_tick();
    for m in &actions {
        post(f, m.from, Body::MigrateOrder { task: m.task, dest: m.to })?;
    }
    Ok(actions)
}

/// Moves a parked task of this node to `dest`.
pub fn migrate(f: &mut dyn Fabric, task: TaskId, dest: NodeId) -> Result<()> {
    f.node().cfg.map.check_node(dest)?;
    if dest == f.me() {
        return Ok(());
    }
    let rec = f.node().pack_task(task)?;
    post(f, dest, Body::MigrateShip(Box::new(rec)))?;
    call(f, 0, Body::Query(Query::Record { task, node: dest }))?;
    Ok(())
}
