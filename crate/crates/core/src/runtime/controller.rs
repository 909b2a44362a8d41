//! Global controller, co-located with node 0: keeps a resource table fed
//! by heartbeats, places allocations and spawns, and decides migrations.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::addressing::{NodeId, PartitionMap};
use crate::runtime::task::TaskId;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSummary {
    pub id: TaskId,
    pub heap_bytes: u64,
    pub window_requests: u64,
    pub most_accessed: Option<NodeId>,
    pub migratable: bool,
}

/// One node's heartbeat payload.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeReport {
    pub node: NodeId,
    pub used: u64,
    pub capacity: u64,
    pub runnable: u32,
    pub tasks: Vec<TaskSummary>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Query {
    PlaceAlloc { size: u64 },
    PlaceSpawn { task: TaskId },
    Locate(TaskId),
    Record { task: TaskId, node: NodeId },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Answer {
    Node(Option<NodeId>),
    Ok,
    NotController,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reason {
    Memory,
    Cpu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Migration {
    pub task: TaskId,
    pub from: NodeId,
    pub to: NodeId,
    pub reason: Reason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policy {
    pub mem_pct: u64,
    pub cpu_pct: u64,
    pub cores: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Controller {
    pub map: PartitionMap,
    pub policy: Policy,
    pub table: BTreeMap<NodeId, NodeReport>,
    pub locations: BTreeMap<TaskId, NodeId>,
    /// Allocation placements, for auditing: (size, chosen node).
    pub alloc_log: Vec<(u64, NodeId)>,
    pub migrations: Vec<Migration>,
    pub warnings: u64,
    /// Heartbeats received from other nodes.
    pub heartbeats: u64,
}

impl Controller {
    pub fn new(map: PartitionMap, cores: u32) -> Self {
        Controller {
            map,
            policy: Policy { mem_pct: 90, cpu_pct: 90, cores: cores.max(1) },
            table: BTreeMap::new(),
            locations: BTreeMap::new(),
            alloc_log: Vec::new(),
            migrations: Vec::new(),
            warnings: 0,
            heartbeats: 0,
        }
    }

    pub fn observe(&mut self, r: NodeReport) {
        let node = r.node;
        // Tasks reported by this node run there; drop stale entries for it.
        self.locations.retain(|_, n| *n != node);
        for t in &r.tasks {
            self.locations.insert(t.id, node);
        }
        self.table.insert(node, r);
    }

    fn used(&self, n: NodeId) -> u64 {
        self.table.get(&n).map(|r| r.used).unwrap_or(0)
    }

    fn runnable(&self, n: NodeId) -> u32 {
        self.table.get(&n).map(|r| r.runnable).unwrap_or(0)
    }

    fn free(&self, n: NodeId) -> u64 {
        self.map.unit_size().saturating_sub(self.used(n))
    }

    pub fn mem_hot(&self, n: NodeId) -> bool {
        self.used(n) * 100 > self.map.unit_size() * self.policy.mem_pct
    }

    pub fn cpu_hot(&self, n: NodeId) -> bool {
        self.runnable(n) as u64 * 100 > self.policy.cores as u64 * self.policy.cpu_pct
    }

    fn overloaded(&self, n: NodeId) -> bool {
        self.mem_hot(n) || self.cpu_hot(n)
    }

    /// Most vacant node able to take `size` bytes, other than `requester`.
    pub fn place_alloc(&mut self, size: u64, requester: NodeId) -> Option<NodeId> {
        let cap = self.map.unit_size() * self.policy.mem_pct / 100;
        let choice = self
            .map
            .nodes()
            .filter(|&n| n != requester && self.used(n) + size <= cap)
            .max_by_key(|&n| (self.free(n), std::cmp::Reverse(n)));
        if let Some(n) = choice {
            // Account for it until the next heartbeat arrives.
            if let Some(r) = self.table.get_mut(&n) {
                r.used += size;
            }
            self.alloc_log.push((size, n));
        }
        choice
    }

    /// Least-loaded node by runnable count; ties go to the requester.
    pub fn place_spawn(&mut self, task: TaskId, requester: NodeId) -> NodeId {
        let best = self.map.nodes().map(|n| self.runnable(n)).min().unwrap_or(0);
        let n = if self.runnable(requester) == best {
            requester
        } else {
            self.map.nodes().find(|&n| self.runnable(n) == best).unwrap_or(requester)
        };
        self.locations.insert(task, n);
        if let Some(r) = self.table.get_mut(&n) {
            r.runnable += 1;
        }
        n
    }

    fn most_vacant(&self, exclude: NodeId) -> Option<NodeId> {
        self.map
            .nodes()
            .filter(|&n| n != exclude && !self.overloaded(n))
            .max_by_key(|&n| (self.free(n), std::cmp::Reverse(self.runnable(n)), std::cmp::Reverse(n)))
    }

    /// One pass of the load policies over the current table.
    pub fn rebalance_tick(&mut self) -> Vec<Migration> {
        let mut out = Vec::new();
        let limit = self.map.unit_size() * self.policy.mem_pct / 100;
        for n in self.map.nodes().collect::<Vec<_>>() {
            if self.mem_hot(n) {
                let Some(report) = self.table.get(&n).cloned() else { continue };
                let mut tasks: Vec<&TaskSummary> = report.tasks.iter().filter(|t| t.migratable).collect();
                tasks.sort_by_key(|t| (std::cmp::Reverse(t.heap_bytes), t.id));
                let mut projected = report.used;
                for t in tasks {
                    if projected <= limit || t.heap_bytes == 0 {
                        break;
                    }
                    match self.most_vacant(n) {
                        Some(to) => {
                            projected -= t.heap_bytes.min(projected);
                            out.push(Migration { task: t.id, from: n, to, reason: Reason::Memory });
                        }
                        None => {
                            warn!("controller: node {n} is short of memory but every node is overloaded");
                            self.warnings += 1;
                            break;
                        }
                    }
                }
            } else if self.cpu_hot(n) {
                let Some(report) = self.table.get(&n) else { continue };
                let candidate = report
                    .tasks
                    .iter()
                    .filter(|t| t.migratable && t.window_requests > 0)
                    .max_by_key(|t| (t.window_requests, std::cmp::Reverse(t.id)))
                    .cloned();
                let Some(t) = candidate else { continue };
                let to = match t.most_accessed {
                    Some(m) if m != n && !self.overloaded(m) => Some(m),
                    _ => self.most_vacant(n),
                };
                match to {
                    Some(to) => out.push(Migration { task: t.id, from: n, to, reason: Reason::Cpu }),
                    None => {
                        warn!("controller: node {n} is CPU-bound but every node is overloaded");
                        self.warnings += 1;
                    }
                }
            }
        }
        for m in &out {
            self.locations.insert(m.task, m.to);
        }
        self.migrations.extend(out.iter().copied());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(node: NodeId, used: u64, runnable: u32, tasks: Vec<TaskSummary>) -> NodeReport {
        NodeReport { node, used, capacity: 1000, runnable, tasks }
    }

    fn task(node: NodeId, seq: u32, bytes: u64, reqs: u64, most: Option<NodeId>) -> TaskSummary {
        TaskSummary { id: TaskId { node, seq }, heap_bytes: bytes, window_requests: reqs, most_accessed: most, migratable: true }
    }

    fn ctrl(nodes: u16) -> Controller {
        Controller::new(PartitionMap::new(nodes, 1000).unwrap(), 4)
    }

    #[test]
    fn alloc_goes_to_most_vacant() {
        let mut c = ctrl(4);
        c.observe(report(0, 950, 0, vec![]));
        c.observe(report(1, 500, 0, vec![]));
        c.observe(report(2, 300, 0, vec![]));
        c.observe(report(3, 100, 0, vec![]));
        assert_eq!(c.place_alloc(64, 0), Some(3));
        for n in 1..4 {
            c.observe(report(n, 900, 0, vec![]));
        }
        assert_eq!(c.place_alloc(64, 0), None);
    }

    #[test]
    fn spawn_ties_break_to_caller() {
        let mut c = ctrl(3);
        assert_eq!(c.place_spawn(TaskId { node: 1, seq: 1 }, 1), 1);
        let mut c = ctrl(3);
        c.observe(report(0, 0, 5, vec![]));
        c.observe(report(1, 0, 3, vec![]));
        assert_eq!(c.place_spawn(TaskId { node: 0, seq: 1 }, 0), 2);
    }

    #[test]
    fn memory_pressure_moves_largest_task() {
        let mut c = ctrl(2);
        c.observe(report(0, 950, 2, vec![task(0, 1, 100, 0, None), task(0, 2, 600, 0, None)]));
        c.observe(report(1, 100, 0, vec![]));
        let m = c.rebalance_tick();
        assert_eq!(m.len(), 1);
        assert_eq!((m[0].task.seq, m[0].to, m[0].reason), (2, 1, Reason::Memory));
        assert_eq!(c.locations[&m[0].task], 1);
    }

    #[test]
    fn cpu_pressure_follows_remote_accesses() {
        let mut c = ctrl(3);
        let tasks = (1..=5).map(|i| task(0, i, 0, i as u64, Some(2))).collect();
        c.observe(report(0, 0, 5, tasks));
        let m = c.rebalance_tick();
        assert_eq!(m.len(), 1);
        assert_eq!((m[0].task.seq, m[0].to, m[0].reason), (5, 2, Reason::Cpu));
    }

    #[test]
    fn balanced_cluster_is_left_alone() {
        let mut c = ctrl(3);
        for n in 0..3 {
            c.observe(report(n, 500, 2, vec![task(n, 1, 400, 10, Some((n + 1) % 3))]));
        }
        assert!(c.rebalance_tick().is_empty());
        assert_eq!(c.warnings, 0);
    }

    #[test]
    fn all_overloaded_warns() {
        let mut c = ctrl(2);
        c.observe(report(0, 990, 1, vec![task(0, 1, 500, 0, None)]));
        c.observe(report(1, 990, 1, vec![]));
        assert!(c.rebalance_tick().is_empty());
        assert_eq!(c.warnings, 1);
    }
}
