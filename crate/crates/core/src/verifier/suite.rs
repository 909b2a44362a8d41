//! Fixed scenarios: the standard conforming suite, the protocol mutation
//! runs, and the programs the message-economy and overflow checks use.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::addressing::ColorBits;
use crate::error::Result;
use crate::protocol::handles::Access;
use crate::runtime::node::Faults;
use crate::runtime::sync::AtomicOp;
use crate::transport::loopback::ClusterSpec;
use crate::transport::MessageKind;
use crate::verifier::explore::{enumerate, Bounds, Counterexample, Mode, Report};
use crate::verifier::generate::{generate_programs, GenConfig};
use crate::verifier::interp::LogDigest;
use crate::verifier::program::{Op, Place, ProtoProgram};
use crate::verifier::Invariant;

/// Heap bytes per node used by the suite.
pub const SUITE_UNIT: u64 = 1 << 20;

#[derive(Debug, Clone)]
pub struct Scenario {
    pub program: ProtoProgram,
    pub color_bits: Option<u8>,
    /// Values the run must observe, keyed by (routine, op).
    pub expect: BTreeMap<(u32, u32), u64>,
}

impl Scenario {
    fn new(program: ProtoProgram) -> Self {
        Scenario { program, color_bits: None, expect: BTreeMap::new() }
    }

    fn expect(mut self, routine: u32, pc: u32, v: u64) -> Self {
        self.expect.insert((routine, pc), v);
        self
    }

    pub fn name(&self) -> &str {
        &self.program.name
    }

    pub fn spec(&self, faults: Faults) -> Result<ClusterSpec> {
        let mut s = ClusterSpec::new(self.program.nodes, SUITE_UNIT);
        if let Some(b) = self.color_bits {
            s.color_bits = ColorBits::new(b)?;
        }
        s.faults = faults;
        Ok(s)
    }

    pub fn bounds(&self) -> Bounds {
        let mut b = Bounds::default();
        b.max_ops = b.max_ops.max(self.program.max_ops_per_routine());
        b
    }
}

fn w(v: u64) -> Vec<u64> {
    vec![v]
}

/// Two integers, a local add and a remote add through exclusive and
/// shared references; the final read is the accumulated value.
pub fn accumulator() -> ProtoProgram {
    let mut p = ProtoProgram::new("accumulator", 2);
    let r = p.add_routine();
    p.push(0, Op::Alloc { dst: 0, obj: 0, init: w(5), on: None })
        .push(0, Op::Alloc { dst: 1, obj: 1, init: w(10), on: None })
        .push(0, Op::Add { dst: 0, src: 1, dst_obj: 0, src_obj: 1 })
        .push(0, Op::MakeExclusive { src: 0, dst: 2, obj: 0 })
        .push(0, Op::MakeShared { src: 1, dst: 3, obj: 1 })
        .push(0, Op::Spawn { routine: r, place: Place::Node(1), args: vec![2, 3], dst: 4 })
        .push(0, Op::Join { src: 4, dst: None })
        .push(0, Op::Read { src: 0, word: 0, obj: 0 })
        .push(0, Op::Drop { var: 0, obj: Some(0) })
        .push(0, Op::Drop { var: 1, obj: Some(1) });
    p.push(r, Op::Add { dst: 0, src: 1, dst_obj: 0, src_obj: 1 })
        .push(r, Op::Drop { var: 0, obj: Some(0) })
        .push(r, Op::Drop { var: 1, obj: Some(1) });
    p
}

/// A remote task writes through an exclusive handle; the owner reads
/// afterwards and must see the write-back.
pub fn exclusive_remote() -> ProtoProgram {
    let mut p = ProtoProgram::new("exclusive-remote", 2);
    let r = p.add_routine();
    p.push(0, Op::Alloc { dst: 0, obj: 0, init: w(1), on: None })
        .push(0, Op::MakeExclusive { src: 0, dst: 1, obj: 0 })
        .push(0, Op::Spawn { routine: r, place: Place::Node(1), args: vec![1], dst: 2 })
        .push(0, Op::Join { src: 2, dst: None })
        .push(0, Op::Read { src: 0, word: 0, obj: 0 })
        .push(0, Op::Drop { var: 0, obj: Some(0) });
    p.push(r, Op::Write { dst: 0, word: 0, value: 5, obj: 0 })
        .push(r, Op::Read { src: 0, word: 0, obj: 0 })
        .push(r, Op::Drop { var: 0, obj: Some(0) });
    p
}

/// Share, let a remote reader cache the object, write, share again and
/// read remotely again.
pub fn share_write_share() -> ProtoProgram {
    let mut p = ProtoProgram::new("share-write-share", 2);
    let a = p.add_routine();
    let b = p.add_routine();
    p.push(0, Op::Alloc { dst: 0, obj: 0, init: w(1), on: None })
        .push(0, Op::Write { dst: 0, word: 0, value: 2, obj: 0 })
        .push(0, Op::MakeShared { src: 0, dst: 1, obj: 0 })
        .push(0, Op::Spawn { routine: a, place: Place::Node(1), args: vec![1], dst: 2 })
        .push(0, Op::Join { src: 2, dst: None })
        .push(0, Op::Write { dst: 0, word: 0, value: 3, obj: 0 })
        .push(0, Op::MakeShared { src: 0, dst: 3, obj: 0 })
        .push(0, Op::Spawn { routine: b, place: Place::Node(1), args: vec![3], dst: 4 })
        .push(0, Op::Join { src: 4, dst: None })
        .push(0, Op::Drop { var: 0, obj: Some(0) });
    for r in [a, b] {
        p.push(r, Op::Read { src: 0, word: 0, obj: 0 }).push(r, Op::Drop { var: 0, obj: Some(0) });
    }
    p
}

/// The owner reads a remote object (caching it), travels to the host and
/// back, and reads again after the host wrote.
pub fn transfer_cached() -> ProtoProgram {
    let mut p = ProtoProgram::new("transfer-cached", 2);
    p.root_node = 1;
    let r = p.add_routine();
    p.push(0, Op::Alloc { dst: 0, obj: 0, init: w(1), on: Some(0) })
        .push(0, Op::Read { src: 0, word: 0, obj: 0 })
        .push(0, Op::Spawn { routine: r, place: Place::Node(0), args: vec![0], dst: 1 })
        .push(0, Op::Join { src: 1, dst: Some(2) })
        .push(0, Op::Read { src: 2, word: 0, obj: 0 })
        .push(0, Op::Drop { var: 2, obj: Some(0) });
    p.push(r, Op::Write { dst: 0, word: 0, value: 2, obj: 0 }).push(r, Op::Return { var: 0 });
    p
}

/// A remote reader caches an object that is then freed; a new object of
/// the same size is read by another remote reader.
pub fn free_reuse() -> ProtoProgram {
    let mut p = ProtoProgram::new("free-reuse", 2);
    let a = p.add_routine();
    let b = p.add_routine();
    p.push(0, Op::Alloc { dst: 0, obj: 0, init: w(1), on: None })
        .push(0, Op::MakeShared { src: 0, dst: 1, obj: 0 })
        .push(0, Op::Spawn { routine: a, place: Place::Node(1), args: vec![1], dst: 2 })
        .push(0, Op::Join { src: 2, dst: None })
        .push(0, Op::Drop { var: 0, obj: Some(0) })
        .push(0, Op::Alloc { dst: 3, obj: 1, init: w(7), on: None })
        .push(0, Op::MakeShared { src: 3, dst: 4, obj: 1 })
        .push(0, Op::Spawn { routine: b, place: Place::Node(1), args: vec![4], dst: 5 })
        .push(0, Op::Join { src: 5, dst: None })
        .push(0, Op::Drop { var: 3, obj: Some(1) });
    p.push(a, Op::Read { src: 0, word: 0, obj: 0 }).push(a, Op::Drop { var: 0, obj: Some(0) });
    p.push(b, Op::Read { src: 0, word: 0, obj: 1 }).push(b, Op::Drop { var: 0, obj: Some(1) });
    p
}

pub fn channel_transfer() -> ProtoProgram {
    let mut p = ProtoProgram::new("channel-transfer", 2);
    let r = p.add_routine();
    p.push(0, Op::Alloc { dst: 0, obj: 0, init: w(3), on: None })
        .push(0, Op::ChanNew { dst: 1 })
        .push(0, Op::Spawn { routine: r, place: Place::Node(1), args: vec![1], dst: 2 })
        .push(0, Op::Write { dst: 0, word: 0, value: 4, obj: 0 })
        .push(0, Op::Send { chan: 1, src: 0 })
        .push(0, Op::Join { src: 2, dst: None });
    p.push(r, Op::Recv { chan: 0, dst: 1 })
        .push(r, Op::Read { src: 1, word: 0, obj: 0 })
        .push(r, Op::Write { dst: 1, word: 0, value: 9, obj: 0 })
        .push(r, Op::Read { src: 1, word: 0, obj: 0 })
        .push(r, Op::Drop { var: 1, obj: Some(0) });
    p
}

/// Tied list 1..=n built on node 0 and summed by a reader on node 1.
pub fn tied_sum(n: u32) -> ProtoProgram {
    let mut p = ProtoProgram::new(format!("tied-sum-{n}"), 2);
    let r = p.add_routine();
    p.push(0, Op::Alloc { dst: 0, obj: 0, init: w(1), on: None });
    for i in 1..n {
        let parent = if i == 1 { None } else { Some(i) };
        p.push(
            0,
            Op::TiedAlloc { root: 0, parent, dst: i + 1, obj: i, root_obj: 0, parent_obj: i - 1, init: w(i as u64 + 1) },
        );
    }
    let s = n + 1;
    p.push(0, Op::MakeShared { src: 0, dst: s, obj: 0 })
        .push(0, Op::Spawn { routine: r, place: Place::Node(1), args: vec![s], dst: s + 1 })
        .push(0, Op::Join { src: s + 1, dst: None })
        .push(0, Op::Drop { var: 0, obj: Some(0) });
    p.push(r, Op::FetchTieGroup { src: 0, obj: 0 })
        .push(r, Op::SumTied { src: 0, obj: 0 })
        .push(r, Op::Drop { var: 0, obj: Some(0) });
    p
}

/// Three objects chained through embedded owners, summed remotely.
pub fn embedded_sum() -> ProtoProgram {
    let mut p = ProtoProgram::new("embedded-sum", 2);
    let r = p.add_routine();
    p.push(0, Op::Alloc { dst: 0, obj: 0, init: vec![1, 0], on: None })
        .push(0, Op::Alloc { dst: 1, obj: 1, init: vec![2, 0], on: None })
        .push(0, Op::Alloc { dst: 2, obj: 2, init: vec![3, 0], on: Some(1) })
        .push(0, Op::Embed { parent: 1, word: 1, child: 2, parent_obj: 1, child_obj: 2 })
        .push(0, Op::Embed { parent: 0, word: 1, child: 1, parent_obj: 0, child_obj: 1 })
        .push(0, Op::MakeShared { src: 0, dst: 3, obj: 0 })
        .push(0, Op::Spawn { routine: r, place: Place::Node(1), args: vec![3], dst: 4 })
        .push(0, Op::Join { src: 4, dst: None })
        .push(0, Op::Drop { var: 0, obj: Some(0) });
    p.push(r, Op::SumEmbedded { src: 0, next: 1, obj: 0 }).push(r, Op::Drop { var: 0, obj: Some(0) });
    p
}

/// Exclusive projection of part of a remote object.
pub fn projection_remote() -> ProtoProgram {
    let mut p = ProtoProgram::new("projection-remote", 2);
    p.push(0, Op::Alloc { dst: 0, obj: 0, init: vec![1, 2, 3], on: Some(1) })
        .push(0, Op::ProjAcquire { src: 0, word: 1, words: 2, mode: Access::Exclusive, dst: 1, obj: 0 })
        .push(0, Op::ProjWrite { proj: 1, word: 0, value: 7, obj: 0 })
        .push(0, Op::ProjRead { proj: 1, word: 1, obj: 0 })
        .push(0, Op::Drop { var: 1, obj: Some(0) })
        .push(0, Op::ProjAcquire { src: 0, word: 0, words: 2, mode: Access::Shared, dst: 2, obj: 0 })
        .push(0, Op::ProjRead { proj: 2, word: 1, obj: 0 })
        .push(0, Op::Drop { var: 2, obj: Some(0) })
        .push(0, Op::Read { src: 0, word: 1, obj: 0 })
        .push(0, Op::Drop { var: 0, obj: Some(0) });
    p
}

pub fn counted_shared() -> ProtoProgram {
    let mut p = ProtoProgram::new("counted-shared", 2);
    let r = p.add_routine();
    p.push(0, Op::Alloc { dst: 0, obj: 0, init: w(5), on: None })
        .push(0, Op::CountedNew { src: 0, dst: 1, obj: 0 })
        .push(0, Op::CountedClone { src: 1, dst: 2, obj: 0 })
        .push(0, Op::Spawn { routine: r, place: Place::Node(1), args: vec![2], dst: 3 })
        .push(0, Op::Read { src: 1, word: 0, obj: 0 })
        .push(0, Op::Drop { var: 1, obj: Some(0) })
        .push(0, Op::Join { src: 3, dst: None });
    p.push(r, Op::Read { src: 0, word: 0, obj: 0 }).push(r, Op::Drop { var: 0, obj: Some(0) });
    p
}

/// Two tasks increment a mutex-guarded counter.
pub fn mutex_counter() -> ProtoProgram {
    let mut p = ProtoProgram::new("mutex-counter", 2);
    let r = p.add_routine();
    p.push(0, Op::Alloc { dst: 0, obj: 0, init: w(0), on: None })
        .push(0, Op::MutexNew { src: 0, dst: 1, obj: 0 })
        .push(0, Op::Spawn { routine: r, place: Place::Node(1), args: vec![1], dst: 2 })
        .push(0, Op::Lock { mutex: 1, dst: 3 })
        .push(0, Op::GuardAdd { guard: 3, word: 0, delta: 1, obj: 0 })
        .push(0, Op::Unlock { guard: 3 })
        .push(0, Op::Join { src: 2, dst: None })
        .push(0, Op::Lock { mutex: 1, dst: 3 })
        .push(0, Op::GuardRead { guard: 3, word: 0, obj: 0 })
        .push(0, Op::Unlock { guard: 3 });
    p.push(r, Op::Lock { mutex: 0, dst: 1 })
        .push(r, Op::GuardAdd { guard: 1, word: 0, delta: 1, obj: 0 })
        .push(r, Op::Unlock { guard: 1 });
    p
}

/// Two readers on two other nodes, then a write and a fresh read.
pub fn fan_out() -> ProtoProgram {
    let mut p = ProtoProgram::new("fan-out", 3);
    let a = p.add_routine();
    let b = p.add_routine();
    p.push(0, Op::Alloc { dst: 0, obj: 0, init: w(4), on: Some(2) })
        .push(0, Op::MakeShared { src: 0, dst: 1, obj: 0 })
        .push(0, Op::MakeShared { src: 0, dst: 2, obj: 0 })
        .push(0, Op::Spawn { routine: a, place: Place::Node(1), args: vec![1], dst: 3 })
        .push(0, Op::Spawn { routine: b, place: Place::Near(2), args: vec![2], dst: 4 })
        .push(0, Op::Read { src: 0, word: 0, obj: 0 })
        .push(0, Op::Join { src: 3, dst: None })
        .push(0, Op::Join { src: 4, dst: None })
        .push(0, Op::Write { dst: 0, word: 0, value: 6, obj: 0 })
        .push(0, Op::Read { src: 0, word: 0, obj: 0 })
        .push(0, Op::Drop { var: 0, obj: Some(0) });
    for r in [a, b] {
        p.push(r, Op::Read { src: 0, word: 0, obj: 0 }).push(r, Op::Drop { var: 0, obj: Some(0) });
    }
    p
}

pub fn atomic_remote() -> ProtoProgram {
    let mut p = ProtoProgram::new("atomic-remote", 2);
    p.push(0, Op::Alloc { dst: 0, obj: 0, init: w(0), on: Some(1) })
        .push(0, Op::Atomic { src: 0, op: AtomicOp::FetchAdd(2), obj: 0 })
        .push(0, Op::Atomic { src: 0, op: AtomicOp::CompareSwap { expected: 2, new: 9 }, obj: 0 })
        .push(0, Op::Read { src: 0, word: 0, obj: 0 })
        .push(0, Op::Drop { var: 0, obj: Some(0) });
    p
}

/// Four write epochs through fresh exclusive handles on a local object,
/// then a remote reader.
pub fn color_overflow() -> ProtoProgram {
    let mut p = ProtoProgram::new("color-overflow", 2);
    let r = p.add_routine();
    p.push(0, Op::Alloc { dst: 0, obj: 0, init: w(0), on: None });
    for i in 1..=4u64 {
        p.push(0, Op::MakeExclusive { src: 0, dst: 1, obj: 0 })
            .push(0, Op::Write { dst: 1, word: 0, value: i, obj: 0 })
            .push(0, Op::Drop { var: 1, obj: Some(0) });
    }
    p.push(0, Op::Read { src: 0, word: 0, obj: 0 })
        .push(0, Op::MakeShared { src: 0, dst: 2, obj: 0 })
        .push(0, Op::Spawn { routine: r, place: Place::Node(1), args: vec![2], dst: 3 })
        .push(0, Op::Join { src: 3, dst: None })
        .push(0, Op::Drop { var: 0, obj: Some(0) });
    p.push(r, Op::Read { src: 0, word: 0, obj: 0 }).push(r, Op::Drop { var: 0, obj: Some(0) });
    p
}

pub fn color_overflow_scenario() -> Scenario {
    let mut s = Scenario::new(color_overflow()).expect(0, 13, 4).expect(1, 0, 4);
    s.color_bits = Some(2);
    s
}

/// Two tasks on different nodes each run one guarded read-modify-write.
pub fn kv_slice() -> ProtoProgram {
    let mut p = ProtoProgram::new("kv-slice", 2);
    let a = p.add_routine();
    let b = p.add_routine();
    p.push(0, Op::Alloc { dst: 0, obj: 0, init: vec![0, 0], on: None })
        .push(0, Op::MutexNew { src: 0, dst: 1, obj: 0 })
        .push(0, Op::Spawn { routine: a, place: Place::Node(0), args: vec![1], dst: 2 })
        .push(0, Op::Spawn { routine: b, place: Place::Node(1), args: vec![1], dst: 3 })
        .push(0, Op::Join { src: 2, dst: None })
        .push(0, Op::Join { src: 3, dst: None })
        .push(0, Op::Lock { mutex: 1, dst: 4 })
        .push(0, Op::GuardRead { guard: 4, word: 0, obj: 0 })
        .push(0, Op::Unlock { guard: 4 });
    for (r, d) in [(a, 1), (b, 2)] {
        p.push(r, Op::Lock { mutex: 0, dst: 1 })
            .push(r, Op::GuardAdd { guard: 1, word: 0, delta: d, obj: 0 })
            .push(r, Op::Unlock { guard: 1 });
    }
    p
}

/// One measured op of the economy program and the messages its node may
/// send while running it; every kind not listed must stay at zero.
#[derive(Debug, Clone)]
pub struct EconomyCase {
    pub name: &'static str,
    pub routine: u32,
    pub pc: u32,
    pub expect: Vec<(MessageKind, u64)>,
}

/// Straight-line program exercising each message-economy path once.
pub fn economy() -> ProtoProgram {
    let mut p = ProtoProgram::new("economy", 2);
    let r = p.add_routine();
    p.push(0, Op::Alloc { dst: 0, obj: 0, init: w(1), on: Some(1) })
        .push(0, Op::MakeShared { src: 0, dst: 1, obj: 0 })
        .push(0, Op::Read { src: 1, word: 0, obj: 0 })
        .push(0, Op::Read { src: 1, word: 0, obj: 0 })
        .push(0, Op::MakeShared { src: 0, dst: 7, obj: 0 })
        .push(0, Op::Read { src: 7, word: 0, obj: 0 })
        .push(0, Op::Drop { var: 1, obj: Some(0) })
        .push(0, Op::Drop { var: 7, obj: Some(0) })
        .push(0, Op::Write { dst: 0, word: 0, value: 2, obj: 0 })
        .push(0, Op::Read { src: 0, word: 0, obj: 0 })
        .push(0, Op::Drop { var: 0, obj: Some(0) })
        .push(0, Op::Alloc { dst: 2, obj: 1, init: w(3), on: Some(1) })
        .push(0, Op::MakeExclusive { src: 2, dst: 3, obj: 1 })
        .push(0, Op::Write { dst: 3, word: 0, value: 4, obj: 1 })
        .push(0, Op::Drop { var: 3, obj: Some(1) })
        .push(0, Op::Read { src: 2, word: 0, obj: 1 })
        .push(0, Op::Drop { var: 2, obj: Some(1) })
        .push(0, Op::Alloc { dst: 4, obj: 2, init: w(5), on: None })
        .push(0, Op::MakeExclusive { src: 4, dst: 5, obj: 2 })
        .push(0, Op::Spawn { routine: r, place: Place::Node(1), args: vec![5], dst: 6 })
        .push(0, Op::Join { src: 6, dst: None })
        .push(0, Op::Read { src: 4, word: 0, obj: 2 })
        .push(0, Op::Drop { var: 4, obj: Some(2) });
    p.push(r, Op::Write { dst: 0, word: 0, value: 6, obj: 2 }).push(r, Op::Drop { var: 0, obj: Some(2) });
    p
}

pub fn economy_cases() -> Vec<EconomyCase> {
    use MessageKind::*;
    vec![
        EconomyCase { name: "first remote shared read", routine: 0, pc: 2, expect: vec![(FetchCopy, 1)] },
        EconomyCase { name: "repeat read through the same handle", routine: 0, pc: 3, expect: vec![] },
        EconomyCase { name: "repeat read through a new handle", routine: 0, pc: 5, expect: vec![] },
        EconomyCase {
            name: "owner write with an unreferenced cached copy",
            routine: 0,
            pc: 8,
            expect: vec![(DeallocRequest, 1)],
        },
        EconomyCase { name: "remote exclusive deref", routine: 0, pc: 13, expect: vec![(MoveFetch, 1), (DeallocRequest, 1)] },
        EconomyCase { name: "exclusive drop with remote owner", routine: 1, pc: 1, expect: vec![(OwnerWriteBack, 1)] },
    ]
}

/// Values the economy program must read, keyed by (routine, op).
pub fn economy_reads() -> BTreeMap<(u32, u32), u64> {
    [((0, 2), 1), ((0, 3), 1), ((0, 5), 1), ((0, 9), 2), ((0, 15), 4), ((0, 21), 6)].into_iter().collect()
}

/// Checks every economy case against the per-op counts of a run. Returns
/// one (case, passed, detail) line per case plus one for the read values.
pub fn check_economy(d: &LogDigest) -> Vec<(String, bool, String)> {
    let mut out = Vec::new();
    for c in economy_cases() {
        let mut got = Vec::new();
        for k in MessageKind::ALL {
            let n = d.op_sent(c.routine, c.pc, k);
            if n > 0 {
                got.push((k, n));
            }
        }
        let ok = got == c.expect;
        let show = |v: &[(MessageKind, u64)]| v.iter().map(|(k, n)| format!("{}={n}", k.name())).collect::<Vec<_>>().join(" ");
        out.push((c.name.to_string(), ok, format!("sent [{}], expected [{}]", show(&got), show(&c.expect))));
    }
    let want = economy_reads();
    let bad: Vec<String> = want
        .iter()
        .filter(|(k, v)| d.reads.get(k) != Some(v))
        .map(|(k, v)| format!("op {}/{}: {:?} != {v}", k.0, k.1, d.reads.get(k)))
        .collect();
    out.push(("economy read values".to_string(), bad.is_empty(), bad.join("; ")));
    out
}

/// The standard conforming suite.
pub fn standard() -> Vec<Scenario> {
    vec![
        Scenario::new(accumulator()).expect(0, 2, 15).expect(1, 0, 25).expect(0, 7, 25),
        Scenario::new(exclusive_remote()).expect(0, 4, 5),
        Scenario::new(share_write_share()).expect(1, 0, 2).expect(2, 0, 3),
        Scenario::new(transfer_cached()).expect(0, 1, 1).expect(0, 4, 2),
        Scenario::new(free_reuse()).expect(1, 0, 1).expect(2, 0, 7),
        Scenario::new(channel_transfer()).expect(1, 1, 4).expect(1, 3, 9),
        Scenario::new(tied_sum(5)).expect(1, 1, 15),
        Scenario::new(embedded_sum()).expect(1, 0, 6),
        Scenario::new(projection_remote()).expect(0, 3, 3).expect(0, 6, 7).expect(0, 8, 7),
        Scenario::new(counted_shared()).expect(0, 4, 5).expect(1, 0, 5),
        Scenario::new(mutex_counter()),
        Scenario::new(fan_out()).expect(0, 5, 4).expect(1, 0, 4).expect(2, 0, 4).expect(0, 9, 6),
        Scenario::new(atomic_remote()).expect(0, 3, 9),
        color_overflow_scenario(),
        Scenario::new(kv_slice()),
        Scenario::new(economy()).expect(0, 2, 1).expect(0, 9, 2).expect(0, 15, 4).expect(0, 21, 6),
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub name: String,
    pub report: Report,
    /// Expected values that some terminal observation contradicted.
    pub expectation_failures: Vec<String>,
}

impl ScenarioResult {
    pub fn passed(&self) -> bool {
        self.report.passed() && self.expectation_failures.is_empty()
    }
}

pub fn run_scenario(s: &Scenario, faults: Faults, mode: Mode) -> Result<ScenarioResult> {
    let report = enumerate(&s.program, s.spec(faults)?, &s.bounds(), mode)?;
    let mut expectation_failures = Vec::new();
    for obs in &report.observations {
        let m: BTreeMap<_, _> = obs.iter().copied().collect();
        for (k, want) in &s.expect {
            if m.get(k) != Some(want) {
                expectation_failures.push(format!("routine {} op {}: observed {:?}, expected {want}", k.0, k.1, m.get(k)));
            }
        }
    }
    expectation_failures.sort();
    expectation_failures.dedup();
    Ok(ScenarioResult { name: s.name().to_string(), report, expectation_failures })
}

pub fn run_standard(faults: Faults, mode: Mode) -> Result<Vec<ScenarioResult>> {
    standard().iter().map(|s| run_scenario(s, faults, mode)).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MutationResult {
    pub fault: String,
    pub detected: BTreeSet<Invariant>,
    /// First scenario that caught the fault, with its counterexample.
    pub witness: Option<(String, Counterexample)>,
}

impl MutationResult {
    pub fn caught(&self) -> bool {
        !self.detected.is_empty()
    }
}

/// Runs the standard suite once per protocol mutation.
pub fn mutation_score(mode: Mode) -> Result<Vec<MutationResult>> {
    let mut out = Vec::new();
    for name in Faults::NAMES {
        let faults = Faults::by_name(name).expect("known fault");
        let mut res = MutationResult { fault: name.to_string(), detected: BTreeSet::new(), witness: None };
        for r in run_standard(faults, mode)? {
            for (inv, cx) in &r.report.failures {
                // Runtime failures alone do not count as detection by an invariant.
                if *inv == Invariant::Runtime {
                    continue;
                }
                res.detected.insert(*inv);
                if res.witness.is_none() {
                    res.witness = Some((r.name.clone(), cx.clone()));
                }
            }
        }
        out.push(res);
    }
    Ok(out)
}

/// Enumerates `count` generated programs from `seed`, each on a cluster of
/// the size it asks for.
pub fn run_generated(seed: u64, count: usize, cfg: GenConfig, mode: Mode) -> Result<Vec<Report>> {
    let bounds = Bounds { max_nodes: cfg.max_nodes, max_tasks: cfg.max_tasks, max_ops: cfg.max_ops, ..Bounds::default() };
    generate_programs(seed, count, cfg)
        .iter()
        .map(|p| enumerate(p, ClusterSpec::new(p.nodes, SUITE_UNIT), &bounds, mode))
        .collect()
}
