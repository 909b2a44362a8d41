//! Sequential reference semantics for programs.
//!
//! Runs every routine on one node over plain word vectors. The lowest
//! runnable routine runs until it blocks, which respects the spawn, join
//! and channel orders of the program. Along the way the oracle records a
//! vector clock for every access and the lifetime of every handle, which
//! gives the static SWMR check.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::protocol::handles::Access;
use crate::verifier::program::{ObjNo, Op, ProtoProgram, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Owner,
    Shared,
    Exclusive,
    Counted,
    Stack,
    Tied,
    /// Projection starting at the given word.
    Proj(u32, Access),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum OVal {
    Unit,
    Handle { obj: ObjNo, kind: Kind, inst: u32 },
    Chan(u32),
    Mutex(u32),
    Guard(u32),
    Join(u32),
}

impl OVal {
    fn needs_release(&self) -> bool {
        match self {
            OVal::Handle { kind, .. } => *kind != Kind::Tied,
            OVal::Guard(_) | OVal::Join(_) => true,
            _ => false,
        }
    }

    fn copyable(&self) -> bool {
        matches!(self, OVal::Unit | OVal::Chan(_) | OVal::Mutex(_))
    }
}

#[derive(Debug, Clone, Default)]
struct OObj {
    words: Vec<u64>,
    live: bool,
    tie_children: Vec<ObjNo>,
    embedded: BTreeMap<u32, ObjNo>,
    counted: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    NotStarted,
    Runnable,
    Blocked,
    Done,
}

#[derive(Debug, Clone)]
struct RState {
    pc: usize,
    vars: Vec<OVal>,
    status: Status,
    ret: OVal,
    clock: Vec<u32>,
}

/// One access to an object, stamped with the issuing routine's clock.
#[derive(Debug, Clone)]
struct Access_ {
    obj: ObjNo,
    routine: u32,
    clock: Vec<u32>,
    write: bool,
    guarded: bool,
    inst: Option<u32>,
}

#[derive(Debug, Clone)]
struct Interval {
    obj: ObjNo,
    /// Owners, tied children and stack values are not borrows.
    owner: bool,
    exclusive: bool,
    start: (u32, Vec<u32>),
    end: Option<(u32, Vec<u32>)>,
}

/// Result of the sequential run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Observation {
    /// Observed values keyed by (routine, op index).
    pub reads: BTreeMap<(u32, u32), u64>,
    /// Words of every object live at the end.
    pub final_words: BTreeMap<ObjNo, Vec<u64>>,
    /// Problems that make the program non-conforming.
    pub swmr_conflicts: Vec<String>,
}

impl Observation {
    pub fn conforming(&self) -> bool {
        self.swmr_conflicts.is_empty()
    }
}

/// Why a program cannot be run at all.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("routine {routine} op {pc}: {reason}")]
pub struct IllFormed {
    pub routine: u32,
    pub pc: u32,
    pub reason: String,
}

struct Machine<'a> {
    prog: &'a ProtoProgram,
    rs: Vec<RState>,
    objs: BTreeMap<ObjNo, OObj>,
    chans: Vec<(VecDeque<(OVal, Vec<u32>)>, bool)>,
    mutexes: Vec<(ObjNo, bool)>,
    next_inst: u32,
    accesses: Vec<Access_>,
    intervals: BTreeMap<u32, Interval>,
    obs: Observation,
}

fn hb(ev: &(u32, Vec<u32>), later: &[u32]) -> bool {
    let t = ev.1.get(ev.0 as usize).copied().unwrap_or(0);
    later.get(ev.0 as usize).is_some_and(|&c| c >= t)
}

fn join_into(a: &mut Vec<u32>, b: &[u32]) {
    if a.len() < b.len() {
        a.resize(b.len(), 0);
    }
    for (x, y) in a.iter_mut().zip(b) {
        *x = (*x).max(*y);
    }
}

/// Runs `prog` sequentially. Fails only on ill-formed programs; SWMR
/// conflicts are reported in the observation.
pub fn sequential_oracle(prog: &ProtoProgram) -> Result<Observation, IllFormed> {
    let n = prog.routines.len();
    let mut m = Machine {
        prog,
        rs: (0..n)
            .map(|_| RState { pc: 0, vars: Vec::new(), status: Status::NotStarted, ret: OVal::Unit, clock: vec![0; n] })
            .collect(),
        objs: BTreeMap::new(),
        chans: Vec::new(),
        mutexes: Vec::new(),
        next_inst: 0,
        accesses: Vec::new(),
        intervals: BTreeMap::new(),
        obs: Observation::default(),
    };
    if n == 0 {
        return Ok(m.obs);
    }
    m.rs[0].status = Status::Runnable;
    while let Some(r) = m.rs.iter().position(|s| s.status == Status::Runnable) {
        m.run(r as u32)?;
    }
    if let Some(r) = m.rs.iter().position(|s| s.status == Status::Blocked) {
        return Err(IllFormed { routine: r as u32, pc: m.rs[r].pc as u32, reason: "deadlock".into() });
    }
    for (r, s) in m.rs.iter().enumerate() {
        if s.status == Status::NotStarted && r != 0 {
            return Err(IllFormed { routine: r as u32, pc: 0, reason: "routine never spawned".into() });
        }
    }
    m.check_conflicts();
    for (&o, obj) in &m.objs {
        if obj.live {
            m.obs.final_words.insert(o, obj.words.clone());
        }
    }
    Ok(m.obs)
}

/// Well-formed and SWMR-conforming.
pub fn check(prog: &ProtoProgram) -> Result<(), String> {
    let obs = sequential_oracle(prog).map_err(|e| e.to_string())?;
    match obs.swmr_conflicts.first() {
        None => Ok(()),
        Some(c) => Err(c.clone()),
    }
}

impl Machine<'_> {
    fn err(&self, r: u32, reason: impl Into<String>) -> IllFormed {
        IllFormed { routine: r, pc: self.rs[r as usize].pc as u32, reason: reason.into() }
    }

    fn var(&self, r: u32, v: Var) -> OVal {
        self.rs[r as usize].vars.get(v as usize).cloned().unwrap_or(OVal::Unit)
    }

    fn set(&mut self, r: u32, v: Var, val: OVal) -> Result<(), IllFormed> {
        let vars = &mut self.rs[r as usize].vars;
        if vars.len() <= v as usize {
            vars.resize(v as usize + 1, OVal::Unit);
        }
        if vars[v as usize].needs_release() {
            return Err(self.err(r, format!("variable {v} overwritten while holding a handle")));
        }
        self.rs[r as usize].vars[v as usize] = val;
        Ok(())
    }

    fn take(&mut self, r: u32, v: Var) -> OVal {
        match self.rs[r as usize].vars.get_mut(v as usize) {
            Some(x) => std::mem::replace(x, OVal::Unit),
            None => OVal::Unit,
        }
    }

    fn handle(&self, r: u32, v: Var, obj: ObjNo) -> Result<(Kind, u32), IllFormed> {
        match self.var(r, v) {
            OVal::Handle { obj: o, kind, inst } if o == obj => {
                if !self.objs.get(&o).is_some_and(|x| x.live) {
                    return Err(self.err(r, format!("object {o} used after free")));
                }
                Ok((kind, inst))
            }
            OVal::Handle { obj: o, .. } => Err(self.err(r, format!("variable {v} refers to object {o}, not {obj}"))),
            x => Err(self.err(r, format!("variable {v} holds {x:?}, expected a handle"))),
        }
    }

    fn new_inst(&mut self, r: u32, obj: ObjNo, exclusive: bool) -> u32 {
        self.new_inst_of(r, obj, exclusive, false)
    }

    fn new_owner(&mut self, r: u32, obj: ObjNo) -> u32 {
        self.new_inst_of(r, obj, false, true)
    }

    fn new_inst_of(&mut self, r: u32, obj: ObjNo, exclusive: bool, owner: bool) -> u32 {
        let i = self.next_inst;
        self.next_inst += 1;
        let c = self.rs[r as usize].clock.clone();
        self.intervals.insert(i, Interval { obj, owner, exclusive, start: (r, c), end: None });
        i
    }

    fn end_inst(&mut self, r: u32, inst: u32) {
        let c = self.rs[r as usize].clock.clone();
        if let Some(iv) = self.intervals.get_mut(&inst) {
            iv.end = Some((r, c));
        }
    }

    fn access(&mut self, r: u32, obj: ObjNo, write: bool, guarded: bool, inst: Option<u32>) {
        let clock = self.rs[r as usize].clock.clone();
        self.accesses.push(Access_ { obj, routine: r, clock, write, guarded, inst });
    }

    fn word(&self, obj: ObjNo, w: u32) -> u64 {
        self.objs.get(&obj).and_then(|o| o.words.get(w as usize)).copied().unwrap_or(0)
    }

    fn put(&mut self, obj: ObjNo, w: u32, v: u64) {
        let o = self.objs.entry(obj).or_default();
        if o.words.len() <= w as usize {
            o.words.resize(w as usize + 1, 0);
        }
        o.words[w as usize] = v;
    }

    fn kill(&mut self, obj: ObjNo) {
        let (children, embedded) = match self.objs.get_mut(&obj) {
            Some(o) => {
                o.live = false;
                (o.tie_children.clone(), o.embedded.values().copied().collect::<Vec<_>>())
            }
            None => return,
        };
        for c in children.into_iter().chain(embedded) {
            self.kill(c);
        }
    }

    fn finish(&mut self, r: u32) -> Result<(), IllFormed> {
        for (v, val) in self.rs[r as usize].vars.iter().enumerate() {
            if val.needs_release() {
                return Err(IllFormed {
                    routine: r,
                    pc: self.rs[r as usize].pc as u32,
                    reason: format!("variable {v} still holds {val:?} at routine end"),
                });
            }
        }
        self.rs[r as usize].status = Status::Done;
        for s in self.rs.iter_mut() {
            if s.status == Status::Blocked {
                s.status = Status::Runnable;
            }
        }
        Ok(())
    }

    fn run(&mut self, r: u32) -> Result<(), IllFormed> {
        let ops = &self.prog.routines[r as usize].ops;
        loop {
            let pc = self.rs[r as usize].pc;
            let Some(op) = ops.get(pc) else {
                return self.finish(r);
            };
            let clock = &mut self.rs[r as usize].clock;
            clock[r as usize] += 1;
            match self.exec(r, pc as u32, op)? {
                Next::Continue => self.rs[r as usize].pc += 1,
                Next::Block => {
                    let c = &mut self.rs[r as usize].clock;
                    c[r as usize] -= 1;
                    self.rs[r as usize].status = Status::Blocked;
                    return Ok(());
                }
                Next::Return => {
                    self.rs[r as usize].pc = ops.len();
                    return self.finish(r);
                }
            }
        }
    }

    fn wake_all(&mut self) {
        for s in self.rs.iter_mut() {
            if s.status == Status::Blocked {
                s.status = Status::Runnable;
            }
        }
    }

    fn exec(&mut self, r: u32, pc: u32, op: &Op) -> Result<Next, IllFormed> {
        match op {
            Op::Alloc { dst, obj, init, .. } => {
                self.new_obj(r, *obj, init.clone())?;
                let inst = self.new_owner(r, *obj);
                self.set(r, *dst, OVal::Handle { obj: *obj, kind: Kind::Owner, inst })?;
                self.access(r, *obj, true, false, Some(inst));
            }
            Op::TiedAlloc { root, parent, dst, obj, root_obj, parent_obj, init } => {
                let (k, rinst) = self.handle(r, *root, *root_obj)?;
                if k != Kind::Owner {
                    return Err(self.err(r, "tied allocation needs the root owner"));
                }
                match parent {
                    Some(p) => {
                        self.handle(r, *p, *parent_obj)?;
                    }
                    None if parent_obj != root_obj => return Err(self.err(r, "parent object must be the root")),
                    None => {}
                }
                self.new_obj(r, *obj, init.clone())?;
                self.objs.get_mut(parent_obj).unwrap().tie_children.push(*obj);
                self.access(r, *root_obj, true, false, Some(rinst));
                let inst = self.new_owner(r, *obj);
                self.set(r, *dst, OVal::Handle { obj: *obj, kind: Kind::Tied, inst })?;
            }
            Op::MakeShared { src, dst, obj } => {
                let (k, _) = self.handle(r, *src, *obj)?;
                if !matches!(k, Kind::Owner | Kind::Exclusive | Kind::Shared) {
                    return Err(self.err(r, "make-shared from a non-reference"));
                }
                let inst = self.new_inst(r, *obj, false);
                self.set(r, *dst, OVal::Handle { obj: *obj, kind: Kind::Shared, inst })?;
            }
            Op::MakeExclusive { src, dst, obj } => {
                let (k, _) = self.handle(r, *src, *obj)?;
                if k != Kind::Owner {
                    return Err(self.err(r, "make-exclusive needs the owner"));
                }
                let inst = self.new_inst(r, *obj, true);
                self.set(r, *dst, OVal::Handle { obj: *obj, kind: Kind::Exclusive, inst })?;
            }
            Op::Read { src, word, obj } => {
                let (k, inst) = self.handle(r, *src, *obj)?;
                if !matches!(k, Kind::Owner | Kind::Shared | Kind::Exclusive | Kind::Counted) {
                    return Err(self.err(r, "read through a non-reference"));
                }
                let v = self.word(*obj, *word);
                self.obs.reads.insert((r, pc), v);
                self.access(r, *obj, false, false, Some(inst));
            }
            Op::Write { dst, word, value, obj } => {
                let (k, inst) = self.handle(r, *dst, *obj)?;
                if !matches!(k, Kind::Owner | Kind::Exclusive) {
                    return Err(self.err(r, "write needs the owner or an exclusive handle"));
                }
                self.put(*obj, *word, *value);
                self.access(r, *obj, true, false, Some(inst));
            }
            Op::Add { dst, src, dst_obj, src_obj } => {
                let (ks, is) = self.handle(r, *src, *src_obj)?;
                let (kd, id) = self.handle(r, *dst, *dst_obj)?;
                if !matches!(ks, Kind::Owner | Kind::Shared | Kind::Exclusive | Kind::Counted)
                    || !matches!(kd, Kind::Owner | Kind::Exclusive)
                {
                    return Err(self.err(r, "add needs a readable source and a writable destination"));
                }
                let v = self.word(*dst_obj, 0).wrapping_add(self.word(*src_obj, 0));
                self.put(*dst_obj, 0, v);
                self.obs.reads.insert((r, pc), v);
                self.access(r, *src_obj, false, false, Some(is));
                self.access(r, *dst_obj, true, false, Some(id));
            }
            Op::Drop { var, obj } => {
                let v = self.take(r, *var);
                self.drop_val(r, v, *obj)?;
            }
            Op::Spawn { routine, args, dst, .. } => {
                let c = *routine as usize;
                if c == 0 || c >= self.rs.len() || self.rs[c].status != Status::NotStarted {
                    return Err(self.err(r, format!("routine {routine} cannot be spawned here")));
                }
                let mut vars = Vec::new();
                for &a in args {
                    let v = self.var(r, a);
                    if v.copyable() {
                        vars.push(v);
                    } else {
                        if matches!(v, OVal::Guard(_)) {
                            return Err(self.err(r, "mutex guards cannot leave their task"));
                        }
                        vars.push(self.take(r, a));
                    }
                }
                let clock = self.rs[r as usize].clock.clone();
                self.rs[c].vars = vars;
                self.rs[c].clock = clock;
                self.rs[c].status = Status::Runnable;
                self.set(r, *dst, OVal::Join(*routine))?;
            }
            Op::Join { src, dst } => {
                let OVal::Join(c) = self.var(r, *src) else {
                    return Err(self.err(r, format!("variable {src} is not a join handle")));
                };
                if self.rs[c as usize].status != Status::Done {
                    return Ok(Next::Block);
                }
                self.take(r, *src);
                let fc = self.rs[c as usize].clock.clone();
                join_into(&mut self.rs[r as usize].clock, &fc);
                let v = std::mem::replace(&mut self.rs[c as usize].ret, OVal::Unit);
                match dst {
                    Some(d) => self.set(r, *d, v)?,
                    None if v.needs_release() => return Err(self.err(r, "joined value discarded")),
                    None => {}
                }
            }
            Op::Return { var } => {
                if r == 0 {
                    return Err(self.err(r, "routine 0 cannot return a value"));
                }
                let v = self.take(r, *var);
                self.rs[r as usize].ret = v;
                return Ok(Next::Return);
            }
            Op::ChanNew { dst } => {
                self.chans.push((VecDeque::new(), false));
                let id = self.chans.len() as u32 - 1;
                self.set(r, *dst, OVal::Chan(id))?;
            }
            Op::Send { chan, src } => {
                let OVal::Chan(c) = self.var(r, *chan) else {
                    return Err(self.err(r, format!("variable {chan} is not a channel")));
                };
                if self.chans[c as usize].1 {
                    return Err(self.err(r, "send on a closed channel"));
                }
                let v = self.var(r, *src);
                let v = if v.copyable() { v } else { self.take(r, *src) };
                if matches!(v, OVal::Guard(_)) {
                    return Err(self.err(r, "mutex guards cannot leave their task"));
                }
                let clock = self.rs[r as usize].clock.clone();
                self.chans[c as usize].0.push_back((v, clock));
                self.wake_all();
            }
            Op::Recv { chan, dst } => {
                let OVal::Chan(c) = self.var(r, *chan) else {
                    return Err(self.err(r, format!("variable {chan} is not a channel")));
                };
                match self.chans[c as usize].0.pop_front() {
                    Some((v, clock)) => {
                        join_into(&mut self.rs[r as usize].clock, &clock);
                        self.set(r, *dst, v)?;
                    }
                    None if self.chans[c as usize].1 => return Err(self.err(r, "receive on a closed, empty channel")),
                    None => return Ok(Next::Block),
                }
            }
            Op::Close { chan } => {
                let OVal::Chan(c) = self.var(r, *chan) else {
                    return Err(self.err(r, format!("variable {chan} is not a channel")));
                };
                self.chans[c as usize].1 = true;
                self.wake_all();
            }
            Op::Atomic { src, op: aop, obj } => {
                let (_, inst) = self.handle(r, *src, *obj)?;
                let prior = self.word(*obj, 0);
                let write = aop.apply(prior);
                if let Some(v) = write {
                    self.put(*obj, 0, v);
                }
                // Atomics serialize at the host, like a mutex.
                self.access(r, *obj, write.is_some(), true, Some(inst));
            }
            Op::MutexNew { src, dst, obj } => {
                let (k, _) = self.handle(r, *src, *obj)?;
                if k != Kind::Owner {
                    return Err(self.err(r, "mutex needs the owner"));
                }
                self.take(r, *src);
                self.mutexes.push((*obj, false));
                let id = self.mutexes.len() as u32 - 1;
                self.set(r, *dst, OVal::Mutex(id))?;
            }
            Op::Lock { mutex, dst } => {
                let OVal::Mutex(mx) = self.var(r, *mutex) else {
                    return Err(self.err(r, format!("variable {mutex} is not a mutex")));
                };
                if self.mutexes[mx as usize].1 {
                    return Ok(Next::Block);
                }
                self.mutexes[mx as usize].1 = true;
                self.set(r, *dst, OVal::Guard(mx))?;
            }
            Op::Unlock { guard } => {
                let v = self.take(r, *guard);
                self.drop_val(r, v, None)?;
            }
            Op::GuardRead { guard, word, obj } | Op::GuardWrite { guard, word, obj, .. } | Op::GuardAdd { guard, word, obj, .. } => {
                let OVal::Guard(mx) = self.var(r, *guard) else {
                    return Err(self.err(r, format!("variable {guard} is not a guard")));
                };
                if self.mutexes[mx as usize].0 != *obj {
                    return Err(self.err(r, format!("mutex {mx} does not guard object {obj}")));
                }
                let write = match op {
                    Op::GuardWrite { value, .. } => {
                        self.put(*obj, *word, *value);
                        true
                    }
                    Op::GuardAdd { delta, .. } => {
                        let v = self.word(*obj, *word).wrapping_add(*delta);
                        self.put(*obj, *word, v);
                        true
                    }
                    _ => false,
                };
                self.access(r, *obj, write, true, None);
            }
            Op::FetchTieGroup { src, obj } => {
                let (k, inst) = self.handle(r, *src, *obj)?;
                if k != Kind::Shared {
                    return Err(self.err(r, "tie-group fetch needs a shared handle"));
                }
                self.access(r, *obj, false, false, Some(inst));
            }
            Op::SumTied { src, obj } => {
                let (k, inst) = self.handle(r, *src, *obj)?;
                if k != Kind::Shared {
                    return Err(self.err(r, "tied sum needs a shared handle"));
                }
                let mut sum = 0u64;
                let mut cur = Some(*obj);
                while let Some(o) = cur {
                    sum = sum.wrapping_add(self.word(o, 0));
                    self.access(r, o, false, false, if o == *obj { Some(inst) } else { None });
                    cur = self.objs.get(&o).and_then(|x| x.tie_children.first().copied());
                }
                self.obs.reads.insert((r, pc), sum);
            }
            Op::Embed { parent, word, child, parent_obj, child_obj } => {
                let (kp, ip) = self.handle(r, *parent, *parent_obj)?;
                let (kc, _) = self.handle(r, *child, *child_obj)?;
                if kp != Kind::Owner || kc != Kind::Owner {
                    return Err(self.err(r, "embed needs two owners"));
                }
                self.take(r, *child);
                // The stored word is an address; the oracle only tracks the link.
                self.objs.get_mut(parent_obj).unwrap().embedded.insert(*word, *child_obj);
                self.access(r, *parent_obj, true, false, Some(ip));
            }
            Op::SumEmbedded { src, next, obj } => {
                let (k, inst) = self.handle(r, *src, *obj)?;
                if k != Kind::Shared {
                    return Err(self.err(r, "embedded sum needs a shared handle"));
                }
                let mut sum = 0u64;
                let mut cur = Some(*obj);
                while let Some(o) = cur {
                    sum = sum.wrapping_add(self.word(o, 0));
                    self.access(r, o, false, false, if o == *obj { Some(inst) } else { None });
                    cur = self.objs.get(&o).and_then(|x| x.embedded.get(next).copied());
                }
                self.obs.reads.insert((r, pc), sum);
            }
            Op::ProjAcquire { src, word, words, mode, dst, obj } => {
                let (k, _) = self.handle(r, *src, *obj)?;
                let ok = match mode {
                    Access::Shared => !matches!(k, Kind::Proj(..) | Kind::Tied),
                    Access::Exclusive => matches!(k, Kind::Owner | Kind::Exclusive | Kind::Stack),
                };
                if !ok {
                    return Err(self.err(r, "projection from an unsuitable handle"));
                }
                let len = self.objs.get(obj).map_or(0, |o| o.words.len()) as u32;
                if *words == 0 || word + words > len {
                    return Err(self.err(r, "projection out of bounds"));
                }
                let inst = self.new_inst(r, *obj, *mode == Access::Exclusive);
                self.set(r, *dst, OVal::Handle { obj: *obj, kind: Kind::Proj(*word, *mode), inst })?;
            }
            Op::ProjRead { proj, word, obj } => {
                let (k, inst) = self.handle(r, *proj, *obj)?;
                let Kind::Proj(start, _) = k else {
                    return Err(self.err(r, "not a projection"));
                };
                let v = self.word(*obj, start + word);
                self.obs.reads.insert((r, pc), v);
                self.access(r, *obj, false, false, Some(inst));
            }
            Op::ProjWrite { proj, word, value, obj } => {
                let (k, inst) = self.handle(r, *proj, *obj)?;
                let Kind::Proj(start, Access::Exclusive) = k else {
                    return Err(self.err(r, "write needs an exclusive projection"));
                };
                self.put(*obj, start + word, *value);
                self.access(r, *obj, true, false, Some(inst));
            }
            Op::StackNew { dst, words, obj } => {
                self.new_obj(r, *obj, vec![0; (*words).max(1) as usize])?;
                let inst = self.new_owner(r, *obj);
                self.set(r, *dst, OVal::Handle { obj: *obj, kind: Kind::Stack, inst })?;
            }
            Op::CountedNew { src, dst, obj } => {
                let (k, _) = self.handle(r, *src, *obj)?;
                if k != Kind::Owner {
                    return Err(self.err(r, "counted handle needs the owner"));
                }
                self.take(r, *src);
                self.objs.get_mut(obj).unwrap().counted = 1;
                let inst = self.new_inst(r, *obj, false);
                self.set(r, *dst, OVal::Handle { obj: *obj, kind: Kind::Counted, inst })?;
            }
            Op::CountedClone { src, dst, obj } => {
                let (k, _) = self.handle(r, *src, *obj)?;
                if k != Kind::Counted {
                    return Err(self.err(r, "clone needs a counted handle"));
                }
                self.objs.get_mut(obj).unwrap().counted += 1;
                let inst = self.new_inst(r, *obj, false);
                self.set(r, *dst, OVal::Handle { obj: *obj, kind: Kind::Counted, inst })?;
            }
            Op::Yield => {}
        }
        Ok(Next::Continue)
    }

    fn new_obj(&mut self, r: u32, obj: ObjNo, words: Vec<u64>) -> Result<(), IllFormed> {
        if self.objs.contains_key(&obj) {
            return Err(self.err(r, format!("object number {obj} allocated twice")));
        }
        self.objs.insert(obj, OObj { words, live: true, ..Default::default() });
        Ok(())
    }

    fn drop_val(&mut self, r: u32, v: OVal, named: Option<ObjNo>) -> Result<(), IllFormed> {
        match v {
            OVal::Handle { obj, kind, inst } => {
                if named.is_some_and(|n| n != obj) {
                    return Err(self.err(r, format!("drop names object {}, handle refers to {obj}", named.unwrap())));
                }
                if !self.objs.get(&obj).is_some_and(|o| o.live) {
                    return Err(self.err(r, format!("object {obj} dropped after free")));
                }
                self.end_inst(r, inst);
                match kind {
                    Kind::Owner | Kind::Stack => {
                        let open =
                            self.intervals.iter().any(|(&i, iv)| i != inst && iv.obj == obj && iv.end.is_none() && !iv.owner);
                        if open {
                            return Err(self.err(r, format!("object {obj} freed while references are live")));
                        }
                        self.access(r, obj, true, false, Some(inst));
                        self.kill(obj);
                    }
                    Kind::Counted => {
                        let o = self.objs.get_mut(&obj).unwrap();
                        o.counted -= 1;
                        if o.counted == 0 {
                            self.kill(obj);
                        }
                    }
                    _ => {}
                }
            }
            OVal::Guard(mx) => self.mutexes[mx as usize].1 = false,
            OVal::Join(_) => return Err(self.err(r, "join handles must be joined, not dropped")),
            _ => {}
        }
        self.wake_all();
        Ok(())
    }

    /// Pairs of accesses and handle lifetimes that are not ordered by the
    /// program's causality.
    fn check_conflicts(&mut self) {
        let mut out = BTreeSet::new();
        let acc = &self.accesses;
        for (i, a) in acc.iter().enumerate() {
            for b in &acc[i + 1..] {
                if a.obj != b.obj || a.routine == b.routine || !(a.write || b.write) || (a.guarded && b.guarded) {
                    continue;
                }
                let ab = hb(&(a.routine, a.clock.clone()), &b.clock);
                let ba = hb(&(b.routine, b.clock.clone()), &a.clock);
                if !ab && !ba {
                    out.insert(format!(
                        "object {}: unordered {} by routine {} and {} by routine {}",
                        a.obj,
                        if a.write { "write" } else { "read" },
                        a.routine,
                        if b.write { "write" } else { "read" },
                        b.routine
                    ));
                }
            }
        }
        for (&i, iv) in &self.intervals {
            if iv.owner {
                continue;
            }
            let Some(end) = &iv.end else { continue };
            for a in acc {
                if a.obj != iv.obj || a.inst == Some(i) || !(iv.exclusive || a.write) {
                    continue;
                }
                let before = hb(&(a.routine, a.clock.clone()), &iv.start.1) && a.clock != iv.start.1;
                let after = hb(end, &a.clock);
                if !before && !after {
                    out.insert(format!(
                        "object {}: {} by routine {} while {} handle {i} is live",
                        iv.obj,
                        if a.write { "write" } else { "read" },
                        a.routine,
                        if iv.exclusive { "an exclusive" } else { "a shared" }
                    ));
                }
            }
        }
        self.obs.swmr_conflicts = out.into_iter().collect();
    }
}

enum Next {
    Continue,
    Block,
    Return,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prog(ops: Vec<Op>) -> ProtoProgram {
        let mut p = ProtoProgram::new("t", 1);
        for op in ops {
            p.push(0, op);
        }
        p
    }

    #[test]
    fn write_then_read() {
        let p = prog(vec![
            Op::Alloc { dst: 0, obj: 0, init: vec![0], on: None },
            Op::Write { dst: 0, word: 0, value: 7, obj: 0 },
            Op::Read { src: 0, word: 0, obj: 0 },
            Op::Drop { var: 0, obj: Some(0) },
        ]);
        let o = sequential_oracle(&p).unwrap();
        assert_eq!(o.reads[&(0, 2)], 7);
        assert!(o.conforming());
    }

    #[test]
    fn leaked_handle_is_ill_formed() {
        let p = prog(vec![Op::Alloc { dst: 0, obj: 0, init: vec![1], on: None }]);
        assert!(sequential_oracle(&p).is_err());
    }

    #[test]
    fn use_after_drop_is_ill_formed() {
        let p = prog(vec![
            Op::Alloc { dst: 0, obj: 0, init: vec![1], on: None },
            Op::MakeShared { src: 0, dst: 1, obj: 0 },
            Op::Drop { var: 0, obj: Some(0) },
            Op::Read { src: 1, word: 0, obj: 0 },
        ]);
        assert!(sequential_oracle(&p).is_err());
    }

    #[test]
    fn transfer_then_read_at_destination() {
        let mut p = ProtoProgram::new("t", 2);
        let c = p.add_routine();
        p.push(0, Op::Alloc { dst: 0, obj: 0, init: vec![3], on: None })
            .push(0, Op::Write { dst: 0, word: 0, value: 9, obj: 0 })
            .push(0, Op::Spawn { routine: c, place: crate::verifier::program::Place::Node(1), args: vec![0], dst: 1 })
            .push(0, Op::Join { src: 1, dst: None });
        p.push(c, Op::Read { src: 0, word: 0, obj: 0 }).push(c, Op::Drop { var: 0, obj: Some(0) });
        let o = sequential_oracle(&p).unwrap();
        assert_eq!(o.reads[&(1, 0)], 9);
        assert!(o.conforming());
    }

    #[test]
    fn write_during_lent_share_conflicts() {
        let mut p = ProtoProgram::new("t", 2);
        let c = p.add_routine();
        p.push(0, Op::Alloc { dst: 0, obj: 0, init: vec![3], on: None })
            .push(0, Op::MakeShared { src: 0, dst: 1, obj: 0 })
            .push(0, Op::Spawn { routine: c, place: crate::verifier::program::Place::Node(1), args: vec![1], dst: 2 })
            .push(0, Op::Write { dst: 0, word: 0, value: 4, obj: 0 })
            .push(0, Op::Join { src: 2, dst: None })
            .push(0, Op::Drop { var: 0, obj: Some(0) });
        p.push(c, Op::Read { src: 0, word: 0, obj: 0 }).push(c, Op::Drop { var: 0, obj: Some(0) });
        let o = sequential_oracle(&p).unwrap();
        assert!(!o.conforming());
    }
}
