//! Seeded random programs.
//!
//! Programs are built from blocks that respect SWMR by construction: an
//! object lent to a child is not written by the parent until the child is
//! joined, an exclusive loan blocks every other use, and moved owners come
//! back only through a join. With `swmr = false` some programs also get
//! one deliberate conflict.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::addressing::NodeId;
use crate::verifier::program::{ObjNo, Op, Place, ProtoProgram, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenConfig {
    pub max_nodes: u16,
    /// Root plus children.
    pub max_tasks: usize,
    pub max_ops: usize,
    pub swmr: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { max_nodes: 3, max_tasks: 3, max_ops: 8, swmr: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Loan {
    None,
    Shared,
    Exclusive,
}

#[derive(Debug, Clone)]
struct Held {
    var: Var,
    obj: ObjNo,
    words: u32,
    loan: Loan,
    /// Child the object went to (loan or move).
    child: Option<usize>,
}

#[derive(Debug, Clone)]
struct Child {
    join_var: Var,
    /// Object (and its word count) the child hands back.
    returns: Option<(ObjNo, u32)>,
    joined: bool,
}

struct Gen<'a> {
    rng: &'a mut ChaCha8Rng,
    cfg: GenConfig,
    prog: ProtoProgram,
    next_var: Var,
    next_obj: ObjNo,
    held: Vec<Held>,
    children: Vec<Child>,
    violated: bool,
}

/// `count` programs from `seed`; identical seeds give identical programs.
pub fn generate_programs(seed: u64, count: usize, cfg: GenConfig) -> Vec<ProtoProgram> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|i| generate_one(&mut rng, cfg, format!("gen-{seed}-{i}"))).collect()
}

pub fn generate_one(rng: &mut ChaCha8Rng, cfg: GenConfig, name: String) -> ProtoProgram {
    let nodes = rng.gen_range(1..=cfg.max_nodes.max(1));
    let mut prog = ProtoProgram::new(name, nodes);
    prog.root_node = rng.gen_range(0..nodes);
    let mut g = Gen { rng, cfg, prog, next_var: 0, next_obj: 0, held: Vec::new(), children: Vec::new(), violated: false };
    g.build();
    g.prog
}

impl Gen<'_> {
    fn var(&mut self) -> Var {
        self.next_var += 1;
        self.next_var - 1
    }

    fn node(&mut self) -> NodeId {
        self.rng.gen_range(0..self.prog.nodes)
    }

    fn value(&mut self) -> u64 {
        self.rng.gen_range(1..100)
    }

    fn root_ops(&self) -> usize {
        self.prog.routines[0].ops.len()
    }

    fn emit(&mut self, op: Op) {
        self.prog.push(0, op);
    }

    /// Ops the root still needs to release everything.
    fn cleanup_cost(&self) -> usize {
        let joins = self.children.iter().filter(|c| !c.joined).count();
        let returned = self.children.iter().filter(|c| !c.joined && c.returns.is_some()).count();
        let drops = self.held.iter().filter(|h| h.child.is_none() || h.loan != Loan::None).count();
        joins + returned + drops
    }

    fn room(&self, n: usize) -> bool {
        self.root_ops() + n + self.cleanup_cost() <= self.cfg.max_ops
    }

    fn pick_held(&mut self, pred: impl Fn(&Held) -> bool) -> Option<usize> {
        let idx: Vec<usize> = (0..self.held.len()).filter(|&i| pred(&self.held[i])).collect();
        idx.choose(self.rng).copied()
    }

    fn place(&mut self, near: Var) -> Place {
        match self.rng.gen_range(0..4) {
            0 => Place::Auto,
            1 => Place::Near(near),
            _ => {
                let n = self.node();
                Place::Node(n)
            }
        }
    }

    fn build(&mut self) {
        let mut attempts = 0;
        while attempts < 40 {
            attempts += 1;
            let can_child = self.prog.routines.len() < self.cfg.max_tasks;
            match self.rng.gen_range(0..12) {
                0 | 1 if self.held.len() < 2 && self.room(2) => self.alloc(),
                2 => self.write_owner(),
                3 => self.read_owner(),
                4 => self.exclusive_block(),
                5 => self.share_local(),
                6 if can_child => self.share_to_child(),
                7 if can_child => self.exclusive_to_child(),
                8 if can_child => self.move_to_child(),
                9 if can_child => self.send_to_child(),
                10 => self.join_one(),
                _ if !self.cfg.swmr && !self.violated && self.rng.gen_bool(0.5) => self.violate(),
                _ => {}
            }
        }
        if self.held.is_empty() && self.root_ops() == 0 {
            self.alloc();
            self.read_owner();
        }
        self.cleanup();
    }

    fn alloc(&mut self) {
        let words = self.rng.gen_range(1..=2);
        let init = (0..words).map(|_| self.rng.gen_range(0..50)).collect();
        let on = if self.rng.gen_bool(0.5) { Some(self.node()) } else { None };
        let (var, obj) = (self.var(), self.next_obj);
        self.next_obj += 1;
        self.emit(Op::Alloc { dst: var, obj, init, on });
        self.held.push(Held { var, obj, words, loan: Loan::None, child: None });
    }

    fn write_owner(&mut self) {
        if !self.room(1) {
            return;
        }
        let Some(i) = self.pick_held(|h| h.child.is_none()) else { return };
        let (var, obj, words) = (self.held[i].var, self.held[i].obj, self.held[i].words);
        let word = self.rng.gen_range(0..words);
        let value = self.value();
        self.emit(Op::Write { dst: var, word, value, obj });
    }

    fn read_owner(&mut self) {
        if !self.room(1) {
            return;
        }
        let Some(i) = self.pick_held(|h| h.child.is_none() || h.loan == Loan::Shared) else { return };
        let (var, obj, words) = (self.held[i].var, self.held[i].obj, self.held[i].words);
        let word = self.rng.gen_range(0..words);
        self.emit(Op::Read { src: var, word, obj });
    }

    fn exclusive_block(&mut self) {
        if !self.room(4) {
            return;
        }
        let Some(i) = self.pick_held(|h| h.child.is_none()) else { return };
        let (var, obj, words) = (self.held[i].var, self.held[i].obj, self.held[i].words);
        let m = self.var();
        self.emit(Op::MakeExclusive { src: var, dst: m, obj });
        let word = self.rng.gen_range(0..words);
        let value = self.value();
        self.emit(Op::Write { dst: m, word, value, obj });
        if self.rng.gen_bool(0.5) {
            self.emit(Op::Read { src: m, word, obj });
        }
        self.emit(Op::Drop { var: m, obj: Some(obj) });
    }

    fn share_local(&mut self) {
        if !self.room(3) {
            return;
        }
        let Some(i) = self.pick_held(|h| h.child.is_none() || h.loan == Loan::Shared) else { return };
        let (var, obj, words) = (self.held[i].var, self.held[i].obj, self.held[i].words);
        let s = self.var();
        self.emit(Op::MakeShared { src: var, dst: s, obj });
        let word = self.rng.gen_range(0..words);
        self.emit(Op::Read { src: s, word, obj });
        self.emit(Op::Drop { var: s, obj: Some(obj) });
    }

    fn new_child(&mut self, ops: Vec<Op>, returns: Option<(ObjNo, u32)>) -> (u32, Var) {
        let r = self.prog.add_routine();
        for op in ops {
            self.prog.push(r, op);
        }
        let join_var = self.var();
        self.children.push(Child { join_var, returns, joined: false });
        (r, join_var)
    }

    fn child_reads(&mut self, obj: ObjNo, words: u32, max: usize) -> Vec<Op> {
        let n = self.rng.gen_range(1..=max);
        let mut ops = Vec::new();
        for _ in 0..n {
            if self.rng.gen_bool(0.25) {
                ops.push(Op::Yield);
            }
            ops.push(Op::Read { src: 0, word: self.rng.gen_range(0..words), obj });
        }
        ops
    }

    fn share_to_child(&mut self) {
        if !self.room(3) {
            return;
        }
        let Some(i) = self.pick_held(|h| h.child.is_none()) else { return };
        let (var, obj, words) = (self.held[i].var, self.held[i].obj, self.held[i].words);
        let s = self.var();
        self.emit(Op::MakeShared { src: var, dst: s, obj });
        let mut ops = self.child_reads(obj, words, 2);
        ops.push(Op::Drop { var: 0, obj: Some(obj) });
        let place = self.place(s);
        let (r, jv) = self.new_child(ops, None);
        self.emit(Op::Spawn { routine: r, place, args: vec![s], dst: jv });
        self.held[i].loan = Loan::Shared;
        self.held[i].child = Some(self.children.len() - 1);
    }

    fn exclusive_to_child(&mut self) {
        if !self.room(3) {
            return;
        }
        let Some(i) = self.pick_held(|h| h.child.is_none()) else { return };
        let (var, obj, words) = (self.held[i].var, self.held[i].obj, self.held[i].words);
        let m = self.var();
        self.emit(Op::MakeExclusive { src: var, dst: m, obj });
        let mut ops = Vec::new();
        if self.rng.gen_bool(0.3) {
            ops.push(Op::Read { src: 0, word: self.rng.gen_range(0..words), obj });
        }
        ops.push(Op::Write { dst: 0, word: self.rng.gen_range(0..words), value: self.value(), obj });
        if self.rng.gen_bool(0.5) {
            ops.push(Op::Read { src: 0, word: self.rng.gen_range(0..words), obj });
        }
        ops.push(Op::Drop { var: 0, obj: Some(obj) });
        let place = self.place(m);
        let (r, jv) = self.new_child(ops, None);
        self.emit(Op::Spawn { routine: r, place, args: vec![m], dst: jv });
        self.held[i].loan = Loan::Exclusive;
        self.held[i].child = Some(self.children.len() - 1);
    }

    fn owner_work(&mut self, obj: ObjNo, words: u32, var: Var) -> Vec<Op> {
        let mut ops = Vec::new();
        for _ in 0..self.rng.gen_range(1..=3) {
            let word = self.rng.gen_range(0..words);
            if self.rng.gen_bool(0.5) {
                ops.push(Op::Write { dst: var, word, value: self.value(), obj });
            } else {
                ops.push(Op::Read { src: var, word, obj });
            }
        }
        ops
    }

    fn move_to_child(&mut self) {
        if !self.room(2) {
            return;
        }
        let Some(i) = self.pick_held(|h| h.child.is_none()) else { return };
        let h = self.held.remove(i);
        let mut ops = self.owner_work(h.obj, h.words, 0);
        ops.push(Op::Return { var: 0 });
        let place = self.place(h.var);
        let (r, jv) = self.new_child(ops, Some((h.obj, h.words)));
        self.emit(Op::Spawn { routine: r, place, args: vec![h.var], dst: jv });
    }

    fn send_to_child(&mut self) {
        if !self.room(3) {
            return;
        }
        let Some(i) = self.pick_held(|h| h.child.is_none()) else { return };
        let h = self.held.remove(i);
        let ch = self.var();
        self.emit(Op::ChanNew { dst: ch });
        // Child: variable 0 is the channel, variable 1 the received owner.
        let mut ops = vec![Op::Recv { chan: 0, dst: 1 }];
        ops.extend(self.owner_work(h.obj, h.words, 1));
        ops.push(Op::Drop { var: 1, obj: Some(h.obj) });
        let n = self.node();
        let (r, jv) = self.new_child(ops, None);
        self.emit(Op::Spawn { routine: r, place: Place::Node(n), args: vec![ch], dst: jv });
        self.emit(Op::Send { chan: ch, src: h.var });
    }

    fn join_one(&mut self) {
        let open: Vec<usize> = (0..self.children.len()).filter(|&c| !self.children[c].joined).collect();
        if let Some(&c) = open.choose(self.rng) {
            self.join(c);
        }
    }

    fn join(&mut self, c: usize) {
        let child = self.children[c].clone();
        self.children[c].joined = true;
        match child.returns {
            Some((obj, words)) => {
                let var = self.var();
                self.emit(Op::Join { src: child.join_var, dst: Some(var) });
                self.held.push(Held { var, obj, words, loan: Loan::None, child: None });
            }
            None => self.emit(Op::Join { src: child.join_var, dst: None }),
        }
        for h in self.held.iter_mut() {
            if h.child == Some(c) {
                h.child = None;
                h.loan = Loan::None;
            }
        }
    }

    /// One deliberate SWMR conflict against a live loan.
    fn violate(&mut self) {
        if let Some(i) = self.pick_held(|h| h.loan == Loan::Shared) {
            let (var, obj) = (self.held[i].var, self.held[i].obj);
            let value = self.value();
            self.emit(Op::Write { dst: var, word: 0, value, obj });
            self.violated = true;
        } else if let Some(i) = self.pick_held(|h| h.child.is_none()) {
            // Share while an exclusive handle is live in the same routine.
            let (var, obj) = (self.held[i].var, self.held[i].obj);
            let m = self.var();
            let s = self.var();
            self.emit(Op::MakeExclusive { src: var, dst: m, obj });
            self.emit(Op::Write { dst: m, word: 0, value: 1, obj });
            let child_ops = vec![Op::Read { src: 0, word: 0, obj }, Op::Drop { var: 0, obj: Some(obj) }];
            let (r, jv) = self.new_child(child_ops, None);
            self.emit(Op::MakeShared { src: m, dst: s, obj });
            self.emit(Op::Spawn { routine: r, place: Place::Auto, args: vec![s], dst: jv });
            self.emit(Op::Write { dst: m, word: 0, value: 2, obj });
            self.emit(Op::Drop { var: m, obj: Some(obj) });
            self.violated = true;
        }
    }

    fn cleanup(&mut self) {
        for c in 0..self.children.len() {
            if !self.children[c].joined {
                self.join(c);
            }
        }
        let held = std::mem::take(&mut self.held);
        for h in held {
            self.emit(Op::Drop { var: h.var, obj: Some(h.obj) });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verifier::oracle;

    #[test]
    fn deterministic() {
        let a = generate_programs(7, 20, GenConfig::default());
        let b = generate_programs(7, 20, GenConfig::default());
        assert_eq!(a, b);
    }

    #[test]
    fn within_bounds_and_conforming() {
        for p in generate_programs(1, 100, GenConfig::default()) {
            assert!(p.routines.len() <= 3, "{}", p.listing());
            assert!(p.max_ops_per_routine() <= 8, "{}", p.listing());
            if let Err(e) = oracle::check(&p) {
                panic!("{e}\n{}", p.listing());
            }
        }
    }
}
