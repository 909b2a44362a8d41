//! Model checking of the protocol on the loopback cluster.
//!
//! Programs from [`program`] run under the [`interp`] task body, which
//! keeps a ghost copy of every object and checks each access against it.
//! [`explore`] enumerates schedules, [`oracle`] runs the same program
//! sequentially, [`generate`] produces random programs and [`suite`]
//! holds the fixed scenarios.

pub mod explore;
pub mod generate;
pub mod interp;
pub mod oracle;
pub mod program;
pub mod schedule;
pub mod suite;

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Invariant {
    /// No live exclusive access alongside any other access.
    Swmr,
    /// Writes to one object come from one entity at a time.
    Atomicity,
    /// A modified object is never republished under its old address.
    AddressChangeOnWrite,
    /// Owners see the address left behind by the last writer.
    UpdatedVisible,
    /// Outdated or foreign copies are never read.
    StaleElimination,
    /// Every read returns the latest completed write.
    DataValue,
    /// At quiescence only owned objects are live and no cache entry is held.
    LeakFreedom,
    /// An operation failed in a program that should run cleanly.
    Runtime,
}

impl Invariant {
    pub const ALL: [Invariant; 8] = [
        Invariant::Swmr,
        Invariant::Atomicity,
        Invariant::AddressChangeOnWrite,
        Invariant::UpdatedVisible,
        Invariant::StaleElimination,
        Invariant::DataValue,
        Invariant::LeakFreedom,
        Invariant::Runtime,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Invariant::Swmr => "swmr",
            Invariant::Atomicity => "atomicity",
            Invariant::AddressChangeOnWrite => "address-change-on-write",
            Invariant::UpdatedVisible => "updated-visible",
            Invariant::StaleElimination => "stale-elimination",
            Invariant::DataValue => "data-value",
            Invariant::LeakFreedom => "leak-freedom",
            Invariant::Runtime => "runtime",
        }
    }
}

impl fmt::Display for Invariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Violation {
    pub invariant: Invariant,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.invariant, self.detail)
    }
}
