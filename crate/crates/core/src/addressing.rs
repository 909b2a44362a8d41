//! Global address encoding.
//!
//! A [`GlobalAddr`] is a 64-bit word: the top 16 bits hold a version
//! counter (the *color*), the low 48 bits hold an offset into the global
//! heap. The offset space is cut into equal per-node partitions by a
//! [`PartitionMap`]. An [`ExtWord`] is the companion word carried by every
//! handle; its top bit is the `U` flag recording that the current write
//! epoch has already bumped the color.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type NodeId = u16;

/// Width of the color field inside the raw word. The number of colors
/// actually used is bounded separately by [`ColorBits`].
pub const COLOR_SHIFT: u32 = 48;
pub const BASE_MASK: u64 = (1 << COLOR_SHIFT) - 1;
pub const U_BIT: u64 = 1 << 63;

/// Number of usable color bits (1..=16). Colors range over `0..2^bits`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ColorBits(u8);

impl ColorBits {
    pub const DEFAULT: ColorBits = ColorBits(16);

    pub fn new(bits: u8) -> Result<Self> {
        if (1..=16).contains(&bits) {
            Ok(ColorBits(bits))
        } else {
            Err(Error::Config(format!("color_bits must be in 1..=16, got {bits}")))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// Largest representable color, `2^bits - 1`.
    pub fn max_color(self) -> u64 {
        (1u64 << self.0) - 1
    }
}

impl Default for ColorBits {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// Colored global heap address.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct GlobalAddr(pub u64);

impl GlobalAddr {
    pub const NULL: GlobalAddr = GlobalAddr(0);

    pub fn from_base(base: u64) -> Self {
        GlobalAddr(base & BASE_MASK)
    }

    pub fn raw(self) -> u64 {
        self.0
    }

    pub fn is_null(self) -> bool {
        self.base() == 0
    }

    pub fn color(self) -> u64 {
        get_color(self)
    }

    pub fn base(self) -> u64 {
        clear_color(self)
    }

    pub fn with_color(self, color: u64, bits: ColorBits) -> Result<Self> {
        append_color(self, color, bits)
    }
}

impl fmt::Debug for GlobalAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self)
    }
}

impl fmt::Display for GlobalAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{:#x}", self.color(), self.base())
    }
}

/// Returns bits 63..48.
pub fn get_color(g: GlobalAddr) -> u64 {
    g.0 >> COLOR_SHIFT
}

/// Zeroes the color bits.
pub fn clear_color(g: GlobalAddr) -> u64 {
    g.0 & BASE_MASK
}

/// Replaces the color of `g` with `c`; rejects colors that do not fit in
/// `bits`.
pub fn append_color(g: GlobalAddr, c: u64, bits: ColorBits) -> Result<GlobalAddr> {
    if c > bits.max_color() {
        return Err(Error::ColorOverflow { color: c, bits: bits.get() });
    }
    Ok(GlobalAddr(clear_color(g) | (c << COLOR_SHIFT)))
}

/// Extension word: `U` flag in bit 63, 63-bit payload below it.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ExtWord(pub u64);

impl ExtWord {
    pub const NULL: ExtWord = ExtWord(0);

    pub fn with_payload(payload: u64) -> Self {
        ExtWord(payload & !U_BIT)
    }

    pub fn payload(self) -> u64 {
        clear_u_bit(self)
    }

    pub fn updated(self) -> bool {
        color_updated(self)
    }

    pub fn set_u(self) -> Self {
        ExtWord(self.0 | U_BIT)
    }

    pub fn reset_u(self) -> Self {
        ExtWord(clear_u_bit(self))
    }
}

impl fmt::Debug for ExtWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ext(u={}, {:#x})", self.updated() as u8, self.payload())
    }
}

pub fn color_updated(e: ExtWord) -> bool {
    (e.0 >> 63) & 1 == 1
}

pub fn clear_u_bit(e: ExtWord) -> u64 {
    e.0 & (U_BIT - 1)
}

/// Static split of the offset space into `nodes` ranges of `unit_size`
/// bytes each. Node `i` owns `[i * unit_size, (i + 1) * unit_size)`;
/// offset 0 is the reserved null address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PartitionMap {
    nodes: u16,
    unit_size: u64,
}

impl PartitionMap {
    pub fn new(nodes: u16, unit_size: u64) -> Result<Self> {
        if nodes == 0 {
            return Err(Error::Config("cluster needs at least one node".into()));
        }
        if unit_size < 64 {
            return Err(Error::Config(format!("unit heap size {unit_size} is too small")));
        }
        let end = (nodes as u128) * (unit_size as u128);
        if end > BASE_MASK as u128 {
            return Err(Error::Config("partitions exceed the 48-bit address space".into()));
        }
        Ok(PartitionMap { nodes, unit_size })
    }

    pub fn node_count(&self) -> u16 {
        self.nodes
    }

    pub fn unit_size(&self) -> u64 {
        self.unit_size
    }

    pub fn range(&self, node: NodeId) -> std::ops::Range<u64> {
        let start = node as u64 * self.unit_size;
        start..start + self.unit_size
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> {
        0..self.nodes
    }

    /// Owning node of a non-null, in-range base offset.
    pub fn node_of_base(&self, base: u64) -> Result<NodeId> {
        if base == 0 {
            return Err(Error::NullAddress);
        }
        let node = base / self.unit_size;
        if node >= self.nodes as u64 {
            return Err(Error::OutOfRange(base));
        }
        Ok(node as NodeId)
    }

    pub fn node_of(&self, g: GlobalAddr) -> Result<NodeId> {
        self.node_of_base(clear_color(g))
    }

    pub fn is_local(&self, g: GlobalAddr, me: NodeId) -> Result<bool> {
        Ok(self.node_of(g)? == me)
    }

    pub fn check_node(&self, node: NodeId) -> Result<()> {
        if node < self.nodes {
            Ok(())
        } else {
            Err(Error::UnknownNode(node))
        }
    }

    /// `color:node:offset` rendering used in logs and reports.
    pub fn describe(&self, g: GlobalAddr) -> String {
        match self.node_of(g) {
            Ok(n) => format!("{}:{}:{:#x}", g.color(), n, g.base() - self.range(n).start),
            Err(_) => format!("{}:?:{:#x}", g.color(), g.base()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MIB: u64 = 1 << 20;

    #[test]
    fn color_extraction() {
        assert_eq!(get_color(GlobalAddr(0x0005_0000_0000_1234)), 5);
        assert_eq!(get_color(GlobalAddr(0x10)), 0);
        assert_eq!(clear_color(GlobalAddr(0x0005_0000_0000_1234)), 0x1234);
    }

    #[test]
    fn append_color_cases() {
        let bits = ColorBits::DEFAULT;
        let g = GlobalAddr(0x0002_0000_0000_1234);
        assert_eq!(append_color(g, 3, bits).unwrap(), GlobalAddr(0x0003_0000_0000_1234));
        assert_eq!(append_color(g, 0, bits).unwrap().raw(), clear_color(g));
        assert!(matches!(append_color(g, 1 << 16, bits), Err(Error::ColorOverflow { .. })));
        let two = ColorBits::new(2).unwrap();
        assert!(append_color(g, 3, two).is_ok());
        assert!(append_color(g, 4, two).is_err());
    }

    #[test]
    fn u_bit_cases() {
        assert!(color_updated(ExtWord(0x8000_0000_0000_0000)));
        assert!(!color_updated(ExtWord(0)));
        assert_eq!(clear_u_bit(ExtWord(0x8000_0000_0000_0010)), 0x10);
        assert_eq!(clear_u_bit(ExtWord(0)), 0);
    }

    #[test]
    fn partition_lookup() {
        let map = PartitionMap::new(4, MIB).unwrap();
        assert_eq!(map.node_of_base(2 * MIB + 8).unwrap(), 2);
        assert_eq!(map.node_of_base(0x10).unwrap(), 0);
        assert_eq!(map.node_of_base(4 * MIB), Err(Error::OutOfRange(4 * MIB)));
        assert_eq!(map.node_of_base(0), Err(Error::NullAddress));

        let g = GlobalAddr::from_base(0x40);
        assert!(map.is_local(g, 0).unwrap());
        assert!(!map.is_local(g, 1).unwrap());
        assert_eq!(map.is_local(GlobalAddr::NULL, 0), Err(Error::NullAddress));
        // The color never participates in locality.
        let colored = append_color(g, 9, ColorBits::DEFAULT).unwrap();
        assert!(map.is_local(colored, 0).unwrap());
    }

    #[test]
    fn describe_format() {
        let map = PartitionMap::new(2, MIB).unwrap();
        let g = append_color(GlobalAddr::from_base(MIB + 0x20), 3, ColorBits::DEFAULT).unwrap();
        assert_eq!(map.describe(g), "3:1:0x20");
    }

    proptest! {
        #[test]
        fn color_roundtrip(raw in any::<u64>(), bits in prop::sample::select(vec![2u8, 8, 16]), c in any::<u64>()) {
            let bits = ColorBits::new(bits).unwrap();
            let g = GlobalAddr(raw);
            let c = c % (bits.max_color() + 1);
            let colored = append_color(g, c, bits).unwrap();
            prop_assert_eq!(get_color(colored), c);
            prop_assert_eq!(clear_color(colored), clear_color(g));
            prop_assert_eq!(clear_color(GlobalAddr(clear_color(g))), clear_color(g));
            prop_assert!(append_color(g, bits.max_color() + 1, bits).is_err());
        }

        #[test]
        fn u_bit_roundtrip(raw in any::<u64>()) {
            let e = ExtWord(raw);
            prop_assert!(color_updated(e.set_u()));
            prop_assert!(!color_updated(e.reset_u()));
            prop_assert_eq!(clear_u_bit(ExtWord(clear_u_bit(e))), clear_u_bit(e));
            prop_assert_eq!(e.set_u().payload(), e.payload());
        }

        #[test]
        fn node_of_agrees_with_is_local(nodes in 1u16..8, base in 1u64..(8 * MIB)) {
            let map = PartitionMap::new(nodes, MIB).unwrap();
            let g = GlobalAddr::from_base(base);
            match map.node_of(g) {
                Ok(owner) => {
                    prop_assert!(map.range(owner).contains(&base));
                    for n in map.nodes() {
                        prop_assert_eq!(map.is_local(g, n).unwrap(), n == owner);
                    }
                }
                Err(e) => {
                    prop_assert_eq!(e, Error::OutOfRange(base));
                    prop_assert!(base >= nodes as u64 * MIB);
                }
            }
        }
    }
}
