//! Per-node read-only cache of remote objects.
//!
//! Keys are *colored* global addresses, so a write anywhere in the cluster
//! (which changes the owner's color or base) makes every older copy
//! unreachable without sending a message. Copies live in the node's own
//! heap partition; the map only tracks where they are and how many shared
//! handles on this node point at them. Reclamation is lazy.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::addressing::{clear_color, GlobalAddr};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheEntry {
    pub local_base: u64,
    pub count: u32,
}

/// Outcome of [`CacheMap::release`]: when the last reference to a doomed
/// copy goes away, the caller must free `local_base`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Released {
    pub remaining: u32,
    pub free: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheMap {
    entries: BTreeMap<GlobalAddr, CacheEntry>,
    /// Keys invalidated while still referenced.
    doomed: BTreeSet<GlobalAddr>,
    /// Bases invalidated while a fetch for them was in flight.
    poisoned: BTreeSet<u64>,
    in_flight: BTreeSet<u64>,
    /// Fault injection: key entries by the color-stripped address.
    keyed_by_base: bool,
}

impl CacheMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_keyed_by_base(&mut self, on: bool) {
        self.keyed_by_base = on;
    }

    fn key(&self, g: GlobalAddr) -> GlobalAddr {
        if self.keyed_by_base {
            GlobalAddr(clear_color(g))
        } else {
            g
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, g: GlobalAddr) -> Option<CacheEntry> {
        self.entries.get(&self.key(g)).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (GlobalAddr, CacheEntry)> + '_ {
        self.entries.iter().map(|(k, e)| (*k, *e))
    }

    pub fn is_doomed(&self, g: GlobalAddr) -> bool {
        self.doomed.contains(&self.key(g))
    }

    pub fn total_count(&self) -> u64 {
        self.entries.values().map(|e| e.count as u64).sum()
    }

    /// Hit path of the atomic lookup: bumps the count and returns the copy.
    pub fn try_hit(&mut self, g: GlobalAddr) -> Option<u64> {
        let key = self.key(g);
        if self.doomed.contains(&key) {
            return None;
        }
        let e = self.entries.get_mut(&key)?;
        e.count += 1;
        Some(e.local_base)
    }

    /// Marks a fetch for `g` as outstanding so an invalidation that races
    /// with it is not lost.
    pub fn begin_fetch(&mut self, g: GlobalAddr) {
        self.in_flight.insert(clear_color(g));
    }

    /// Miss path: records a freshly fetched copy with count 1. If the base
    /// was invalidated during the fetch the entry is born doomed, so the
    /// copy is used once and reclaimed at release.
    pub fn insert_fetched(&mut self, g: GlobalAddr, local_base: u64) {
        let base = clear_color(g);
        self.in_flight.remove(&base);
        let key = self.key(g);
        if self.poisoned.remove(&base) {
            self.doomed.insert(key);
        }
        self.entries.insert(key, CacheEntry { local_base, count: 1 });
    }

    pub fn abort_fetch(&mut self, g: GlobalAddr) {
        let base = clear_color(g);
        self.in_flight.remove(&base);
        self.poisoned.remove(&base);
    }

    /// Whole acquire step: hit or fetch-and-insert.
    pub fn acquire(&mut self, g: GlobalAddr, fetch: impl FnOnce() -> Result<u64>) -> Result<u64> {
        if let Some(l) = self.try_hit(g) {
            return Ok(l);
        }
        self.begin_fetch(g);
        match fetch() {
            Ok(l) => {
                self.insert_fetched(g, l);
                Ok(l)
            }
            Err(e) => {
                self.abort_fetch(g);
                Err(e)
            }
        }
    }

    pub fn release(&mut self, g: GlobalAddr) -> Result<Released> {
        let key = self.key(g);
        let e = match self.entries.get_mut(&key) {
            Some(e) if e.count > 0 => e,
            _ => return Err(Error::ReleaseWithoutAcquire(g)),
        };
        e.count -= 1;
        let remaining = e.count;
        let local = e.local_base;
        if remaining == 0 && self.doomed.remove(&key) {
            self.entries.remove(&key);
            return Ok(Released { remaining, free: Some(local) });
        }
        Ok(Released { remaining, free: None })
    }

    /// Removes an unreferenced copy so the owner can adopt it as the new
    /// home of the object. `Ok(None)` when nothing is cached.
    pub fn extract_for_promotion(&mut self, g: GlobalAddr) -> Result<Option<u64>> {
        let key = self.key(g);
        match self.entries.get(&key) {
            None => Ok(None),
            Some(e) if e.count > 0 || self.doomed.contains(&key) => Err(Error::SwmrViolation(format!(
                "{} cached copy still has {} shared reference(s)",
                g, e.count
            ))),
            Some(e) => {
                let l = e.local_base;
                self.entries.remove(&key);
                Ok(Some(l))
            }
        }
    }

    /// Drops every copy of `base` regardless of color. Referenced copies
    /// are doomed instead and go away at their final release. Returns the
    /// local copies to free now.
    pub fn invalidate_base(&mut self, base: u64) -> Vec<u64> {
        if self.in_flight.contains(&base) {
            self.poisoned.insert(base);
        }
        let keys: Vec<GlobalAddr> =
            self.entries.keys().filter(|k| clear_color(**k) == base).copied().collect();
        let mut freed = Vec::new();
        for k in keys {
            let e = self.entries[&k];
            if e.count == 0 {
                self.entries.remove(&k);
                self.doomed.remove(&k);
                freed.push(e.local_base);
            } else {
                self.doomed.insert(k);
            }
        }
        freed
    }

    /// Evicts the unreferenced copy cached under exactly `g`, if any.
    pub fn evict(&mut self, g: GlobalAddr) -> Option<u64> {
        let key = self.key(g);
        match self.entries.get(&key) {
            Some(e) if e.count == 0 => {
                let l = e.local_base;
                self.entries.remove(&key);
                self.doomed.remove(&key);
                Some(l)
            }
            _ => None,
        }
    }

    /// Removes all count-0 entries; returns their local copies.
    pub fn sweep_unreferenced(&mut self) -> Vec<u64> {
        let keys: Vec<GlobalAddr> =
            self.entries.iter().filter(|(_, e)| e.count == 0).map(|(k, _)| *k).collect();
        keys.into_iter()
            .map(|k| {
                self.doomed.remove(&k);
                self.entries.remove(&k).unwrap().local_base
            })
            .collect()
    }

    /// Copy-uniqueness audit: no two keys share a local copy.
    pub fn audit(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (k, e) in &self.entries {
            if !seen.insert(e.local_base) {
                return Err(Error::SwmrViolation(format!("local copy {:#x} shared by two keys ({k})", e.local_base)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addressing::{append_color, ColorBits};

    fn g(base: u64, color: u64) -> GlobalAddr {
        append_color(GlobalAddr::from_base(base), color, ColorBits::DEFAULT).unwrap()
    }

    #[test]
    fn miss_then_hit() {
        let mut c = CacheMap::new();
        let mut fetches = 0;
        let a = c.acquire(g(0x100, 0), || { fetches += 1; Ok(0x900) }).unwrap();
        let b = c.acquire(g(0x100, 0), || { fetches += 1; Ok(0x910) }).unwrap();
        assert_eq!((a, b, fetches), (0x900, 0x900, 1));
        assert_eq!(c.get(g(0x100, 0)).unwrap().count, 2);
    }

    #[test]
    fn colors_are_distinct_keys() {
        let mut c = CacheMap::new();
        let mut fetches = 0;
        c.acquire(g(0x100, 0), || { fetches += 1; Ok(0x900) }).unwrap();
        c.acquire(g(0x100, 1), || { fetches += 1; Ok(0x910) }).unwrap();
        assert_eq!(fetches, 2);
        assert_eq!(c.len(), 2);
    }

    #[test]
    fn stripped_keys_collide() {
        let mut c = CacheMap::new();
        c.set_keyed_by_base(true);
        let mut fetches = 0;
        c.acquire(g(0x100, 0), || { fetches += 1; Ok(0x900) }).unwrap();
        c.acquire(g(0x100, 1), || { fetches += 1; Ok(0x910) }).unwrap();
        assert_eq!(fetches, 1);
    }

    #[test]
    fn release_paths() {
        let mut c = CacheMap::new();
        let k = g(0x100, 0);
        c.acquire(k, || Ok(0x900)).unwrap();
        assert_eq!(c.release(k).unwrap(), Released { remaining: 0, free: None });
        assert!(c.get(k).is_some(), "entries are reclaimed lazily");
        assert_eq!(c.release(k), Err(Error::ReleaseWithoutAcquire(k)));
        assert_eq!(c.release(g(0x200, 0)), Err(Error::ReleaseWithoutAcquire(g(0x200, 0))));

        for _ in 0..3 {
            c.acquire(k, || unreachable!()).unwrap();
        }
        for _ in 0..3 {
            c.release(k).unwrap();
        }
        assert_eq!(c.get(k).unwrap().count, 0);
    }

    #[test]
    fn promotion() {
        let mut c = CacheMap::new();
        let k = g(0x100, 2);
        c.acquire(k, || Ok(0x900)).unwrap();
        assert!(matches!(c.extract_for_promotion(k), Err(Error::SwmrViolation(_))));
        c.release(k).unwrap();
        assert_eq!(c.extract_for_promotion(k).unwrap(), Some(0x900));
        assert_eq!(c.extract_for_promotion(k).unwrap(), None);
    }

    #[test]
    fn invalidation() {
        let mut c = CacheMap::new();
        let k = g(0x100, 3);
        c.acquire(k, || Ok(0x900)).unwrap();
        c.release(k).unwrap();
        assert_eq!(c.invalidate_base(0x100), vec![0x900]);
        assert!(c.is_empty());

        c.acquire(k, || Ok(0x910)).unwrap();
        assert!(c.invalidate_base(0x100).is_empty());
        assert!(c.is_doomed(k));
        // A doomed entry is never handed to a new reader.
        let mut refetched = false;
        assert_eq!(c.try_hit(k), None);
        assert_eq!(c.release(k).unwrap().free, Some(0x910));
        assert!(c.is_empty());
        c.acquire(k, || { refetched = true; Ok(0x920) }).unwrap();
        assert!(refetched);

        assert!(c.invalidate_base(0x555).is_empty());
    }

    #[test]
    fn invalidation_racing_a_fetch() {
        let mut c = CacheMap::new();
        let k = g(0x100, 0);
        c.begin_fetch(k);
        c.invalidate_base(0x100);
        c.insert_fetched(k, 0x900);
        assert!(c.is_doomed(k));
        assert_eq!(c.release(k).unwrap().free, Some(0x900));
    }

    #[test]
    fn sweep() {
        let mut c = CacheMap::new();
        assert!(c.sweep_unreferenced().is_empty());
        for (i, base) in [0x100u64, 0x200, 0x300].into_iter().enumerate() {
            c.acquire(g(base, 0), || Ok(0x900 + 16 * i as u64)).unwrap();
        }
        c.acquire(g(0x300, 0), || unreachable!()).unwrap();
        c.release(g(0x100, 0)).unwrap();
        c.release(g(0x200, 0)).unwrap();
        assert_eq!(c.sweep_unreferenced().len(), 2);
        assert_eq!(c.len(), 1);
        let mut refetch = false;
        c.acquire(g(0x100, 0), || { refetch = true; Ok(0x990) }).unwrap();
        assert!(refetch);
        c.audit().unwrap();
    }
}
