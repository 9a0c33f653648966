//! Least-recent-batch-used cache of remote neighbour lists.
//!
//! Mutation (`insert`, `seal`, `release`) happens only in an extend
//! operator's fetch stage from a single writer. Reads (`get`, `contains`)
//! take `&self` and are shared across workers during the intersect stage.

use std::collections::{BTreeSet, HashMap, HashSet};

use crate::error::{Error, Result};
use crate::VertexId;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    /// Total neighbour entries resident.
    pub occupancy: usize,
    pub resident_vertices: usize,
}

#[derive(Debug)]
pub struct LrbuCache {
    capacity: usize,
    entries: HashMap<VertexId, Box<[VertexId]>>,
    /// `(order, vertex)` so the first element is the least recent batch.
    free: BTreeSet<(u64, VertexId)>,
    free_order: HashMap<VertexId, u64>,
    sealed: HashSet<VertexId>,
    occupancy: usize,
    epoch: u64,
    evicted_log: Option<Vec<(VertexId, u64)>>,
    stats: CacheStats,
}

impl LrbuCache {
    /// `capacity` counts neighbour entries across all cached lists.
    pub fn new(capacity: usize) -> LrbuCache {
        LrbuCache {
            capacity,
            entries: HashMap::new(),
            free: BTreeSet::new(),
            free_order: HashMap::new(),
            sealed: HashSet::new(),
            occupancy: 0,
            epoch: 0,
            evicted_log: None,
            stats: CacheStats::default(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, vid: VertexId) -> Result<&[VertexId]> {
        self.entries
            .get(&vid)
            .map(|b| &b[..])
            .ok_or(Error::CacheMiss(vid))
    }

    pub fn contains(&self, vid: VertexId) -> bool {
        self.entries.contains_key(&vid)
    }

    fn full_for(&self, incoming: usize) -> bool {
        self.occupancy + incoming > self.capacity
    }

    /// Stores a list, first evicting least-recent-batch entries while the
    /// cache is full and unsealed entries remain. Sealed entries are never
    /// evicted, so the cache may overflow by the current batch's lists.
    pub fn insert(&mut self, vid: VertexId, neighbours: Box<[VertexId]>) {
        debug_assert!(!self.entries.contains_key(&vid), "vertex {vid} already cached");
        self.epoch += 1;
        self.evict_for(neighbours.len());
        self.occupancy += neighbours.len();
        self.entries.insert(vid, neighbours);
    }

    /// Protects `vid` from eviction until the next `release`.
    pub fn seal(&mut self, vid: VertexId) -> Result<()> {
        if !self.entries.contains_key(&vid) {
            return Err(Error::CacheMiss(vid));
        }
        self.epoch += 1;
        if let Some(order) = self.free_order.remove(&vid) {
            self.free.remove(&(order, vid));
        }
        self.sealed.insert(vid);
        Ok(())
    }

    /// Moves all sealed entries to the free set, ordered after every
    /// currently free entry, then trims the cache back to capacity.
    pub fn release(&mut self) {
        if self.sealed.is_empty() {
            return;
        }
        self.epoch += 1;
        let order = self.free.iter().next_back().map_or(0, |&(o, _)| o + 1);
        for vid in self.sealed.drain() {
            self.free.insert((order, vid));
            self.free_order.insert(vid, order);
        }
        // Overflow admitted while the batch was sealed goes now.
        self.evict_for(0);
    }

    /// Evicts least-recent free entries until `incoming` more entries fit
    /// or nothing unsealed is left.
    fn evict_for(&mut self, incoming: usize) {
        while self.full_for(incoming) {
            let Some(&(order, victim)) = self.free.iter().next() else {
                break;
            };
            if let Some(log) = &mut self.evicted_log {
                log.push((victim, order));
            }
            self.free.remove(&(order, victim));
            self.free_order.remove(&victim);
            if let Some(list) = self.entries.remove(&victim) {
                self.occupancy -= list.len();
            }
            self.stats.evictions += 1;
        }
    }

    /// Counter bumped by every mutation; reads leave it unchanged.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn order_of(&self, vid: VertexId) -> Option<u64> {
        self.free_order.get(&vid).copied()
    }

    pub fn is_sealed(&self, vid: VertexId) -> bool {
        self.sealed.contains(&vid)
    }

    pub fn sealed_count(&self) -> usize {
        self.sealed.len()
    }

    pub fn sealed_occupancy(&self) -> usize {
        self.sealed.iter().map(|v| self.entries[v].len()).sum()
    }

    pub fn occupancy(&self) -> usize {
        self.occupancy
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub(crate) fn record_hit(&mut self) {
        self.stats.hits += 1;
    }

    pub(crate) fn record_miss(&mut self) {
        self.stats.misses += 1;
    }

    /// Starts recording `(victim, order)` per eviction.
    pub fn track_evictions(&mut self) {
        self.evicted_log = Some(Vec::new());
    }

    pub fn evictions(&self) -> &[(VertexId, u64)] {
        self.evicted_log.as_deref().unwrap_or(&[])
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            occupancy: self.occupancy,
            resident_vertices: self.entries.len(),
            ..self.stats
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn list(n: usize) -> Box<[VertexId]> {
        (0..n as u32).collect()
    }

    #[test]
    fn get_and_contains() {
        let mut c = LrbuCache::new(10);
        assert!(!c.contains(5));
        assert!(matches!(c.get(5), Err(Error::CacheMiss(5))));
        c.insert(5, vec![1, 2].into());
        assert!(c.contains(5));
        assert_eq!(c.get(5).unwrap(), &[1, 2]);
        let a = c.get(5).unwrap().as_ptr();
        let b = c.get(5).unwrap().as_ptr();
        assert_eq!(a, b);
    }

    #[test]
    fn reads_do_not_mutate() {
        let mut c = LrbuCache::new(4);
        c.insert(1, list(2));
        let e = c.epoch();
        let _ = c.get(1);
        let _ = c.contains(1);
        let _ = c.get(9);
        assert_eq!(c.epoch(), e);
    }

    #[test]
    fn oldest_batch_evicted() {
        // Capacity of two single-entry lists.
        let mut c = LrbuCache::new(2);
        c.insert(10, list(1));
        c.seal(10).unwrap();
        c.release();
        c.insert(11, list(1));
        c.seal(11).unwrap();
        c.release();
        c.insert(12, list(1));
        assert!(!c.contains(10));
        assert!(c.contains(11) && c.contains(12));
        assert_eq!(c.stats().evictions, 1);
    }

    #[test]
    fn overflow_when_everything_sealed() {
        let mut c = LrbuCache::new(1);
        c.insert(1, list(1));
        c.seal(1).unwrap();
        c.insert(2, list(1));
        assert!(c.contains(1) && c.contains(2));
        assert_eq!(c.occupancy(), 2);
    }

    #[test]
    fn no_eviction_when_not_full() {
        let mut c = LrbuCache::new(10);
        c.insert(1, list(3));
        c.release();
        c.insert(2, list(3));
        assert_eq!(c.stats().evictions, 0);
    }

    #[test]
    fn seal_semantics() {
        let mut c = LrbuCache::new(2);
        c.insert(1, list(1));
        assert!(!c.is_sealed(1));
        c.seal(1).unwrap();
        c.seal(1).unwrap();
        assert!(c.is_sealed(1));
        assert_eq!(c.sealed_count(), 1);
        c.insert(2, list(1));
        c.insert(3, list(1));
        assert!(c.contains(1));
        assert!(c.seal(42).is_err());
    }

    #[test]
    fn release_orders() {
        let mut c = LrbuCache::new(100);
        c.release();
        assert_eq!(c.epoch(), 0);
        c.insert(1, list(1));
        c.insert(2, list(1));
        c.seal(1).unwrap();
        c.seal(2).unwrap();
        c.release();
        assert_eq!((c.order_of(1), c.order_of(2)), (Some(0), Some(0)));
        c.insert(3, list(1));
        c.seal(3).unwrap();
        c.release();
        assert_eq!(c.order_of(3), Some(1));
        // re-sealing a free vertex then releasing moves it to the newest batch
        c.seal(1).unwrap();
        assert_eq!(c.order_of(1), None);
        c.release();
        assert_eq!(c.order_of(1), Some(2));
    }

    #[test]
    fn batches_evicted_in_fifo_order() {
        let mut c = LrbuCache::new(6);
        c.track_evictions();
        for batch in 0..3u32 {
            for i in 0..2 {
                let v = batch * 10 + i;
                c.insert(v, list(1));
                c.seal(v).unwrap();
            }
            c.release();
        }
        // four more entries force out the first two batches
        for v in 100..104 {
            c.insert(v, list(1));
            c.seal(v).unwrap();
        }
        let victims: Vec<u32> = c.evictions().iter().map(|e| e.0 / 10).collect();
        assert_eq!(victims, vec![0, 0, 1, 1]);
        assert!(c.contains(20) && c.contains(21));
    }

    #[derive(Clone, Debug)]
    enum Op {
        Insert(u32, usize),
        Seal(u32),
        Release,
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0u32..40, 1usize..5).prop_map(|(v, n)| Op::Insert(v, n)),
            (0u32..40).prop_map(Op::Seal),
            Just(Op::Release),
        ]
    }

    proptest! {
        #[test]
        fn policy_invariants(ops in proptest::collection::vec(op(), 1..200), cap in 0usize..20) {
            let mut c = LrbuCache::new(cap);
            c.track_evictions();
            for op in ops {
                match op {
                    Op::Insert(v, n) => {
                        if c.contains(v) { continue; }
                        let logged = c.evictions().len();
                        // the fetch stage seals every list it inserts
                        c.insert(v, list(n));
                        c.seal(v).unwrap();
                        let remaining_min = c.free.iter().next().map(|&(o, _)| o);
                        for &(_, order) in &c.evictions()[logged..] {
                            prop_assert!(remaining_min.map_or(true, |m| order <= m));
                        }
                        prop_assert!(c.occupancy() <= cap + c.sealed_occupancy());
                    }
                    Op::Seal(v) => { let _ = c.seal(v); }
                    Op::Release => {
                        let expected = c.free.iter().next_back().map_or(0, |&(o, _)| o + 1);
                        let sealed: Vec<u32> = c.sealed.iter().copied().collect();
                        c.release();
                        for s in sealed.into_iter().filter(|&s| c.contains(s)) {
                            prop_assert_eq!(c.order_of(s), Some(expected));
                        }
                        prop_assert!(c.occupancy() <= cap);
                    }
                }
                prop_assert!(c.occupancy() <= cap + c.sealed_occupancy());
                prop_assert!(c.sealed.iter().all(|v| !c.free_order.contains_key(v)));
                prop_assert_eq!(c.free.len(), c.free_order.len());
                prop_assert!(c.free_order.keys().all(|v| c.entries.contains_key(v)));
                prop_assert!(c.sealed.iter().all(|v| c.entries.contains_key(v)));
                let occ: usize = c.entries.values().map(|l| l.len()).sum();
                prop_assert_eq!(occ, c.occupancy());
            }
        }
    }
}
