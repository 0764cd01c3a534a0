//! Per-session context database.
//!
//! Single-token keys map to at most `N` value windows. Every stored
//! (key, value) pair carries a last-touch stamp from a monotone clock; the
//! oldest pair of a key is dropped when the key overflows, and the globally
//! oldest pair is dropped when the table exceeds its capacity.

use std::collections::{BTreeMap, HashMap};

use crate::corpus::TokenId;

pub const DEFAULT_CAPACITY: usize = 4096;

#[derive(Debug, Clone)]
struct Slot {
    value: Vec<TokenId>,
    touched: u64,
}

/// A (key, value) pair pushed out by an insertion.
pub type Evicted = (TokenId, Vec<TokenId>);

#[derive(Debug, Clone)]
pub struct ContextDb {
    max_values_per_key: usize,
    capacity: usize,
    value_len: usize,
    clock: u64,
    table: HashMap<TokenId, Vec<Slot>>,
    /// stamp -> key of the pair touched at that stamp
    recency: BTreeMap<u64, TokenId>,
    len: usize,
}

impl ContextDb {
    pub fn new(max_values_per_key: usize, value_len: usize, capacity: usize) -> Self {
        assert!(max_values_per_key >= 1 && value_len >= 1 && capacity >= 1);
        ContextDb {
            max_values_per_key,
            capacity,
            value_len,
            clock: 0,
            table: HashMap::new(),
            recency: BTreeMap::new(),
            len: 0,
        }
    }

    /// Number of stored (key, value) pairs.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn value_len(&self) -> usize {
        self.value_len
    }

    pub fn values_for(&self, key: TokenId) -> usize {
        self.table.get(&key).map_or(0, Vec::len)
    }

    /// Empties the table. The clock keeps running.
    pub fn reset(&mut self) {
        self.table.clear();
        self.recency.clear();
        self.len = 0;
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    /// Stores `key -> value`, refreshing it if already present.
    pub fn insert(&mut self, key: TokenId, value: &[TokenId]) -> Option<Evicted> {
        let stamp = self.tick();
        let slots = self.table.entry(key).or_default();
        if let Some(slot) = slots.iter_mut().find(|s| s.value == value) {
            self.recency.remove(&slot.touched);
            slot.touched = stamp;
            self.recency.insert(stamp, key);
            return None;
        }
        slots.push(Slot {
            value: value.to_vec(),
            touched: stamp,
        });
        self.recency.insert(stamp, key);
        self.len += 1;

        if slots.len() > self.max_values_per_key {
            let oldest = (0..slots.len()).min_by_key(|&i| slots[i].touched).unwrap();
            let slot = slots.remove(oldest);
            self.recency.remove(&slot.touched);
            self.len -= 1;
            return Some((key, slot.value));
        }
        if self.len > self.capacity {
            return self.evict_oldest();
        }
        None
    }

    fn evict_oldest(&mut self) -> Option<Evicted> {
        let (stamp, key) = self.recency.pop_first()?;
        let slots = self.table.get_mut(&key)?;
        let i = slots.iter().position(|s| s.touched == stamp)?;
        let slot = slots.remove(i);
        if slots.is_empty() {
            self.table.remove(&key);
        }
        self.len -= 1;
        Some((key, slot.value))
    }

    /// Inserts `seq[i] -> seq[i+1 .. i+1+m]` for every position that has a
    /// successor, in order. Returns everything evicted along the way.
    pub fn ingest(&mut self, seq: &[TokenId]) -> Vec<Evicted> {
        let mut evicted = Vec::new();
        if seq.len() < 2 {
            return evicted;
        }
        for i in 0..seq.len() - 1 {
            let end = (i + 1 + self.value_len).min(seq.len());
            evicted.extend(self.insert(seq[i], &seq[i + 1..end]));
        }
        evicted
    }

    /// Up to `want` values under `key`, most recently used first. The returned
    /// pairs become the most recent ones, keeping their relative order.
    pub fn lookup(&mut self, key: TokenId, want: usize) -> Vec<Vec<TokenId>> {
        if want == 0 {
            return Vec::new();
        }
        let Some(slots) = self.table.get(&key) else {
            return Vec::new();
        };
        let mut order: Vec<usize> = (0..slots.len()).collect();
        order.sort_unstable_by_key(|&i| std::cmp::Reverse(slots[i].touched));
        order.truncate(want);
        let out: Vec<Vec<TokenId>> = order.iter().map(|&i| slots[i].value.clone()).collect();

        for &i in order.iter().rev() {
            let stamp = self.tick();
            let slot = &mut self.table.get_mut(&key).unwrap()[i];
            self.recency.remove(&slot.touched);
            slot.touched = stamp;
            self.recency.insert(stamp, key);
        }
        out
    }
}
