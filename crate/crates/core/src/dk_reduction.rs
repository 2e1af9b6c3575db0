//! DecreaseKey and Delete on top of any Insert/ExtractMin queue.
//!
//! Every Insert or DecreaseKey of key `k` inserts the augmented key `k∘C`
//! into the base queue, where `C` is a running counter. Two tables kept in
//! internal memory decide which popped pairs are stale: the set `H` of keys
//! already extracted, and the counter value of each key's most recent
//! Insert. After `N0` operations the structure is rebuilt from its live
//! elements and `N0` is set to half their number.
//!
//! The tables are free: only probes made by the base queue are counted.

use std::collections::{HashMap, HashSet};

use crate::io_model::{Device, Word};
use crate::pq::{
    check_user_priority, Capabilities, ExternalQueue, Key, PqError, Priority, PriorityQueue, PRIORITY_NEG_INF,
};

/// Lower bound on the rebuild threshold.
pub const N0_MIN: usize = 16;
/// Bits of the augmented key holding the counter.
pub const DEFAULT_COUNTER_BITS: u32 = 32;

/// Widest counter that still packs every key in `0..universe`, capped to
/// `1..=63` bits.
pub fn counter_bits_for_universe(universe: u64) -> u32 {
    let key_bits = 64 - universe.saturating_sub(1).leading_zeros();
    (64 - key_bits).clamp(1, 63)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RebuildEvent {
    /// Operations performed before this rebuild.
    pub at_op: u64,
    /// Live elements re-inserted.
    pub live: usize,
    /// Threshold set by this rebuild.
    pub n0_after: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReductionCounters {
    pub ops: u64,
    pub rebuilds: u64,
    pub stale_discards: u64,
    pub absent_decreases: u64,
    pub base_inserts: u64,
}

#[derive(Debug, Clone)]
pub struct ReducedQueue<Q> {
    base: Q,
    counter: u64,
    counter_bits: u32,
    extracted: HashSet<Key>,
    last_insert: HashMap<Key, u64>,
    live: usize,
    n0: usize,
    n0_min: usize,
    ops_since_rebuild: usize,
    rebuilding: bool,
    counters: ReductionCounters,
    rebuild_log: Vec<RebuildEvent>,
}

impl<Q: PriorityQueue> ReducedQueue<Q> {
    pub fn new(base: Q) -> Self {
        Self::with_options(base, true, N0_MIN, DEFAULT_COUNTER_BITS)
    }

    /// Gives the counter every bit not needed by keys below `universe`.
    pub fn for_universe(base: Q, universe: u64) -> Self {
        Self::with_options(base, true, N0_MIN, counter_bits_for_universe(universe))
    }

    /// `rebuilding = false` never rebuilds; `counter_bits` must leave room
    /// for the keys in the remaining high bits.
    pub fn with_options(base: Q, rebuilding: bool, n0_min: usize, counter_bits: u32) -> Self {
        assert!((1..64).contains(&counter_bits), "counter bits must be in 1..64");
        ReducedQueue {
            base,
            counter: 0,
            counter_bits,
            extracted: HashSet::new(),
            last_insert: HashMap::new(),
            live: 0,
            n0: n0_min,
            n0_min,
            ops_since_rebuild: 0,
            rebuilding,
            counters: ReductionCounters::default(),
            rebuild_log: Vec::new(),
        }
    }

    pub fn base(&self) -> &Q {
        &self.base
    }

    pub fn base_mut(&mut self) -> &mut Q {
        &mut self.base
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn n0(&self) -> usize {
        self.n0
    }

    pub fn ops_since_rebuild(&self) -> usize {
        self.ops_since_rebuild
    }

    pub fn counters(&self) -> ReductionCounters {
        self.counters
    }

    pub fn rebuild_log(&self) -> &[RebuildEvent] {
        &self.rebuild_log
    }

    /// True when `key` has an Insert more recent than its last extraction.
    pub fn is_live(&self, key: Key) -> bool {
        self.last_insert.contains_key(&key) && !self.extracted.contains(&key)
    }

    pub fn pack(&self, key: Key, c: u64) -> Result<Key, PqError> {
        if key >> (64 - self.counter_bits) != 0 {
            return Err(PqError::Encoding(format!("key {key} leaves no room for the counter")));
        }
        if c >> self.counter_bits != 0 {
            return Err(PqError::Capacity("counter overflow".into()));
        }
        Ok((key << self.counter_bits) | c)
    }

    pub fn unpack(&self, augmented: Key) -> (Key, u64) {
        (
            augmented >> self.counter_bits,
            augmented & ((1u64 << self.counter_bits) - 1),
        )
    }

    fn push(&mut self, key: Key, priority: Priority) -> Result<(), PqError> {
        let ak = self.pack(key, self.counter)?;
        self.base.insert(ak, priority)?;
        self.counter += 1;
        self.counters.base_inserts += 1;
        Ok(())
    }

    /// Pops base pairs until one is current. Returns `Empty` when the base
    /// runs dry.
    fn pop_live(&mut self) -> Result<(Key, Priority), PqError> {
        loop {
            let (ak, p) = self.base.extract_min()?;
            let (k, c) = self.unpack(ak);
            let current = !self.extracted.contains(&k) && self.last_insert.get(&k).is_some_and(|&li| c >= li);
            if current {
                self.extracted.insert(k);
                self.live -= 1;
                return Ok((k, p));
            }
            self.counters.stale_discards += 1;
        }
    }

    fn op_done(&mut self) -> Result<(), PqError> {
        self.counters.ops += 1;
        self.ops_since_rebuild += 1;
        if self.rebuilding && self.ops_since_rebuild >= self.n0 {
            self.rebuild()?;
        }
        Ok(())
    }

    /// Extracts every live element, resets the base and the tables, and
    /// re-inserts the elements with fresh counter values.
    pub fn rebuild(&mut self) -> Result<(), PqError> {
        let mut list = Vec::with_capacity(self.live);
        loop {
            match self.pop_live() {
                Ok(x) => list.push(x),
                Err(PqError::Empty) => break,
                Err(e) => return Err(e),
            }
        }
        self.base.clear()?;
        self.extracted.clear();
        self.last_insert.clear();
        self.counter = 0;
        for &(k, p) in &list {
            self.last_insert.insert(k, self.counter);
            self.push(k, p)?;
        }
        self.live = list.len();
        self.n0 = (list.len() / 2).max(self.n0_min);
        self.ops_since_rebuild = 0;
        self.counters.rebuilds += 1;
        self.rebuild_log.push(RebuildEvent {
            at_op: self.counters.ops,
            live: list.len(),
            n0_after: self.n0,
        });
        Ok(())
    }

    /// Base elements that are not live (stale copies awaiting discard).
    pub fn stale_in_base(&self) -> Option<usize> {
        self.base.len().map(|n| n - self.live)
    }

    /// Report row: base structure, ops, rebuilds, stale discards, probes.
    pub fn csv_row(&self) -> String {
        let probes = self
            .base
            .device()
            .map(|d| d.probe_count().to_string())
            .unwrap_or_default();
        format!(
            "{},{},{},{},{}",
            self.base.name(),
            self.counters.ops,
            self.counters.rebuilds,
            self.counters.stale_discards,
            probes
        )
    }
}

impl<Q: PriorityQueue> PriorityQueue for ReducedQueue<Q> {
    fn name(&self) -> String {
        format!("dk_wrapped({})", self.base.name())
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            decrease_key: true,
            delete: true,
        }
    }

    fn insert(&mut self, key: Key, priority: Priority) -> Result<(), PqError> {
        check_user_priority(priority)?;
        if self.is_live(key) {
            return Err(PqError::DuplicateKey(key));
        }
        self.pack(key, self.counter)?;
        self.extracted.remove(&key);
        self.last_insert.insert(key, self.counter);
        self.push(key, priority)?;
        self.live += 1;
        self.op_done()
    }

    fn extract_min(&mut self) -> Result<(Key, Priority), PqError> {
        let x = self.pop_live()?;
        self.op_done()?;
        Ok(x)
    }

    /// Permitted on absent keys: the pair is stored and later discarded as
    /// stale. Such calls are counted.
    fn decrease_key(&mut self, key: Key, priority: Priority) -> Result<(), PqError> {
        self.decrease_unchecked(key, priority)
    }

    fn delete_key(&mut self, key: Key) -> Result<(), PqError> {
        if !self.is_live(key) {
            return Err(PqError::KeyAbsent(key));
        }
        self.decrease_unchecked(key, PRIORITY_NEG_INF)?;
        let (got, _) = self.extract_min()?;
        if got != key {
            return Err(PqError::Corrupt(format!("delete of {key} extracted {got}")));
        }
        Ok(())
    }

    fn delete_if_present(&mut self, key: Key) -> Result<(), PqError> {
        if self.is_live(key) {
            self.delete_key(key)
        } else {
            Ok(())
        }
    }

    fn len(&self) -> Option<usize> {
        Some(self.live)
    }

    fn clear(&mut self) -> Result<(), PqError> {
        self.base.clear()?;
        self.extracted.clear();
        self.last_insert.clear();
        self.counter = 0;
        self.live = 0;
        self.n0 = self.n0_min;
        self.ops_since_rebuild = 0;
        Ok(())
    }

    fn device(&self) -> Option<&Device> {
        self.base.device()
    }

    fn device_mut(&mut self) -> Option<&mut Device> {
        self.base.device_mut()
    }

    fn hash_seed(&self) -> Option<u64> {
        self.base.hash_seed()
    }
}

impl<Q: PriorityQueue> ReducedQueue<Q> {
    fn decrease_unchecked(&mut self, key: Key, priority: Priority) -> Result<(), PqError> {
        if priority != PRIORITY_NEG_INF {
            check_user_priority(priority)?;
        }
        if !self.is_live(key) {
            self.counters.absent_decreases += 1;
        }
        self.push(key, priority)?;
        self.op_done()
    }
}

impl<Q: ExternalQueue> ExternalQueue for ReducedQueue<Q> {
    /// Base image followed by the wrapper state: counters, then the two
    /// tables as sorted `(key, value)` lists.
    fn memory_image(&self) -> Vec<Word> {
        let mut img = self.base.memory_image();
        let base_len = img.len() as Word;
        let mut ext: Vec<Key> = self.extracted.iter().copied().collect();
        ext.sort_unstable();
        let mut li: Vec<(Key, u64)> = self.last_insert.iter().map(|(&k, &c)| (k, c)).collect();
        li.sort_unstable();
        img.extend([
            self.counter,
            self.live as Word,
            self.n0 as Word,
            self.ops_since_rebuild as Word,
            ext.len() as Word,
            li.len() as Word,
        ]);
        img.extend(ext);
        for (k, c) in li {
            img.extend([k, c]);
        }
        img.push(base_len);
        img
    }

    fn restore_memory(&mut self, img: &[Word]) -> Result<(), PqError> {
        let bad = || PqError::Corrupt("malformed reduction memory image".into());
        let base_len = *img.last().ok_or_else(bad)? as usize;
        if img.len() < base_len + 7 {
            return Err(bad());
        }
        self.base.restore_memory(&img[..base_len])?;
        let w = &img[base_len..img.len() - 1];
        let (ne, nl) = (w[4] as usize, w[5] as usize);
        if w.len() != 6 + ne + 2 * nl {
            return Err(bad());
        }
        self.counter = w[0];
        self.live = w[1] as usize;
        self.n0 = w[2] as usize;
        self.ops_since_rebuild = w[3] as usize;
        self.extracted = w[6..6 + ne].iter().copied().collect();
        self.last_insert = w[6 + ne..].chunks_exact(2).map(|c| (c[0], c[1])).collect();
        Ok(())
    }

    fn replace_device(&mut self, device: Device) {
        self.base.replace_device(device);
    }

    fn set_contract_checks(&mut self, enabled: bool) {
        self.base.set_contract_checks(enabled);
    }
}
