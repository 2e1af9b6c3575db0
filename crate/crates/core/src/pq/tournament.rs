//! Tournament-tree queue with DecreaseKey and Delete.
//!
//! A static binary tree is laid over a hashed key space: every key has a
//! fixed root-to-leaf path. Each node stores a sorted set of at most `x`
//! elements and a FIFO buffer of at most `x` pending signals. All elements
//! stored at a node are no larger than any element stored below it, so the
//! root set always holds the global minimum once it is nonempty. The root
//! node and the outgoing buffers of the root live in main memory; every other
//! node lives on disk.
//!
//! An Update(k, p) signal travels down the path of `k` until it meets `k`
//! (priority becomes the minimum), meets an empty subtree (the element is
//! stored), or meets a node whose largest element exceeds it (the element is
//! stored and a Delete(k) continues down to purge any older copy). Nodes
//! whose set overflows push their largest element down as an Update. An
//! empty root set is refilled from the children, recursively.

use std::collections::HashSet;

use crate::io_model::{Block, BlockAddress, Device, Word};

use super::codec::{EntryCodec, Record};
use super::{
    check_user_priority, Capabilities, Entry, ExternalQueue, Key, PqError, Priority, PriorityQueue, PRIORITY_NEG_INF,
};

const HASH_MULTIPLIER: u64 = 0x9E37_79B9_7F4A_7C15;
const ROOT: usize = 1;
const ROOT_HEADER_WORDS: usize = 8;

/// Sizes of a [`TournamentQueue`], derived from `(B, M)` and the expected
/// number of simultaneously stored keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TournamentLayout {
    /// Depth of the leaves; the tree has `2^height` leaves.
    pub height: u32,
    /// Maximum elements per node and maximum pending signals per node.
    pub node_capacity: usize,
    entry_blocks: usize,
    signal_blocks: usize,
}

impl TournamentLayout {
    /// `x = (M - 16) / 18` leaves room for the resident root state plus the
    /// working set of a flush or refill. The height keeps the expected leaf
    /// load at a quarter of a node's capacity.
    pub fn for_config(codec: &EntryCodec, memory_words: usize, capacity: usize) -> Result<Self, PqError> {
        let x = memory_words.saturating_sub(16) / 18;
        if x < 8 {
            return Err(PqError::Capacity(format!(
                "{memory_words} words of memory leave node capacity {x}, need 8"
            )));
        }
        let leaves_wanted = (4 * capacity.max(1)).div_ceil(x).max(2);
        let height = leaves_wanted.next_power_of_two().trailing_zeros().max(1);
        Ok(TournamentLayout {
            height,
            node_capacity: x,
            entry_blocks: codec.blocks_for(1 + x),
            signal_blocks: codec.blocks_for(x),
        })
    }

    fn node_blocks(&self) -> usize {
        self.entry_blocks + self.signal_blocks
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Signal {
    Update(Entry),
    Delete(Key),
}

/// A node as loaded into memory.
#[derive(Debug, Clone, Default)]
struct Node {
    entries: Vec<Entry>,
    below_empty: bool,
}

impl Node {
    fn find(&self, key: Key) -> Option<usize> {
        self.entries.iter().position(|e| e.key == key)
    }

    fn insert_sorted(&mut self, e: Entry) {
        let at = self.entries.partition_point(|x| *x < e);
        self.entries.insert(at, e);
    }
}

#[derive(Debug, Clone)]
pub struct TournamentQueue {
    dev: Device,
    codec: EntryCodec,
    layout: TournamentLayout,
    seed: u64,
    root: Node,
    outbox: [Vec<Signal>; 2],
    next_ts: u64,
    live: Option<HashSet<Key>>,
}

impl TournamentQueue {
    /// `capacity` is the expected maximum number of stored keys; it sizes the
    /// tree. `hash_seed` fixes the key-to-leaf map.
    pub fn new(dev: Device, capacity: usize, hash_seed: u64) -> Result<Self, PqError> {
        let cfg = *dev.config();
        let codec = EntryCodec::new(&cfg)?;
        let layout = TournamentLayout::for_config(&codec, cfg.memory_words, capacity)?;
        let last = (1u64 << (layout.height + 1)) * layout.node_blocks() as u64;
        codec.check_value("address", last)?;
        Ok(TournamentQueue {
            dev,
            codec,
            layout,
            seed: hash_seed,
            root: Node {
                below_empty: true,
                ..Node::default()
            },
            outbox: [Vec::new(), Vec::new()],
            next_ts: 0,
            live: Some(HashSet::new()),
        })
    }

    pub fn layout(&self) -> TournamentLayout {
        self.layout
    }

    pub fn into_device(self) -> Device {
        self.dev
    }

    fn leaf_of(&self, key: Key) -> usize {
        let h = self.layout.height;
        let slot = (key ^ self.seed).wrapping_mul(HASH_MULTIPLIER) >> (64 - h);
        (1usize << h) + slot as usize
    }

    fn depth(node: usize) -> u32 {
        usize::BITS - 1 - node.leading_zeros()
    }

    fn is_leaf(&self, node: usize) -> bool {
        Self::depth(node) == self.layout.height
    }

    /// Child of `node` on the path of `key`.
    fn child_toward(&self, node: usize, key: Key) -> usize {
        self.leaf_of(key) >> (self.layout.height - Self::depth(node) - 1)
    }

    fn base(&self, node: usize) -> u64 {
        (node * self.layout.node_blocks()) as u64
    }

    fn encode_signal(&self, s: &Signal) -> Result<Record, PqError> {
        match s {
            Signal::Update(e) => self.codec.encode_entry(e),
            Signal::Delete(k) => {
                self.codec.check_value("key", *k)?;
                Ok([*k, 0, self.codec.word_max()])
            }
        }
    }

    fn decode_signal(&self, r: &Record) -> Signal {
        if r[2] == self.codec.word_max() {
            Signal::Delete(r[0])
        } else {
            Signal::Update(self.codec.decode_entry(r))
        }
    }

    fn header(node: &Node, signals: usize) -> Record {
        [node.entries.len() as Word, signals as Word, !node.below_empty as Word]
    }

    /// Reads the header block and the element set. Returns the node (without
    /// signals) and the pending-signal count. The header is
    /// `[|elements|, |signals|, subtree-nonempty flag]`, so a never-written
    /// node reads as empty.
    fn load_entries(&mut self, id: usize) -> Result<(Node, usize), PqError> {
        let base = self.base(id);
        let first = self.codec.read_blocks(&mut self.dev, base, 0, 1)?;
        let hdr = first[0];
        let (ne, ns) = (hdr[0] as usize, hdr[1] as usize);
        let below_empty = hdr[2] == 0;
        let blocks = self.codec.blocks_for(1 + ne);
        let mut recs = first;
        if blocks > 1 {
            recs.extend(self.codec.read_blocks(&mut self.dev, base, 1, blocks)?);
        }
        let entries = recs[1..=ne].iter().map(|r| self.codec.decode_entry(r)).collect();
        Ok((Node { entries, below_empty }, ns))
    }

    fn load_signals(&mut self, id: usize, count: usize) -> Result<Vec<Signal>, PqError> {
        if count == 0 {
            return Ok(Vec::new());
        }
        let base = self.base(id);
        let eb = self.layout.entry_blocks;
        let recs = self
            .codec
            .read_blocks(&mut self.dev, base, eb, eb + self.codec.blocks_for(count))?;
        Ok(recs[..count].iter().map(|r| self.decode_signal(r)).collect())
    }

    fn store_entries(&mut self, id: usize, node: &Node, signals: usize) -> Result<(), PqError> {
        let mut recs = Vec::with_capacity(1 + node.entries.len());
        recs.push(Self::header(node, signals));
        for e in &node.entries {
            recs.push(self.codec.encode_entry(e)?);
        }
        let base = self.base(id);
        self.codec.write_blocks(&mut self.dev, base, 0, &recs)
    }

    /// Appends signals to a node's disk buffer, processing the node instead
    /// when the buffer would overflow.
    fn deliver(&mut self, id: usize, sigs: Vec<Signal>) -> Result<(), PqError> {
        if sigs.is_empty() {
            return Ok(());
        }
        let base = self.base(id);
        let mut first = self.codec.read_blocks(&mut self.dev, base, 0, 1)?;
        let count = first[0][1] as usize;
        if count + sigs.len() > self.layout.node_capacity {
            return self.process(id, sigs);
        }
        let per = self.codec.records_per_block();
        let eb = self.layout.entry_blocks;
        let tail = count / per;
        let mut recs: Vec<Record> = Vec::new();
        if !count.is_multiple_of(per) {
            let old = self.codec.read_blocks(&mut self.dev, base, eb + tail, eb + tail + 1)?;
            recs.extend_from_slice(&old[..count % per]);
        }
        for s in &sigs {
            recs.push(self.encode_signal(s)?);
        }
        self.codec.write_blocks(&mut self.dev, base, eb + tail, &recs)?;
        first[0][1] = (count + sigs.len()) as Word;
        let mut words = vec![0; self.dev.config().block_words];
        for (i, r) in first.iter().enumerate() {
            words[3 * i..3 * i + 3].copy_from_slice(r);
        }
        self.dev.write_block(BlockAddress(base), Block::from_words(words))?;
        Ok(())
    }

    /// Loads a node, applies its pending signals followed by `extra`, writes
    /// it back and passes the resulting signals on to its children.
    fn process(&mut self, id: usize, extra: Vec<Signal>) -> Result<(), PqError> {
        let (mut node, count) = self.load_entries(id)?;
        let mut sigs = self.load_signals(id, count)?;
        sigs.extend(extra);
        let mut outs = [Vec::new(), Vec::new()];
        for s in sigs {
            self.apply(id, &mut node, s, &mut outs)?;
        }
        self.store_entries(id, &node, 0)?;
        let [left, right] = outs;
        self.deliver(2 * id, left)?;
        self.deliver(2 * id + 1, right)
    }

    fn apply(&self, id: usize, node: &mut Node, sig: Signal, outs: &mut [Vec<Signal>; 2]) -> Result<(), PqError> {
        let x = self.layout.node_capacity;
        let leaf = self.is_leaf(id);
        let side = |key: Key| if leaf { 0 } else { self.child_toward(id, key) & 1 };
        match sig {
            Signal::Update(e) => {
                if let Some(i) = node.find(e.key) {
                    if e.priority < node.entries[i].priority {
                        let old = node.entries.remove(i);
                        node.insert_sorted(Entry::new(e.key, e.priority, old.timestamp));
                    }
                    return Ok(());
                }
                if leaf || node.below_empty {
                    node.insert_sorted(e);
                } else if node.entries.last().is_some_and(|m| e < *m) {
                    node.insert_sorted(e);
                    outs[side(e.key)].push(Signal::Delete(e.key));
                } else {
                    outs[side(e.key)].push(Signal::Update(e));
                    return Ok(());
                }
                if node.entries.len() > x {
                    if leaf {
                        return Err(PqError::Capacity(format!("leaf {id} holds more than {x} keys")));
                    }
                    let m = node.entries.pop().expect("nonempty");
                    outs[side(m.key)].push(Signal::Update(m));
                    node.below_empty = false;
                }
            }
            Signal::Delete(k) => {
                if let Some(i) = node.find(k) {
                    node.entries.remove(i);
                } else if !leaf && !node.below_empty {
                    outs[side(k)].push(Signal::Delete(k));
                }
            }
        }
        Ok(())
    }

    /// Applies a signal at the root and empties the outbox when it fills.
    fn root_signal(&mut self, sig: Signal) -> Result<(), PqError> {
        let mut root = std::mem::take(&mut self.root);
        let mut outs = std::mem::take(&mut self.outbox);
        let r = self.apply(ROOT, &mut root, sig, &mut outs);
        self.root = root;
        self.outbox = outs;
        r?;
        if self.outbox[0].len() + self.outbox[1].len() >= self.layout.node_capacity {
            self.drain_outbox()?;
        }
        Ok(())
    }

    fn drain_outbox(&mut self) -> Result<(), PqError> {
        let [left, right] = std::mem::take(&mut self.outbox);
        self.deliver(2, left)?;
        self.deliver(3, right)
    }

    /// Loads a child with its pending signals applied. Writes it back only
    /// if signals were pending.
    fn settle(&mut self, id: usize) -> Result<Node, PqError> {
        let (mut node, count) = self.load_entries(id)?;
        if count == 0 {
            return Ok(node);
        }
        let sigs = self.load_signals(id, count)?;
        let mut outs = [Vec::new(), Vec::new()];
        for s in sigs {
            self.apply(id, &mut node, s, &mut outs)?;
        }
        self.store_entries(id, &node, 0)?;
        let [left, right] = outs;
        if !self.is_leaf(id) {
            self.deliver(2 * id, left)?;
            self.deliver(2 * id + 1, right)?;
        }
        Ok(node)
    }

    /// Moves the smallest elements of the children up into an empty node.
    fn fill(&mut self, id: usize, node: &mut Node) -> Result<(), PqError> {
        let mut kids = Vec::with_capacity(2);
        for c in [2 * id, 2 * id + 1] {
            let mut child = self.settle(c)?;
            if !self.is_leaf(c) && child.entries.is_empty() && !child.below_empty {
                self.fill(c, &mut child)?;
                self.store_entries(c, &child, 0)?;
            }
            kids.push((c, child, false));
        }
        let limit = kids
            .iter()
            .filter(|(c, k, _)| !self.is_leaf(*c) && !k.below_empty)
            .filter_map(|(_, k, _)| k.entries.last().copied())
            .min();
        let room = self.layout.node_capacity - node.entries.len();
        for _ in 0..room {
            let pick = kids
                .iter()
                .enumerate()
                .filter_map(|(i, (_, k, _))| k.entries.first().map(|e| (*e, i)))
                .min();
            match pick {
                Some((e, i)) if limit.is_none_or(|l| e <= l) => {
                    kids[i].1.entries.remove(0);
                    kids[i].2 = true;
                    node.insert_sorted(e);
                }
                _ => break,
            }
        }
        node.below_empty = kids
            .iter()
            .all(|(c, k, _)| k.entries.is_empty() && (self.is_leaf(*c) || k.below_empty));
        for (c, child, dirty) in kids {
            if dirty {
                self.store_entries(c, &child, 0)?;
            }
        }
        Ok(())
    }

    fn ensure_root(&mut self) -> Result<(), PqError> {
        if self.root.entries.is_empty() && !self.root.below_empty {
            self.drain_outbox()?;
            let mut root = std::mem::take(&mut self.root);
            let r = self.fill(ROOT, &mut root);
            self.root = root;
            r?;
        }
        Ok(())
    }

    fn fresh_entry(&mut self, key: Key, priority: Priority) -> Result<Entry, PqError> {
        let e = Entry::new(key, priority, self.next_ts);
        self.codec.encode_entry(&e)?;
        self.next_ts += 1;
        Ok(e)
    }

    fn pop_root(&mut self) -> Result<Entry, PqError> {
        self.ensure_root()?;
        if self.root.entries.is_empty() {
            return Err(PqError::Empty);
        }
        Ok(self.root.entries.remove(0))
    }
}

impl PriorityQueue for TournamentQueue {
    fn name(&self) -> String {
        "tournament".into()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            decrease_key: true,
            delete: true,
        }
    }

    fn insert(&mut self, key: Key, priority: Priority) -> Result<(), PqError> {
        check_user_priority(priority)?;
        if self.live.as_ref().is_some_and(|l| l.contains(&key)) {
            return Err(PqError::DuplicateKey(key));
        }
        let e = self.fresh_entry(key, priority)?;
        if let Some(l) = &mut self.live {
            l.insert(key);
        }
        self.root_signal(Signal::Update(e))
    }

    fn extract_min(&mut self) -> Result<(Key, Priority), PqError> {
        let e = self.pop_root()?;
        if let Some(l) = &mut self.live {
            l.remove(&e.key);
        }
        Ok(e.pair())
    }

    fn decrease_key(&mut self, key: Key, priority: Priority) -> Result<(), PqError> {
        check_user_priority(priority)?;
        if self.live.as_ref().is_some_and(|l| !l.contains(&key)) {
            return Err(PqError::KeyAbsent(key));
        }
        let e = self.fresh_entry(key, priority)?;
        self.root_signal(Signal::Update(e))
    }

    fn delete_key(&mut self, key: Key) -> Result<(), PqError> {
        if self.live.as_ref().is_some_and(|l| !l.contains(&key)) {
            return Err(PqError::KeyAbsent(key));
        }
        self.delete_if_present(key)
    }

    /// The DecreaseKey-to-minus-infinity plus ExtractMin recipe. On an absent
    /// key the recipe inserts and immediately extracts it, so it has no net
    /// effect.
    fn delete_if_present(&mut self, key: Key) -> Result<(), PqError> {
        let e = self.fresh_entry(key, PRIORITY_NEG_INF)?;
        self.root_signal(Signal::Update(e))?;
        let got = self.pop_root()?;
        if got.key != key {
            return Err(PqError::Corrupt(format!("delete of {key} extracted {}", got.key)));
        }
        if let Some(l) = &mut self.live {
            l.remove(&key);
        }
        Ok(())
    }

    fn len(&self) -> Option<usize> {
        self.live.as_ref().map(HashSet::len)
    }

    /// Drains the queue. Once the root reports empty, every node of the tree
    /// is logically empty, so no further disk work is needed.
    fn clear(&mut self) -> Result<(), PqError> {
        loop {
            match self.pop_root() {
                Ok(_) => {}
                Err(PqError::Empty) => break,
                Err(e) => return Err(e),
            }
        }
        if let Some(l) = &mut self.live {
            l.clear();
        }
        Ok(())
    }

    fn device(&self) -> Option<&Device> {
        Some(&self.dev)
    }

    fn device_mut(&mut self) -> Option<&mut Device> {
        Some(&mut self.dev)
    }

    fn hash_seed(&self) -> Option<u64> {
        Some(self.seed)
    }
}

impl ExternalQueue for TournamentQueue {
    fn memory_image(&self) -> Vec<Word> {
        let mut img = vec![
            self.root.entries.len() as Word,
            self.outbox[0].len() as Word,
            self.outbox[1].len() as Word,
            self.root.below_empty as Word,
            self.next_ts,
            self.layout.height as Word,
            self.seed & self.codec.word_max(),
            self.layout.node_capacity as Word,
        ];
        debug_assert_eq!(img.len(), ROOT_HEADER_WORDS);
        for e in &self.root.entries {
            img.extend(self.codec.encode_entry(e).expect("stored entries encode"));
        }
        for s in self.outbox.iter().flatten() {
            img.extend(self.encode_signal(s).expect("stored signals encode"));
        }
        img
    }

    /// Restoring disables the contract checks: the set of live keys is not
    /// part of the machine state.
    fn restore_memory(&mut self, img: &[Word]) -> Result<(), PqError> {
        let bad = || PqError::Corrupt("malformed tournament memory image".into());
        if img.len() < ROOT_HEADER_WORDS {
            return Err(bad());
        }
        let (ne, o0, o1) = (img[0] as usize, img[1] as usize, img[2] as usize);
        if img.len() != ROOT_HEADER_WORDS + 3 * (ne + o0 + o1) || img[5] != self.layout.height as Word {
            return Err(bad());
        }
        let recs: Vec<Record> = img[ROOT_HEADER_WORDS..]
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        self.root = Node {
            entries: recs[..ne].iter().map(|r| self.codec.decode_entry(r)).collect(),
            below_empty: img[3] != 0,
        };
        self.outbox = [
            recs[ne..ne + o0].iter().map(|r| self.decode_signal(r)).collect(),
            recs[ne + o0..].iter().map(|r| self.decode_signal(r)).collect(),
        ];
        self.next_ts = img[4];
        self.live = None;
        Ok(())
    }

    fn replace_device(&mut self, device: Device) {
        self.dev = device;
    }

    fn set_contract_checks(&mut self, enabled: bool) {
        self.live = enabled.then(HashSet::new);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io_model::DeviceConfig;
    use crate::pq::OracleQueue;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn queue(cap: usize) -> TournamentQueue {
        let dev = Device::new(DeviceConfig::new(6, 160, 32).unwrap()).unwrap();
        TournamentQueue::new(dev, cap, 99).unwrap()
    }

    #[test]
    fn layout_and_paths() {
        let q = queue(1000);
        let x = q.layout().node_capacity;
        assert_eq!(x, 8);
        assert!((1usize << q.layout().height) * x >= 4000);
        for k in 0..100u64 {
            let leaf = q.leaf_of(k);
            assert!(q.is_leaf(leaf));
            let mut n = ROOT;
            while !q.is_leaf(n) {
                n = q.child_toward(n, k);
            }
            assert_eq!(n, leaf);
        }
    }

    #[test]
    fn basic_semantics() {
        let mut q = queue(100);
        q.insert(4, 10).unwrap();
        q.decrease_key(4, 20).unwrap();
        assert_eq!(q.extract_min(), Ok((4, 10)));
        q.insert(4, 10).unwrap();
        q.decrease_key(4, 3).unwrap();
        assert_eq!(q.extract_min(), Ok((4, 3)));
        q.insert(7, 5).unwrap();
        q.delete_key(7).unwrap();
        assert_eq!(q.extract_min(), Err(PqError::Empty));
        assert_eq!(q.delete_key(7), Err(PqError::KeyAbsent(7)));
        q.insert(1, 1).unwrap();
        assert_eq!(q.insert(1, 1), Err(PqError::DuplicateKey(1)));
    }

    #[test]
    fn matches_oracle_under_mixed_load() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut q = queue(400);
        let mut o = OracleQueue::new();
        let mut keys: Vec<Key> = Vec::new();
        let mut next = 0;
        for step in 0..20_000 {
            let r: f64 = rng.gen();
            if r < 0.35 && keys.len() < 400 {
                let p = rng.gen_range(0..1000);
                q.insert(next, p).unwrap();
                o.insert(next, p).unwrap();
                keys.push(next);
                next += 1;
            } else if r < 0.6 && !keys.is_empty() {
                let k = keys[rng.gen_range(0..keys.len())];
                let p = rng.gen_range(0..1000);
                q.decrease_key(k, p).unwrap();
                o.decrease_key(k, p).unwrap();
            } else if r < 0.75 {
                let k = rng.gen_range(0..next.max(1));
                q.delete_if_present(k).unwrap();
                o.delete_if_present(k).unwrap();
                keys.retain(|&x| x != k);
            } else {
                let a = q.extract_min().ok();
                let b = o.extract_min().ok();
                assert_eq!(a, b, "step {step}");
                if let Some((k, _)) = b {
                    keys.retain(|&x| x != k);
                }
            }
        }
        assert!(q.device().unwrap().probe_count() > 0);
        while let Ok(x) = o.extract_min() {
            assert_eq!(q.extract_min(), Ok(x));
        }
        assert_eq!(q.extract_min(), Err(PqError::Empty));
    }
}
