//! Buffered multiway heap supporting Insert and ExtractMin.
//!
//! Main memory holds an insert buffer, a delete buffer with the smallest
//! elements of the structure, and a table of sorted runs on disk. A full
//! insert buffer is merged with the delete buffer and written out as a run;
//! whenever a level collects `fan_in` runs they are merged into one run of
//! the next level. An empty delete buffer is refilled with the globally
//! smallest elements across all runs.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashSet, VecDeque};

use crate::io_model::{Device, Word};

use super::codec::{EntryCodec, Record};
use super::{Capabilities, Entry, ExternalQueue, Key, PqError, Priority, PriorityQueue};

const HEADER_WORDS: usize = 8;
const RUN_WORDS: usize = 5;
/// Number of elements the run table is sized for when memory allows.
const TARGET_ELEMENTS: usize = 1 << 24;

/// Memory budget split of a [`BufferedHeap`], derived from `(B, M)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeapLayout {
    pub fan_in: usize,
    pub insert_capacity: usize,
    pub delete_capacity: usize,
    pub max_runs: usize,
}

impl HeapLayout {
    /// Largest fan-in (at most 16) whose buffers and run table fit in `M`
    /// words with room for `TARGET_ELEMENTS` elements; when no fan-in reaches
    /// the target, the one with the largest reach. The insert buffer doubles
    /// as the `fan_in + 1` block buffers of a merge.
    pub fn for_config(block_words: usize, memory_words: usize) -> Result<Self, PqError> {
        let per_block = (block_words / 3).max(1);
        let mut best: Option<(usize, HeapLayout)> = None;
        for fan_in in (2..=(memory_words / (2 * block_words)).clamp(2, 16)).rev() {
            let insert_capacity = ((fan_in + 1) * block_words).div_ceil(3);
            let fixed = HEADER_WORDS + 3 * insert_capacity + 3 * per_block;
            if fixed + RUN_WORDS * fan_in >= memory_words {
                continue;
            }
            let fit_levels = ((memory_words - fixed) / RUN_WORDS - 1) / (fan_in - 1);
            let mut levels = 0;
            let mut reach = insert_capacity;
            while levels < fit_levels && reach < TARGET_ELEMENTS {
                reach = reach.saturating_mul(fan_in);
                levels += 1;
            }
            let max_runs = (fan_in - 1) * levels + 1;
            let layout = HeapLayout {
                fan_in,
                insert_capacity,
                delete_capacity: (memory_words - HEADER_WORDS - 3 * insert_capacity - RUN_WORDS * max_runs) / 3,
                max_runs,
            };
            if reach >= TARGET_ELEMENTS {
                return Ok(layout);
            }
            if best.is_none_or(|(r, _)| reach > r) {
                best = Some((reach, layout));
            }
        }
        best.map(|(_, l)| l).ok_or_else(|| {
            PqError::Capacity(format!(
                "{memory_words} words of memory are too few for a buffered heap with {block_words}-word blocks"
            ))
        })
    }

    pub fn resident_words(&self) -> usize {
        HEADER_WORDS + RUN_WORDS * self.max_runs + 3 * (self.insert_capacity + self.delete_capacity)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Run {
    addr: u64,
    len: usize,
    cursor: usize,
    level: u32,
    head: Priority,
}

#[derive(Debug, Clone)]
pub struct BufferedHeap {
    dev: Device,
    codec: EntryCodec,
    layout: HeapLayout,
    runs: Vec<Run>,
    insert_buf: Vec<Entry>,
    delete_buf: VecDeque<Entry>,
    next_addr: u64,
    next_ts: u64,
    live: Option<HashSet<Key>>,
}

impl BufferedHeap {
    pub fn new(dev: Device) -> Result<Self, PqError> {
        let cfg = *dev.config();
        let codec = EntryCodec::new(&cfg)?;
        let layout = HeapLayout::for_config(cfg.block_words, cfg.memory_words)?;
        Ok(BufferedHeap {
            dev,
            codec,
            layout,
            runs: Vec::new(),
            insert_buf: Vec::new(),
            delete_buf: VecDeque::new(),
            next_addr: 0,
            next_ts: 0,
            live: Some(HashSet::new()),
        })
    }

    pub fn layout(&self) -> HeapLayout {
        self.layout
    }

    pub fn run_count(&self) -> usize {
        self.runs.len()
    }

    pub fn into_device(self) -> Device {
        self.dev
    }

    fn alloc(&mut self, blocks: usize) -> Result<u64, PqError> {
        let addr = self.next_addr;
        self.next_addr += blocks as u64;
        self.codec.check_value("address", self.next_addr)?;
        Ok(addr)
    }

    fn write_run(&mut self, entries: &[Entry], level: u32) -> Result<(), PqError> {
        if self.runs.len() >= self.layout.max_runs {
            return Err(PqError::Capacity("run table full".into()));
        }
        let records = entries
            .iter()
            .map(|e| self.codec.encode_entry(e))
            .collect::<Result<Vec<_>, _>>()?;
        let addr = self.alloc(self.codec.blocks_for(records.len()))?;
        self.codec.write_blocks(&mut self.dev, addr, 0, &records)?;
        self.runs.push(Run {
            addr,
            len: entries.len(),
            cursor: 0,
            level,
            head: entries[0].priority,
        });
        Ok(())
    }

    fn flush(&mut self) -> Result<(), PqError> {
        let keep = self.delete_buf.len();
        let mut all: Vec<Entry> = self.insert_buf.drain(..).chain(self.delete_buf.drain(..)).collect();
        all.sort_unstable();
        let run = all.split_off(keep);
        self.delete_buf = all.into();
        if !run.is_empty() {
            self.write_run(&run, 1)?;
        }
        while let Some(level) = self.full_level() {
            self.merge_level(level)?;
        }
        Ok(())
    }

    fn full_level(&self) -> Option<u32> {
        let mut levels: Vec<u32> = self.runs.iter().map(|r| r.level).collect();
        levels.sort_unstable();
        levels
            .chunk_by(|a, b| a == b)
            .find(|c| c.len() >= self.layout.fan_in)
            .map(|c| c[0])
    }

    /// Streams all runs of `level` through one block buffer each into a new
    /// run one level up.
    fn merge_level(&mut self, level: u32) -> Result<(), PqError> {
        let (inputs, rest): (Vec<Run>, Vec<Run>) = self.runs.drain(..).partition(|r| r.level == level);
        self.runs = rest;
        let per = self.codec.records_per_block();
        let total: usize = inputs.iter().map(|r| r.len - r.cursor).sum();
        let out_addr = self.alloc(self.codec.blocks_for(total))?;

        let mut bufs: Vec<(usize, Vec<Record>)> = vec![(usize::MAX, Vec::new()); inputs.len()];
        let mut pos: Vec<usize> = inputs.iter().map(|r| r.cursor).collect();
        let mut heap = BinaryHeap::new();
        for i in 0..inputs.len() {
            if let Some(e) = self.merge_next(&inputs[i], &mut bufs[i], pos[i])? {
                heap.push(Reverse((e, i)));
            }
        }
        let mut out: Vec<Record> = Vec::with_capacity(per);
        let mut out_block = 0;
        let mut head = None;
        while let Some(Reverse((e, i))) = heap.pop() {
            head.get_or_insert(e.priority);
            out.push(self.codec.encode_entry(&e)?);
            if out.len() == per {
                self.codec.write_blocks(&mut self.dev, out_addr, out_block, &out)?;
                out_block += 1;
                out.clear();
            }
            pos[i] += 1;
            if let Some(e) = self.merge_next(&inputs[i], &mut bufs[i], pos[i])? {
                heap.push(Reverse((e, i)));
            }
        }
        if !out.is_empty() {
            self.codec.write_blocks(&mut self.dev, out_addr, out_block, &out)?;
        }
        if let Some(head) = head {
            self.runs.push(Run {
                addr: out_addr,
                len: total,
                cursor: 0,
                level: level + 1,
                head,
            });
        }
        Ok(())
    }

    fn merge_next(&mut self, run: &Run, buf: &mut (usize, Vec<Record>), pos: usize) -> Result<Option<Entry>, PqError> {
        if pos >= run.len {
            return Ok(None);
        }
        let per = self.codec.records_per_block();
        let block = pos / per;
        if buf.0 != block {
            buf.1 = self.codec.read_blocks(&mut self.dev, run.addr, block, block + 1)?;
            buf.0 = block;
        }
        Ok(Some(self.codec.decode_entry(&buf.1[pos % per])))
    }

    /// Loads the `delete_capacity` smallest elements over all runs into the
    /// delete buffer. Runs are visited by increasing head priority; a run is
    /// read block by block until its next element cannot enter the pool.
    fn refill(&mut self) -> Result<(), PqError> {
        let b = self.dev.config().block_words;
        if 3 * (self.layout.insert_capacity - self.insert_buf.len()) < b {
            self.flush()?;
            if !self.delete_buf.is_empty() {
                return Ok(());
            }
        }
        if self.runs.is_empty() {
            return Ok(());
        }
        let per = self.codec.records_per_block();
        let cap = self.layout.delete_capacity;
        let nr = self.runs.len();
        let mut pool: BinaryHeap<(Entry, usize)> = BinaryHeap::with_capacity(cap + 1);
        let mut taken = vec![0usize; nr];
        let mut next_head: Vec<Option<Priority>> = vec![None; nr];
        let mut order: Vec<usize> = (0..nr).collect();
        order.sort_by_key(|&r| (self.runs[r].head, r));

        for r in order {
            if pool.len() == cap && self.runs[r].head > pool.peek().expect("pool full").0.priority {
                break;
            }
            let run = self.runs[r];
            let mut pos = run.cursor;
            'scan: while pos < run.len {
                let block = pos / per;
                let recs = self.codec.read_blocks(&mut self.dev, run.addr, block, block + 1)?;
                for (slot, rec) in recs.iter().enumerate().skip(pos % per) {
                    let idx = block * per + slot;
                    if idx >= run.len {
                        break 'scan;
                    }
                    let e = self.codec.decode_entry(rec);
                    if pool.len() < cap {
                        pool.push((e, r));
                        taken[r] += 1;
                    } else if e < pool.peek().expect("pool full").0 {
                        let (ev, er) = pool.pop().expect("pool full");
                        taken[er] -= 1;
                        next_head[er] = Some(ev.priority);
                        pool.push((e, r));
                        taken[r] += 1;
                    } else {
                        next_head[r] = Some(e.priority);
                        break 'scan;
                    }
                    pos = idx + 1;
                }
            }
        }
        for (r, run) in self.runs.iter_mut().enumerate() {
            run.cursor += taken[r];
            if let Some(h) = next_head[r] {
                run.head = h;
            }
        }
        self.runs.retain(|r| r.cursor < r.len);
        self.delete_buf = pool.into_sorted_vec().into_iter().map(|(e, _)| e).collect();
        Ok(())
    }
}

impl PriorityQueue for BufferedHeap {
    fn name(&self) -> String {
        "buffered_heap".into()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities::default()
    }

    /// Accepts every priority, including the minus-infinity sentinel, so the
    /// queue can serve as the base of a DecreaseKey wrapper.
    fn insert(&mut self, key: Key, priority: Priority) -> Result<(), PqError> {
        if let Some(live) = &self.live {
            if live.contains(&key) {
                return Err(PqError::DuplicateKey(key));
            }
        }
        let e = Entry::new(key, priority, self.next_ts);
        self.codec.encode_entry(&e)?;
        self.next_ts += 1;
        if let Some(live) = &mut self.live {
            live.insert(key);
        }
        self.insert_buf.push(e);
        if self.insert_buf.len() >= self.layout.insert_capacity {
            self.flush()?;
        }
        Ok(())
    }

    fn extract_min(&mut self) -> Result<(Key, Priority), PqError> {
        if self.delete_buf.is_empty() && !self.runs.is_empty() {
            self.refill()?;
        }
        let imin = self
            .insert_buf
            .iter()
            .enumerate()
            .min_by_key(|(_, e)| **e)
            .map(|(i, e)| (i, *e));
        let e = match (self.delete_buf.front().copied(), imin) {
            (None, None) => return Err(PqError::Empty),
            (Some(d), Some((i, e))) if e < d => self.insert_buf.swap_remove(i),
            (None, Some((i, _))) => self.insert_buf.swap_remove(i),
            (Some(_), _) => self.delete_buf.pop_front().expect("nonempty"),
        };
        if let Some(live) = &mut self.live {
            live.remove(&e.key);
        }
        Ok(e.pair())
    }

    fn len(&self) -> Option<usize> {
        let on_disk: usize = self.runs.iter().map(|r| r.len - r.cursor).sum();
        Some(on_disk + self.insert_buf.len() + self.delete_buf.len())
    }

    fn clear(&mut self) -> Result<(), PqError> {
        self.runs.clear();
        self.insert_buf.clear();
        self.delete_buf.clear();
        if let Some(live) = &mut self.live {
            live.clear();
        }
        Ok(())
    }

    fn device(&self) -> Option<&Device> {
        Some(&self.dev)
    }

    fn device_mut(&mut self) -> Option<&mut Device> {
        Some(&mut self.dev)
    }
}

impl ExternalQueue for BufferedHeap {
    fn memory_image(&self) -> Vec<Word> {
        let mut img = vec![
            self.runs.len() as Word,
            self.insert_buf.len() as Word,
            self.delete_buf.len() as Word,
            self.next_addr,
            self.next_ts,
            0,
            0,
            0,
        ];
        for r in &self.runs {
            let head = self.codec.encode_priority(r.head).expect("stored priorities encode");
            img.extend([r.addr, r.len as Word, r.cursor as Word, r.level as Word, head]);
        }
        for e in self.insert_buf.iter().chain(self.delete_buf.iter()) {
            img.extend(self.codec.encode_entry(e).expect("stored entries encode"));
        }
        img
    }

    fn restore_memory(&mut self, img: &[Word]) -> Result<(), PqError> {
        let bad = || PqError::Corrupt("malformed heap memory image".into());
        if img.len() < HEADER_WORDS {
            return Err(bad());
        }
        let (nr, ni, nd) = (img[0] as usize, img[1] as usize, img[2] as usize);
        if img.len() != HEADER_WORDS + RUN_WORDS * nr + 3 * (ni + nd) {
            return Err(bad());
        }
        self.next_addr = img[3];
        self.next_ts = img[4];
        let mut p = HEADER_WORDS;
        self.runs = (0..nr)
            .map(|i| {
                let w = &img[p + RUN_WORDS * i..p + RUN_WORDS * (i + 1)];
                Run {
                    addr: w[0],
                    len: w[1] as usize,
                    cursor: w[2] as usize,
                    level: w[3] as u32,
                    head: self.codec.decode_priority(w[4]),
                }
            })
            .collect();
        p += RUN_WORDS * nr;
        let mut entries = img[p..]
            .chunks_exact(3)
            .map(|c| self.codec.decode_entry(&[c[0], c[1], c[2]]));
        self.insert_buf = entries.by_ref().take(ni).collect();
        self.delete_buf = entries.collect();
        if let Some(live) = &mut self.live {
            *live = self
                .insert_buf
                .iter()
                .chain(self.delete_buf.iter())
                .map(|e| e.key)
                .collect();
            live.extend(collect_run_keys(&mut self.dev, &self.codec, &self.runs)?);
        }
        Ok(())
    }

    fn replace_device(&mut self, device: Device) {
        self.dev = device;
    }

    fn set_contract_checks(&mut self, enabled: bool) {
        self.live = enabled.then(HashSet::new);
    }
}

/// Keys stored in runs, read without probing (inspection only).
fn collect_run_keys(dev: &mut Device, codec: &EntryCodec, runs: &[Run]) -> Result<Vec<Key>, PqError> {
    let per = codec.records_per_block();
    let mut keys = Vec::new();
    for r in runs {
        for idx in r.cursor..r.len {
            let block = dev.peek_block(crate::io_model::BlockAddress(r.addr + (idx / per) as u64));
            keys.push(codec.unpack(&block)[idx % per][0]);
        }
    }
    Ok(keys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io_model::DeviceConfig;
    use crate::pq::OracleQueue;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn heap(b: usize, m: usize) -> BufferedHeap {
        BufferedHeap::new(Device::new(DeviceConfig::new(b, m, 32).unwrap()).unwrap()).unwrap()
    }

    #[test]
    fn layout_fits_memory() {
        for (b, m) in [(64, 1024), (16, 512), (8, 192), (4, 64), (3, 48)] {
            let l = HeapLayout::for_config(b, m).unwrap();
            assert!(l.resident_words() <= m, "{b} {m} {l:?}");
            assert!((l.fan_in + 1) * b <= 3 * l.insert_capacity);
        }
        assert!(HeapLayout::for_config(64, 128).is_err());
    }

    #[test]
    fn small_cases() {
        let mut h = heap(6, 96);
        h.insert(5, 10).unwrap();
        assert_eq!(h.extract_min(), Ok((5, 10)));
        assert_eq!(h.extract_min(), Err(PqError::Empty));
        h.insert(2, 7).unwrap();
        h.insert(1, 7).unwrap();
        assert_eq!(h.insert(1, 3), Err(PqError::DuplicateKey(1)));
        assert_eq!(h.extract_min(), Ok((1, 7)));
        assert_eq!(h.decrease_key(2, 1), Err(PqError::Unsupported("decrease_key")));
    }

    #[test]
    fn matches_oracle_with_disk_traffic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut h = heap(6, 96);
        let mut o = OracleQueue::new();
        let mut next_key = 0;
        for _ in 0..5000 {
            if rng.gen_bool(0.6) {
                let p = rng.gen_range(0..50);
                h.insert(next_key, p).unwrap();
                o.insert(next_key, p).unwrap();
                next_key += 1;
            } else {
                assert_eq!(h.extract_min().ok(), o.extract_min().ok());
            }
            assert_eq!(h.len(), o.len());
        }
        assert!(h.device().unwrap().probe_count() > 0);
        while let Ok(x) = o.extract_min() {
            assert_eq!(h.extract_min(), Ok(x));
        }
        assert_eq!(h.extract_min(), Err(PqError::Empty));
    }

    #[test]
    fn memory_image_roundtrip() {
        let mut h = heap(6, 96);
        for k in 0..300 {
            h.insert(k, (k * 7 % 31) as i64).unwrap();
        }
        for _ in 0..50 {
            h.extract_min().unwrap();
        }
        let img = h.memory_image();
        assert!(img.len() <= 96);
        let mut copy = h.clone();
        copy.restore_memory(&img).unwrap();
        assert_eq!(copy.memory_image(), img);
        assert_eq!(copy.len(), h.len());
    }
}
