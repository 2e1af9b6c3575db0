//! External-memory machine with probe logging.
//!
//! A [`Device`] is an addressable space of blocks of `B` words of `w` bits plus
//! an `M`-word main memory. Every block read or write is one probe and is
//! appended to the probe log; main-memory accesses are free and never logged.

use std::collections::{HashMap, HashSet};
use std::fmt;

use thiserror::Error;

/// A machine word. Only the low `w` bits are meaningful.
pub type Word = u64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IoError {
    #[error("device parameter {0} must be positive")]
    ZeroParameter(&'static str),
    #[error("main memory of {memory} words cannot hold two blocks of {block} words")]
    MemoryTooSmall { memory: usize, block: usize },
    #[error("word size {0} bits is outside 1..=64")]
    WordBits(u32),
    #[error("address {addr} does not fit in {bits}-bit words")]
    AddressOutOfRange { addr: u64, bits: u32 },
    #[error("block has {got} words, device blocks hold {expected}")]
    BlockSize { expected: usize, got: usize },
    #[error("word {value:#x} does not fit in {bits} bits")]
    WordOverflow { value: Word, bits: u32 },
}

/// Parameters of the simulated machine: `B` words per block, `M` words of
/// memory and `w` bits per word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct DeviceConfig {
    pub block_words: usize,
    pub memory_words: usize,
    pub word_bits: u32,
}

impl DeviceConfig {
    pub fn new(block_words: usize, memory_words: usize, word_bits: u32) -> Result<Self, IoError> {
        let config = DeviceConfig {
            block_words,
            memory_words,
            word_bits,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), IoError> {
        if self.block_words == 0 {
            return Err(IoError::ZeroParameter("B"));
        }
        if self.memory_words == 0 {
            return Err(IoError::ZeroParameter("M"));
        }
        if self.word_bits == 0 || self.word_bits > 64 {
            return Err(IoError::WordBits(self.word_bits));
        }
        if self.memory_words < 2 * self.block_words {
            return Err(IoError::MemoryTooSmall {
                memory: self.memory_words,
                block: self.block_words,
            });
        }
        Ok(())
    }

    /// Largest value a word can hold.
    pub fn word_max(&self) -> Word {
        if self.word_bits == 64 {
            u64::MAX
        } else {
            (1u64 << self.word_bits) - 1
        }
    }

    pub fn block_bits(&self) -> u64 {
        self.block_words as u64 * self.word_bits as u64
    }

    pub fn memory_bits(&self) -> u64 {
        self.memory_words as u64 * self.word_bits as u64
    }
}

/// Address of a disk block, always `< 2^w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockAddress(pub u64);

impl fmt::Display for BlockAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Contents of one block: exactly `B` words.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Block(Vec<Word>);

impl Block {
    pub fn zeroed(words: usize) -> Self {
        Block(vec![0; words])
    }

    pub fn from_words(words: Vec<Word>) -> Self {
        Block(words)
    }

    pub fn words(&self) -> &[Word] {
        &self.0
    }

    pub fn words_mut(&mut self) -> &mut [Word] {
        &mut self.0
    }

    pub fn into_words(self) -> Vec<Word> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Access {
    Read,
    Write,
}

impl Access {
    pub fn as_str(&self) -> &'static str {
        match self {
            Access::Read => "read",
            Access::Write => "write",
        }
    }
}

/// One logged block access.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ProbeRecord {
    pub seq: u64,
    pub op_index: Option<u64>,
    pub leaf_id: Option<u32>,
    pub addr: BlockAddress,
    pub access: Access,
}

/// Blocks held by another party, handed over on first touch of a watched
/// address. Used by the two-party simulation where a player only learns the
/// contents of a cell the other player changed by asking for it.
#[derive(Debug, Clone, Default)]
struct RemoteFetch {
    contents: HashMap<u64, Block>,
    pending: HashSet<u64>,
    requests: Vec<BlockAddress>,
}

/// The simulated external-memory machine.
#[derive(Debug, Clone)]
pub struct Device {
    config: DeviceConfig,
    blocks: HashMap<u64, Block>,
    memory: Vec<Word>,
    log: Vec<ProbeRecord>,
    op_index: Option<u64>,
    leaf_id: Option<u32>,
    remote: Option<RemoteFetch>,
}

impl Device {
    pub fn new(config: DeviceConfig) -> Result<Self, IoError> {
        config.validate()?;
        Ok(Device {
            config,
            blocks: HashMap::new(),
            memory: vec![0; config.memory_words],
            log: Vec::new(),
            op_index: None,
            leaf_id: None,
            remote: None,
        })
    }

    pub fn config(&self) -> &DeviceConfig {
        &self.config
    }

    fn check_addr(&self, addr: BlockAddress) -> Result<(), IoError> {
        if addr.0 > self.config.word_max() {
            return Err(IoError::AddressOutOfRange {
                addr: addr.0,
                bits: self.config.word_bits,
            });
        }
        Ok(())
    }

    fn check_block(&self, block: &Block) -> Result<(), IoError> {
        if block.len() != self.config.block_words {
            return Err(IoError::BlockSize {
                expected: self.config.block_words,
                got: block.len(),
            });
        }
        let max = self.config.word_max();
        if let Some(&value) = block.words().iter().find(|&&v| v > max) {
            return Err(IoError::WordOverflow {
                value,
                bits: self.config.word_bits,
            });
        }
        Ok(())
    }

    fn record(&mut self, addr: BlockAddress, access: Access) {
        if let Some(remote) = self.remote.as_mut() {
            if remote.pending.remove(&addr.0) {
                remote.requests.push(addr);
                match remote.contents.remove(&addr.0) {
                    Some(block) => {
                        self.blocks.insert(addr.0, block);
                    }
                    None => {
                        self.blocks.remove(&addr.0);
                    }
                }
            }
        }
        let seq = self.log.len() as u64;
        self.log.push(ProbeRecord {
            seq,
            op_index: self.op_index,
            leaf_id: self.leaf_id,
            addr,
            access,
        });
    }

    /// Reads a block; never-written blocks read as zero.
    pub fn read_block(&mut self, addr: BlockAddress) -> Result<Block, IoError> {
        self.check_addr(addr)?;
        self.record(addr, Access::Read);
        Ok(self
            .blocks
            .get(&addr.0)
            .cloned()
            .unwrap_or_else(|| Block::zeroed(self.config.block_words)))
    }

    pub fn write_block(&mut self, addr: BlockAddress, block: Block) -> Result<(), IoError> {
        self.check_addr(addr)?;
        self.check_block(&block)?;
        self.record(addr, Access::Write);
        self.blocks.insert(addr.0, block);
        Ok(())
    }

    /// Tags subsequent probes with the operation being processed.
    pub fn set_context(&mut self, op_index: u64, leaf_id: Option<u32>) {
        self.op_index = Some(op_index);
        self.leaf_id = leaf_id;
    }

    pub fn clear_context(&mut self) {
        self.op_index = None;
        self.leaf_id = None;
    }

    pub fn probe_count(&self) -> u64 {
        self.log.len() as u64
    }

    pub fn probe_log(&self) -> &[ProbeRecord] {
        &self.log
    }

    pub fn memory(&self) -> &[Word] {
        &self.memory
    }

    pub fn memory_mut(&mut self) -> &mut [Word] {
        &mut self.memory
    }

    /// Current contents of a block without probing it. Intended for
    /// inspection and for the party answering a content request.
    pub fn peek_block(&self, addr: BlockAddress) -> Block {
        self.blocks
            .get(&addr.0)
            .cloned()
            .unwrap_or_else(|| Block::zeroed(self.config.block_words))
    }

    /// Addresses that hold a non-default block, in increasing order.
    pub fn written_addresses(&self) -> Vec<BlockAddress> {
        let mut addrs: Vec<_> = self.blocks.keys().map(|&a| BlockAddress(a)).collect();
        addrs.sort();
        addrs
    }

    /// True when both devices hold identical block contents (zero blocks and
    /// absent blocks compare equal).
    pub fn same_contents(&self, other: &Device) -> bool {
        let zero = Block::zeroed(self.config.block_words);
        let keys: HashSet<u64> = self.blocks.keys().chain(other.blocks.keys()).copied().collect();
        keys.into_iter()
            .all(|a| self.blocks.get(&a).unwrap_or(&zero) == other.blocks.get(&a).unwrap_or(&zero))
    }

    /// Arms first-touch fetching: the first probe of any address in `watch`
    /// installs the corresponding entry of `contents` (zero if missing) before
    /// the probe is served, and records a content request.
    pub fn attach_remote(&mut self, watch: impl IntoIterator<Item = BlockAddress>, contents: HashMap<u64, Block>) {
        self.remote = Some(RemoteFetch {
            contents,
            pending: watch.into_iter().map(|a| a.0).collect(),
            requests: Vec::new(),
        });
    }

    /// Disarms first-touch fetching and returns the requests made, in order.
    pub fn detach_remote(&mut self) -> Vec<BlockAddress> {
        self.remote.take().map(|r| r.requests).unwrap_or_default()
    }

    /// Probe log as CSV with columns `seq,op_index,leaf_id,addr,access`.
    pub fn probe_log_csv(&self) -> String {
        probe_log_to_csv(&self.log)
    }
}

pub fn probe_log_to_csv(log: &[ProbeRecord]) -> String {
    let mut out = String::from("seq,op_index,leaf_id,addr,access\n");
    for r in log {
        let op = r.op_index.map(|v| v.to_string()).unwrap_or_default();
        let leaf = r.leaf_id.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{}\n", r.seq, op, leaf, r.addr, r.access.as_str()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dev(b: usize, m: usize, w: u32) -> Device {
        Device::new(DeviceConfig::new(b, m, w).unwrap()).unwrap()
    }

    #[test]
    fn config_validation() {
        let d = dev(1, 2, 16);
        assert_eq!(d.probe_count(), 0);
        assert!(DeviceConfig::new(64, 1024, 32).is_ok());
        assert_eq!(
            DeviceConfig::new(64, 64, 32),
            Err(IoError::MemoryTooSmall { memory: 64, block: 64 })
        );
        assert!(matches!(DeviceConfig::new(0, 4, 8), Err(IoError::ZeroParameter("B"))));
        assert!(matches!(DeviceConfig::new(2, 0, 8), Err(IoError::ZeroParameter("M"))));
        assert!(matches!(DeviceConfig::new(2, 4, 0), Err(IoError::WordBits(0))));
        assert!(matches!(DeviceConfig::new(2, 4, 65), Err(IoError::WordBits(65))));
        let c = DeviceConfig::new(64, 1024, 32).unwrap();
        assert_eq!(c.block_bits(), 64 * 32);
        assert_eq!(c.memory_bits(), 1024 * 32);
    }

    #[test]
    fn unwritten_reads_zero_and_counts() {
        let mut d = dev(4, 8, 16);
        let b = d.read_block(BlockAddress(7)).unwrap();
        assert_eq!(b, Block::zeroed(4));
        assert_eq!(d.probe_count(), 1);
    }

    #[test]
    fn read_your_writes_and_last_writer_wins() {
        let mut d = dev(3, 6, 16);
        let x = Block::from_words(vec![1, 2, 0xffff]);
        d.write_block(BlockAddress(3), x.clone()).unwrap();
        assert_eq!(d.read_block(BlockAddress(3)).unwrap(), x);
        let y = Block::from_words(vec![9, 9, 9]);
        d.write_block(BlockAddress(3), y.clone()).unwrap();
        assert_eq!(d.read_block(BlockAddress(3)).unwrap(), y);
    }

    #[test]
    fn repeated_reads_are_not_cached() {
        let mut d = dev(2, 4, 8);
        for _ in 0..100 {
            d.read_block(BlockAddress(1)).unwrap();
        }
        assert_eq!(d.probe_count(), 100);
    }

    #[test]
    fn interleaved_writes_logged_in_order() {
        let mut d = dev(1, 2, 8);
        for a in [1, 2, 1] {
            d.write_block(BlockAddress(a), Block::from_words(vec![a])).unwrap();
        }
        let log: Vec<_> = d.probe_log().iter().map(|r| (r.addr.0, r.access)).collect();
        assert_eq!(log, vec![(1, Access::Write), (2, Access::Write), (1, Access::Write)]);
    }

    #[test]
    fn bad_block_and_address_rejected() {
        let mut d = dev(2, 4, 8);
        assert_eq!(
            d.write_block(BlockAddress(0), Block::from_words(vec![1])),
            Err(IoError::BlockSize { expected: 2, got: 1 })
        );
        assert!(matches!(
            d.write_block(BlockAddress(0), Block::from_words(vec![1, 256])),
            Err(IoError::WordOverflow { .. })
        ));
        assert!(matches!(
            d.read_block(BlockAddress(256)),
            Err(IoError::AddressOutOfRange { .. })
        ));
        // rejected accesses leave no trace
        assert_eq!(d.probe_count(), 0);
    }

    #[test]
    fn context_tags_and_partitions() {
        let mut d = dev(1, 2, 8);
        d.read_block(BlockAddress(0)).unwrap();
        d.set_context(5, Some(12));
        d.read_block(BlockAddress(0)).unwrap();
        d.read_block(BlockAddress(1)).unwrap();
        d.set_context(6, Some(13));
        d.write_block(BlockAddress(1), Block::from_words(vec![3])).unwrap();
        let log = d.probe_log();
        assert_eq!(log[0].leaf_id, None);
        assert_eq!(log[0].op_index, None);
        assert_eq!((log[1].op_index, log[1].leaf_id), (Some(5), Some(12)));
        assert_eq!((log[2].op_index, log[2].leaf_id), (Some(5), Some(12)));
        assert_eq!((log[3].op_index, log[3].leaf_id), (Some(6), Some(13)));
        assert!(log.windows(2).all(|w| w[0].seq < w[1].seq));
    }

    #[test]
    fn memory_is_free() {
        let mut d = dev(2, 8, 16);
        assert!(d.memory().iter().all(|&w| w == 0));
        d.memory_mut()[3] = 42;
        assert_eq!(d.memory()[3], 42);
        assert_eq!(d.probe_count(), 0);
    }

    #[test]
    fn additivity_and_csv() {
        let mut d = dev(1, 2, 8);
        for a in 0..3 {
            d.read_block(BlockAddress(a)).unwrap();
        }
        d.set_context(0, Some(4));
        for a in 0..2 {
            d.write_block(BlockAddress(a), Block::from_words(vec![1])).unwrap();
        }
        assert_eq!(d.probe_count(), 5);
        let csv = d.probe_log_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[0], "seq,op_index,leaf_id,addr,access");
        assert_eq!(lines[1], "0,,,0,read");
        assert_eq!(lines[5], "4,0,4,1,write");
    }

    #[test]
    fn remote_fetch_on_first_touch() {
        let mut d = dev(2, 4, 8);
        d.write_block(BlockAddress(1), Block::from_words(vec![1, 1])).unwrap();
        let mut contents = HashMap::new();
        contents.insert(1, Block::from_words(vec![7, 7]));
        d.attach_remote([BlockAddress(1), BlockAddress(2)], contents);
        assert_eq!(d.read_block(BlockAddress(1)).unwrap().words(), &[7, 7]);
        d.write_block(BlockAddress(1), Block::from_words(vec![8, 8])).unwrap();
        assert_eq!(d.read_block(BlockAddress(1)).unwrap().words(), &[8, 8]);
        d.read_block(BlockAddress(3)).unwrap();
        assert_eq!(d.detach_remote(), vec![BlockAddress(1)]);
    }
}
