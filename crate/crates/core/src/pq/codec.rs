//! Fixed-width on-disk records.
//!
//! A record is three words. A block holds `B / 3` records; unused record
//! slots are filled with the all-ones padding record and the `B mod 3`
//! trailing words are zero. Records never straddle blocks.

use crate::io_model::{Block, BlockAddress, Device, DeviceConfig, Word};

use super::{Entry, PqError, Priority, PRIORITY_INF, PRIORITY_NEG_INF};

pub type Record = [Word; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EntryCodec {
    word_bits: u32,
    block_words: usize,
    word_max: Word,
}

impl EntryCodec {
    pub fn new(config: &DeviceConfig) -> Result<Self, PqError> {
        if config.block_words < 3 {
            return Err(PqError::Capacity(format!(
                "blocks of {} words cannot hold a 3-word record",
                config.block_words
            )));
        }
        if config.word_bits < 8 {
            return Err(PqError::Encoding(format!(
                "{}-bit words are too narrow",
                config.word_bits
            )));
        }
        Ok(EntryCodec {
            word_bits: config.word_bits,
            block_words: config.block_words,
            word_max: config.word_max(),
        })
    }

    pub fn records_per_block(&self) -> usize {
        self.block_words / 3
    }

    pub fn word_max(&self) -> Word {
        self.word_max
    }

    pub fn padding(&self) -> Record {
        [self.word_max; 3]
    }

    /// Order-preserving map of a priority into a word. The sentinels map to
    /// the extreme words.
    pub fn encode_priority(&self, p: Priority) -> Result<Word, PqError> {
        if self.word_bits == 64 {
            return Ok((p as u64) ^ (1u64 << 63));
        }
        if p == PRIORITY_INF {
            return Ok(self.word_max);
        }
        if p == PRIORITY_NEG_INF {
            return Ok(0);
        }
        let shifted = p as i128 + (1i128 << (self.word_bits - 1));
        if shifted < 1 || shifted >= self.word_max as i128 {
            return Err(PqError::Encoding(format!("priority {p} in {} bits", self.word_bits)));
        }
        Ok(shifted as Word)
    }

    pub fn decode_priority(&self, w: Word) -> Priority {
        if self.word_bits == 64 {
            return (w ^ (1u64 << 63)) as i64;
        }
        if w == self.word_max {
            return PRIORITY_INF;
        }
        if w == 0 {
            return PRIORITY_NEG_INF;
        }
        (w as i128 - (1i128 << (self.word_bits - 1))) as i64
    }

    /// Checks that a value fits a non-reserved word.
    pub fn check_value(&self, what: &str, v: u64) -> Result<(), PqError> {
        if v >= self.word_max {
            return Err(PqError::Encoding(format!("{what} {v} in {} bits", self.word_bits)));
        }
        Ok(())
    }

    pub fn encode_entry(&self, e: &Entry) -> Result<Record, PqError> {
        self.check_value("key", e.key)?;
        self.check_value("timestamp", e.timestamp)?;
        Ok([e.key, self.encode_priority(e.priority)?, e.timestamp])
    }

    pub fn decode_entry(&self, r: &Record) -> Entry {
        Entry::new(r[0], self.decode_priority(r[1]), r[2])
    }

    pub fn is_padding(&self, r: &Record) -> bool {
        r[0] == self.word_max
    }

    /// Packs records into blocks starting at a block boundary.
    pub fn pack(&self, records: &[Record]) -> Vec<Block> {
        let per = self.records_per_block();
        let nblocks = records.len().div_ceil(per);
        (0..nblocks)
            .map(|b| {
                let mut words = vec![0; self.block_words];
                for s in 0..per {
                    let r = records.get(b * per + s).copied().unwrap_or(self.padding());
                    words[3 * s..3 * s + 3].copy_from_slice(&r);
                }
                Block::from_words(words)
            })
            .collect()
    }

    /// All record slots of a block, padding included.
    pub fn unpack(&self, block: &Block) -> Vec<Record> {
        let w = block.words();
        (0..self.records_per_block())
            .map(|s| [w[3 * s], w[3 * s + 1], w[3 * s + 2]])
            .collect()
    }

    /// Reads blocks `from..to` of the region starting at `base`.
    pub fn read_blocks(&self, dev: &mut Device, base: u64, from: usize, to: usize) -> Result<Vec<Record>, PqError> {
        let mut out = Vec::with_capacity((to - from) * self.records_per_block());
        for b in from..to {
            let block = dev.read_block(BlockAddress(base + b as u64))?;
            out.extend(self.unpack(&block));
        }
        Ok(out)
    }

    /// Writes `records` into the region starting at `base`, beginning with
    /// block `from`.
    pub fn write_blocks(&self, dev: &mut Device, base: u64, from: usize, records: &[Record]) -> Result<(), PqError> {
        for (i, block) in self.pack(records).into_iter().enumerate() {
            dev.write_block(BlockAddress(base + (from + i) as u64), block)?;
        }
        Ok(())
    }

    /// Blocks needed for `n` records.
    pub fn blocks_for(&self, n: usize) -> usize {
        n.div_ceil(self.records_per_block())
    }
}
