//! Priority-queue interface and implementations.
//!
//! All implementations order entries by `(priority, key, timestamp)`, so any
//! two of them return identical extraction sequences on the same input.

mod buffered;
mod codec;
mod oracle;
mod run;
mod tournament;

use std::cmp::Ordering;

use thiserror::Error;

use crate::io_model::{Device, IoError, Word};

pub use buffered::{BufferedHeap, HeapLayout};
pub use codec::EntryCodec;
pub use oracle::OracleQueue;
pub use run::{run_workload, ProbeTotals, RunError, RunReport};
pub use tournament::{TournamentLayout, TournamentQueue};

pub type Key = u64;
pub type Priority = i64;

/// Sentinel standing in for an infinite priority.
pub const PRIORITY_INF: Priority = i64::MAX;
/// Sentinel used by the Delete recipe; never accepted from callers.
pub const PRIORITY_NEG_INF: Priority = i64::MIN;

/// A stored element. Ordered by `(priority, key, timestamp)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Entry {
    pub key: Key,
    pub priority: Priority,
    pub timestamp: u64,
}

impl Entry {
    pub fn new(key: Key, priority: Priority, timestamp: u64) -> Self {
        Entry {
            key,
            priority,
            timestamp,
        }
    }

    pub fn pair(&self) -> (Key, Priority) {
        (self.key, self.priority)
    }
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.priority, self.key, self.timestamp).cmp(&(other.priority, other.key, other.timestamp))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// One priority-queue operation as it appears in a workload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Operation {
    Insert { key: Key, priority: Priority },
    Delete { key: Key },
    ExtractMin,
    DecreaseKey { key: Key, priority: Priority },
}

impl Operation {
    pub fn class(&self) -> OpClass {
        match self {
            Operation::Insert { .. } => OpClass::Insert,
            Operation::Delete { .. } => OpClass::Delete,
            Operation::ExtractMin => OpClass::ExtractMin,
            Operation::DecreaseKey { .. } => OpClass::DecreaseKey,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpClass {
    Insert,
    Delete,
    ExtractMin,
    DecreaseKey,
}

/// An operation together with the workload leaf it belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct LeafOp {
    pub leaf: Option<u32>,
    #[serde(flatten)]
    pub op: Operation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Capabilities {
    pub decrease_key: bool,
    pub delete: bool,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PqError {
    #[error("key {0} is already present")]
    DuplicateKey(Key),
    #[error("key {0} is not present")]
    KeyAbsent(Key),
    #[error("queue is empty")]
    Empty,
    #[error("{0} is not supported by this queue")]
    Unsupported(&'static str),
    #[error("priority {0} is reserved")]
    ReservedPriority(Priority),
    #[error("value does not fit the device word: {0}")]
    Encoding(String),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("inconsistent state: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Common interface of every priority queue in the crate.
pub trait PriorityQueue {
    fn name(&self) -> String;

    fn capabilities(&self) -> Capabilities;

    fn insert(&mut self, key: Key, priority: Priority) -> Result<(), PqError>;

    fn extract_min(&mut self) -> Result<(Key, Priority), PqError>;

    /// Lowers the priority of `key` to `min(old, priority)`.
    fn decrease_key(&mut self, _key: Key, _priority: Priority) -> Result<(), PqError> {
        Err(PqError::Unsupported("decrease_key"))
    }

    /// Removes a present key: DecreaseKey to the minus-infinity sentinel,
    /// then ExtractMin.
    fn delete_key(&mut self, key: Key) -> Result<(), PqError> {
        if !self.capabilities().decrease_key {
            return Err(PqError::Unsupported("delete"));
        }
        self.decrease_key(key, PRIORITY_NEG_INF)?;
        let (got, _) = self.extract_min()?;
        if got != key {
            return Err(PqError::Corrupt(format!("delete of {key} extracted {got}")));
        }
        Ok(())
    }

    /// Delete with no effect when the key is absent.
    fn delete_if_present(&mut self, _key: Key) -> Result<(), PqError> {
        Err(PqError::Unsupported("delete"))
    }

    /// Number of stored entries, if the queue tracks it.
    fn len(&self) -> Option<usize>;

    fn is_empty(&self) -> Option<bool> {
        self.len().map(|n| n == 0)
    }

    /// Removes everything, leaving a fresh queue on the same device.
    fn clear(&mut self) -> Result<(), PqError>;

    fn device(&self) -> Option<&Device> {
        None
    }

    fn device_mut(&mut self) -> Option<&mut Device> {
        None
    }

    /// Seed of the key hash, for queues that hash keys.
    fn hash_seed(&self) -> Option<u64> {
        None
    }
}

/// Queues whose complete state is the device plus an image of their
/// `M`-word main memory.
pub trait ExternalQueue: PriorityQueue {
    /// Serialized main-memory state.
    fn memory_image(&self) -> Vec<Word>;

    /// Replaces the main-memory state with a previously taken image.
    fn restore_memory(&mut self, image: &[Word]) -> Result<(), PqError>;

    /// Replaces the device, keeping the main-memory state.
    fn replace_device(&mut self, device: Device);

    /// Enables or disables the caller-contract checks (duplicate/absent key
    /// detection). The checks use bookkeeping outside the model and never
    /// influence probes.
    fn set_contract_checks(&mut self, enabled: bool);
}

pub(crate) fn check_user_priority(priority: Priority) -> Result<(), PqError> {
    if priority == PRIORITY_NEG_INF {
        return Err(PqError::ReservedPriority(priority));
    }
    Ok(())
}
