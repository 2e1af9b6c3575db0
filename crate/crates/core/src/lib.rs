//! I/O-model laboratory for priority queues.
//!
//! The crate simulates an external-memory machine that counts block probes,
//! provides instrumented external-memory priority queues, generates the
//! adversarial tree-structured workloads used to study DecreaseKey/Delete
//! lower bounds, attributes probes to tree nodes, and replays those workloads
//! as two-party set-intersection protocols with exact bit accounting.

pub mod comm_game;
pub mod dk_reduction;
pub mod hard_dist;
pub mod io_model;
pub mod pq;
pub mod probe_stats;

pub use io_model::{Access, Block, BlockAddress, Device, DeviceConfig, IoError, ProbeRecord, Word};
pub use pq::{Entry, Key, Operation, PqError, Priority, PriorityQueue, PRIORITY_INF, PRIORITY_NEG_INF};

/// Version string stamped into every exported report row.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
