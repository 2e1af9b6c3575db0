//! Executes a workload against a queue in lockstep with the oracle.

use thiserror::Error;

use crate::io_model::DeviceConfig;

use super::{Key, LeafOp, OpClass, Operation, OracleQueue, PqError, Priority, PriorityQueue};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("queue {queue} does not support {op}")]
    CapabilityMismatch { queue: String, op: &'static str },
    #[error("operation {index} ({op:?}): oracle answered {expected:?}, queue answered {got:?}")]
    Divergence {
        index: usize,
        op: Operation,
        expected: Option<(Key, Priority)>,
        got: Option<(Key, Priority)>,
    },
    #[error("operation {index} is invalid for the workload: {source}")]
    InvalidWorkload { index: usize, source: PqError },
    #[error("operation {index} failed in the queue: {source}")]
    Queue { index: usize, source: PqError },
}

/// Probe counts split by operation class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ProbeTotals {
    pub insert: u64,
    pub delete: u64,
    pub extract_min: u64,
    pub decrease_key: u64,
}

impl ProbeTotals {
    pub fn total(&self) -> u64 {
        self.insert + self.delete + self.extract_min + self.decrease_key
    }

    fn add(&mut self, class: OpClass, n: u64) {
        match class {
            OpClass::Insert => self.insert += n,
            OpClass::Delete => self.delete += n,
            OpClass::ExtractMin => self.extract_min += n,
            OpClass::DecreaseKey => self.decrease_key += n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub structure: String,
    pub config: Option<DeviceConfig>,
    pub ops: u64,
    pub op_counts: [u64; 4],
    pub probes: ProbeTotals,
    pub seed: u64,
    pub hash_seed: Option<u64>,
    /// Extraction answers in order (`None` for an ExtractMin on an empty queue).
    pub extractions: Vec<Option<(Key, Priority)>>,
}

impl RunReport {
    pub const CSV_HEADER: &'static str = "structure,B,M,w,N,probes_total,probes_insert,probes_delete,probes_extractmin,seed,probes_decreasekey,hash_seed,version";

    /// Average probes per operation of a class.
    pub fn amortized(&self, class: OpClass) -> f64 {
        let (n, p) = match class {
            OpClass::Insert => (self.op_counts[0], self.probes.insert),
            OpClass::Delete => (self.op_counts[1], self.probes.delete),
            OpClass::ExtractMin => (self.op_counts[2], self.probes.extract_min),
            OpClass::DecreaseKey => (self.op_counts[3], self.probes.decrease_key),
        };
        if n == 0 {
            0.0
        } else {
            p as f64 / n as f64
        }
    }

    pub fn csv_row(&self) -> String {
        let (b, m, w) = match self.config {
            Some(c) => (
                c.block_words.to_string(),
                c.memory_words.to_string(),
                c.word_bits.to_string(),
            ),
            None => (String::new(), String::new(), String::new()),
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.structure,
            b,
            m,
            w,
            self.ops,
            self.probes.total(),
            self.probes.insert,
            self.probes.delete,
            self.probes.extract_min,
            self.seed,
            self.probes.decrease_key,
            self.hash_seed.map(|s| s.to_string()).unwrap_or_default(),
            crate::VERSION
        )
    }
}

fn class_index(c: OpClass) -> usize {
    match c {
        OpClass::Insert => 0,
        OpClass::Delete => 1,
        OpClass::ExtractMin => 2,
        OpClass::DecreaseKey => 3,
    }
}

/// Runs `ops` on `pq`, checking every answer against a fresh oracle. Deletes
/// have no effect on absent keys. An ExtractMin on an empty queue is allowed
/// and must be answered as empty by both.
pub fn run_workload(pq: &mut dyn PriorityQueue, ops: &[LeafOp], seed: u64) -> Result<RunReport, RunError> {
    let caps = pq.capabilities();
    for lo in ops {
        match lo.op {
            Operation::DecreaseKey { .. } if !caps.decrease_key => {
                return Err(RunError::CapabilityMismatch {
                    queue: pq.name(),
                    op: "decrease_key",
                })
            }
            Operation::Delete { .. } if !caps.delete => {
                return Err(RunError::CapabilityMismatch {
                    queue: pq.name(),
                    op: "delete",
                })
            }
            _ => {}
        }
    }
    let mut oracle = OracleQueue::new();
    let mut report = RunReport {
        structure: pq.name(),
        config: pq.device().map(|d| *d.config()),
        ops: ops.len() as u64,
        op_counts: [0; 4],
        probes: ProbeTotals::default(),
        seed,
        hash_seed: pq.hash_seed(),
        extractions: Vec::new(),
    };
    for (index, lo) in ops.iter().enumerate() {
        let before = pq.device().map_or(0, |d| d.probe_count());
        if let Some(d) = pq.device_mut() {
            d.set_context(index as u64, lo.leaf);
        }
        let invalid = |source| RunError::InvalidWorkload { index, source };
        let failed = |source| RunError::Queue { index, source };
        match lo.op {
            Operation::Insert { key, priority } => {
                oracle.insert(key, priority).map_err(invalid)?;
                pq.insert(key, priority).map_err(failed)?;
            }
            Operation::DecreaseKey { key, priority } => {
                oracle.decrease_key(key, priority).map_err(invalid)?;
                pq.decrease_key(key, priority).map_err(failed)?;
            }
            Operation::Delete { key } => {
                oracle.delete_if_present(key).map_err(invalid)?;
                pq.delete_if_present(key).map_err(failed)?;
            }
            Operation::ExtractMin => {
                let expected = oracle.extract_min().ok();
                let got = match pq.extract_min() {
                    Ok(x) => Some(x),
                    Err(PqError::Empty) => None,
                    Err(e) => return Err(failed(e)),
                };
                if got != expected {
                    return Err(RunError::Divergence {
                        index,
                        op: lo.op,
                        expected,
                        got,
                    });
                }
                report.extractions.push(got);
            }
        }
        let after = pq.device().map_or(0, |d| d.probe_count());
        let class = lo.op.class();
        report.op_counts[class_index(class)] += 1;
        report.probes.add(class, after - before);
    }
    if let Some(d) = pq.device_mut() {
        d.clear_context();
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io_model::{Device, DeviceConfig};
    use crate::pq::BufferedHeap;

    fn op(op: Operation) -> LeafOp {
        LeafOp { leaf: None, op }
    }

    #[test]
    fn empty_workload_costs_nothing() {
        let mut h = BufferedHeap::new(Device::new(DeviceConfig::new(6, 96, 32).unwrap()).unwrap()).unwrap();
        let r = run_workload(&mut h, &[], 0).unwrap();
        assert_eq!(r.probes.total(), 0);
        assert_eq!(r.ops, 0);
    }

    #[test]
    fn capability_mismatch_detected() {
        let mut h = BufferedHeap::new(Device::new(DeviceConfig::new(6, 96, 32).unwrap()).unwrap()).unwrap();
        let ops = [
            op(Operation::Insert { key: 1, priority: 1 }),
            op(Operation::Delete { key: 1 }),
        ];
        assert!(matches!(
            run_workload(&mut h, &ops, 0),
            Err(RunError::CapabilityMismatch { op: "delete", .. })
        ));
    }

    #[test]
    fn report_conserves_probes() {
        let mut h = BufferedHeap::new(Device::new(DeviceConfig::new(6, 96, 32).unwrap()).unwrap()).unwrap();
        let mut ops: Vec<LeafOp> = (0..500)
            .map(|k| {
                op(Operation::Insert {
                    key: k,
                    priority: (k % 17) as i64,
                })
            })
            .collect();
        ops.extend((0..501).map(|_| op(Operation::ExtractMin)));
        let r = run_workload(&mut h, &ops, 7).unwrap();
        assert_eq!(r.probes.total(), h.device().unwrap().probe_count());
        assert!(r.probes.total() > 0);
        assert_eq!(r.extractions.last(), Some(&None));
        let row = r.csv_row();
        assert!(row.starts_with("buffered_heap,6,96,32,1001,"));
        assert_eq!(row.split(',').count(), RunReport::CSV_HEADER.split(',').count());
    }

    #[test]
    fn oracle_run_has_no_probes() {
        let mut o = OracleQueue::new();
        let ops = [op(Operation::Insert { key: 1, priority: 1 }), op(Operation::ExtractMin)];
        let r = run_workload(&mut o, &ops, 0).unwrap();
        assert_eq!(r.probes.total(), 0);
        assert_eq!(r.config, None);
    }
}
