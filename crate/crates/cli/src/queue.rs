//! Queue selection from the command line.

use std::fmt;
use std::str::FromStr;

use anyhow::{bail, Result};
use ioprobe::dk_reduction::ReducedQueue;
use ioprobe::pq::{BufferedHeap, ExternalQueue, OracleQueue, TournamentQueue};
use ioprobe::{Device, DeviceConfig, PriorityQueue};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Base {
    BufferedHeap,
    Tournament,
    Oracle,
}

/// `buffered_heap`, `tournament`, `oracle`, or a DecreaseKey wrapper over
/// one of them written `dk:<base>` or `dk_wrapped(<base>)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueueKind {
    pub base: Base,
    pub wrapped: bool,
}

impl FromStr for Base {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "buffered_heap" | "heap" => Ok(Base::BufferedHeap),
            "tournament" => Ok(Base::Tournament),
            "oracle" => Ok(Base::Oracle),
            other => Err(format!("unknown queue `{other}`")),
        }
    }
}

impl FromStr for QueueKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let inner = s
            .strip_prefix("dk:")
            .or_else(|| s.strip_prefix("dk_wrapped(").and_then(|r| r.strip_suffix(')')));
        match inner {
            Some(b) => Ok(QueueKind {
                base: b.parse()?,
                wrapped: true,
            }),
            None => Ok(QueueKind {
                base: s.parse()?,
                wrapped: false,
            }),
        }
    }
}

impl fmt::Display for Base {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Base::BufferedHeap => "buffered_heap",
            Base::Tournament => "tournament",
            Base::Oracle => "oracle",
        })
    }
}

impl fmt::Display for QueueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.wrapped {
            write!(f, "dk_wrapped({})", self.base)
        } else {
            write!(f, "{}", self.base)
        }
    }
}

/// Everything needed to build a fresh queue.
#[derive(Debug, Clone, Copy)]
pub struct QueueSpec {
    pub kind: QueueKind,
    pub device: DeviceConfig,
    /// Expected maximum number of stored keys.
    pub capacity: usize,
    /// Keys lie below this bound; sizes the wrapper's counter.
    pub universe: u64,
    pub hash_seed: u64,
}

impl QueueSpec {
    pub fn build(&self) -> Result<Box<dyn PriorityQueue>> {
        if self.kind.base == Base::Oracle {
            return Ok(if self.kind.wrapped {
                Box::new(ReducedQueue::for_universe(OracleQueue::new(), self.universe))
            } else {
                Box::new(OracleQueue::new())
            });
        }
        Ok(self.build_external()?)
    }

    /// Queues with a device and a memory image, as the two-party
    /// simulation needs.
    pub fn build_external(&self) -> Result<Box<dyn ExternalQueue>> {
        let dev = Device::new(self.device)?;
        Ok(match (self.kind.base, self.kind.wrapped) {
            (Base::BufferedHeap, false) => Box::new(BufferedHeap::new(dev)?),
            (Base::BufferedHeap, true) => Box::new(ReducedQueue::for_universe(BufferedHeap::new(dev)?, self.universe)),
            (Base::Tournament, false) => Box::new(TournamentQueue::new(dev, self.capacity, self.hash_seed)?),
            (Base::Tournament, true) => Box::new(ReducedQueue::for_universe(
                TournamentQueue::new(dev, self.capacity, self.hash_seed)?,
                self.universe,
            )),
            (Base::Oracle, _) => bail!("the oracle has no device or memory image"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_selectors() {
        let k: QueueKind = "dk:buffered_heap".parse().unwrap();
        assert_eq!(
            k,
            QueueKind {
                base: Base::BufferedHeap,
                wrapped: true
            }
        );
        let k: QueueKind = "dk_wrapped(tournament)".parse().unwrap();
        assert_eq!(k.to_string(), "dk_wrapped(tournament)");
        assert_eq!("oracle".parse::<QueueKind>().unwrap().to_string(), "oracle");
        assert!("dk:dk:oracle".parse::<QueueKind>().is_err());
        assert!("fibonacci".parse::<QueueKind>().is_err());
    }
}
