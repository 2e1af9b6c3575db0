//! In-memory reference queue with native DecreaseKey. Performs no probes.

use std::collections::{BTreeSet, HashMap};

use super::{check_user_priority, Capabilities, Entry, Key, PqError, Priority, PriorityQueue};

#[derive(Debug, Clone, Default)]
pub struct OracleQueue {
    ordered: BTreeSet<Entry>,
    by_key: HashMap<Key, Entry>,
    next_ts: u64,
}

impl OracleQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contains(&self, key: Key) -> bool {
        self.by_key.contains_key(&key)
    }

    pub fn priority_of(&self, key: Key) -> Option<Priority> {
        self.by_key.get(&key).map(|e| e.priority)
    }

    pub fn peek_min(&self) -> Option<(Key, Priority)> {
        self.ordered.first().map(Entry::pair)
    }

    /// Live entries in extraction order.
    pub fn entries(&self) -> impl Iterator<Item = &Entry> {
        self.ordered.iter()
    }

    fn remove(&mut self, key: Key) -> Option<Entry> {
        let e = self.by_key.remove(&key)?;
        self.ordered.remove(&e);
        Some(e)
    }
}

impl PriorityQueue for OracleQueue {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            decrease_key: true,
            delete: true,
        }
    }

    /// Accepts every priority, including the minus-infinity sentinel, so the
    /// queue can serve as the base of a DecreaseKey wrapper.
    fn insert(&mut self, key: Key, priority: Priority) -> Result<(), PqError> {
        if self.by_key.contains_key(&key) {
            return Err(PqError::DuplicateKey(key));
        }
        let e = Entry::new(key, priority, self.next_ts);
        self.next_ts += 1;
        self.ordered.insert(e);
        self.by_key.insert(key, e);
        Ok(())
    }

    fn extract_min(&mut self) -> Result<(Key, Priority), PqError> {
        let e = self.ordered.pop_first().ok_or(PqError::Empty)?;
        self.by_key.remove(&e.key);
        Ok(e.pair())
    }

    fn decrease_key(&mut self, key: Key, priority: Priority) -> Result<(), PqError> {
        check_user_priority(priority)?;
        let old = *self.by_key.get(&key).ok_or(PqError::KeyAbsent(key))?;
        if priority < old.priority {
            self.ordered.remove(&old);
            let e = Entry::new(key, priority, old.timestamp);
            self.ordered.insert(e);
            self.by_key.insert(key, e);
        }
        Ok(())
    }

    fn delete_key(&mut self, key: Key) -> Result<(), PqError> {
        self.remove(key).map(|_| ()).ok_or(PqError::KeyAbsent(key))
    }

    fn delete_if_present(&mut self, key: Key) -> Result<(), PqError> {
        self.remove(key);
        Ok(())
    }

    fn len(&self) -> Option<usize> {
        Some(self.by_key.len())
    }

    fn clear(&mut self) -> Result<(), PqError> {
        self.ordered.clear();
        self.by_key.clear();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singleton_and_ties() {
        let mut q = OracleQueue::new();
        q.insert(5, 10).unwrap();
        assert_eq!(q.extract_min(), Ok((5, 10)));
        assert_eq!(q.extract_min(), Err(PqError::Empty));
        q.insert(2, 7).unwrap();
        q.insert(1, 7).unwrap();
        assert_eq!(q.extract_min(), Ok((1, 7)));
        q.insert(9, 1).unwrap();
        q.insert(3, 5).unwrap();
        assert_eq!(q.extract_min(), Ok((9, 1)));
    }

    #[test]
    fn duplicate_rejected() {
        let mut q = OracleQueue::new();
        q.insert(5, 10).unwrap();
        assert_eq!(q.insert(5, 3), Err(PqError::DuplicateKey(5)));
    }

    #[test]
    fn decrease_takes_minimum() {
        let mut q = OracleQueue::new();
        q.insert(4, 10).unwrap();
        q.decrease_key(4, 20).unwrap();
        assert_eq!(q.priority_of(4), Some(10));
        q.decrease_key(4, 3).unwrap();
        assert_eq!(q.extract_min(), Ok((4, 3)));
        assert_eq!(q.decrease_key(4, 1), Err(PqError::KeyAbsent(4)));
    }

    #[test]
    fn delete_semantics() {
        let mut q = OracleQueue::new();
        q.insert(7, 5).unwrap();
        q.delete_key(7).unwrap();
        assert_eq!(q.extract_min(), Err(PqError::Empty));
        for (k, p) in [(1, 3), (2, 1), (3, 2)] {
            q.insert(k, p).unwrap();
        }
        q.delete_key(3).unwrap();
        assert_eq!(q.extract_min(), Ok((2, 1)));
        assert_eq!(q.extract_min(), Ok((1, 3)));
        assert_eq!(q.delete_key(3), Err(PqError::KeyAbsent(3)));
        q.delete_if_present(3).unwrap();
    }

    #[test]
    fn reserved_priority_rejected_by_decrease() {
        let mut q = OracleQueue::new();
        q.insert(1, 0).unwrap();
        assert!(matches!(q.decrease_key(1, i64::MIN), Err(PqError::ReservedPriority(_))));
    }
}
