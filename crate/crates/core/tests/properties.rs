//! Randomized invariants across the crate.

use ioprobe::dk_reduction::ReducedQueue;
use ioprobe::hard_dist::{sample_ordered_subset, TreeParams, Workload};
use ioprobe::pq::{run_workload, BufferedHeap, ExternalQueue, LeafOp, OracleQueue, TournamentQueue};
use ioprobe::probe_stats::{attribute, check_conservation, node_stats};
use ioprobe::{Device, DeviceConfig, Operation, PriorityQueue};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Raw step: (selector, key pick, priority).
type Step = (u8, u16, i64);

/// Turns raw steps into a valid sequence over live keys.
fn to_ops(steps: &[Step], allow_updates: bool) -> Vec<LeafOp> {
    let mut oracle = OracleQueue::new();
    let mut live: Vec<u64> = Vec::new();
    let mut next = 0u64;
    let mut ops = Vec::new();
    for &(sel, pick, p) in steps {
        let op = match sel % 8 {
            _ if live.is_empty() => None,
            0 | 1 if allow_updates => {
                let key = live[pick as usize % live.len()];
                oracle.decrease_key(key, p).unwrap();
                Some(Operation::DecreaseKey { key, priority: p })
            }
            2 if allow_updates => {
                let key = live.swap_remove(pick as usize % live.len());
                oracle.delete_key(key).unwrap();
                Some(Operation::Delete { key })
            }
            3 | 4 => {
                let (key, _) = oracle.extract_min().unwrap();
                live.retain(|&k| k != key);
                Some(Operation::ExtractMin)
            }
            _ => None,
        };
        let op = op.unwrap_or_else(|| {
            oracle.insert(next, p).unwrap();
            live.push(next);
            next += 1;
            Operation::Insert {
                key: next - 1,
                priority: p,
            }
        });
        ops.push(LeafOp { leaf: None, op });
    }
    ops
}

fn dev(b: usize, m: usize) -> Device {
    Device::new(DeviceConfig::new(b, m, 64).unwrap()).unwrap()
}

fn steps(max: usize) -> impl Strategy<Value = Vec<Step>> {
    prop::collection::vec((any::<u8>(), any::<u16>(), 0i64..500), 1..max)
}

/// Runs `prefix`, copies the queue through its device and memory image into
/// `replica`, then checks both issue the same probes on `suffix`.
fn check_resume(
    mut q: Box<dyn ExternalQueue>,
    mut replica: Box<dyn ExternalQueue>,
    prefix: &[LeafOp],
    suffix: &[LeafOp],
) -> Result<(), TestCaseError> {
    run_workload(q.as_mut(), prefix, 0).unwrap();
    let cut = q.device().unwrap().probe_count() as usize;
    replica.set_contract_checks(false);
    replica.replace_device(q.device().unwrap().clone());
    replica.restore_memory(&q.memory_image()).unwrap();
    q.set_contract_checks(false);
    for lo in suffix {
        let step = |x: &mut dyn PriorityQueue| match lo.op {
            Operation::Insert { key, priority } => x.insert(key, priority).map(|_| None),
            Operation::DecreaseKey { key, priority } => x.decrease_key(key, priority).map(|_| None),
            Operation::Delete { key } => x.delete_if_present(key).map(|_| None),
            Operation::ExtractMin => x.extract_min().map(Some).or(Ok(None)),
        };
        let a = step(q.as_mut());
        let b = step(replica.as_mut());
        prop_assert_eq!(a, b);
    }
    let (la, lb) = (q.device().unwrap().probe_log(), replica.device().unwrap().probe_log());
    prop_assert_eq!(la.len(), lb.len());
    for (x, y) in la[cut..].iter().zip(&lb[cut..]) {
        prop_assert_eq!((x.addr, x.access), (y.addr, y.access));
    }
    prop_assert!(q.device().unwrap().same_contents(replica.device().unwrap()));
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn buffered_heap_matches_oracle(s in steps(600)) {
        let ops = to_ops(&s, false);
        let mut q = BufferedHeap::new(dev(8, 128)).unwrap();
        prop_assert!(run_workload(&mut q, &ops, 0).is_ok());
    }

    #[test]
    fn tournament_matches_oracle(s in steps(600), hash in any::<u64>()) {
        let ops = to_ops(&s, true);
        let mut q = TournamentQueue::new(dev(8, 192), 1024, hash).unwrap();
        prop_assert!(run_workload(&mut q, &ops, 0).is_ok());
    }

    #[test]
    fn reduced_heap_matches_oracle(s in steps(600)) {
        let ops = to_ops(&s, true);
        let mut q = ReducedQueue::new(BufferedHeap::new(dev(8, 128)).unwrap());
        prop_assert!(run_workload(&mut q, &ops, 0).is_ok());
    }

    #[test]
    fn tournament_resumes_from_image(s in steps(400), cut in 0usize..400) {
        let ops = to_ops(&s, true);
        let cut = cut.min(ops.len());
        let make = || Box::new(TournamentQueue::new(dev(8, 192), 1024, 7).unwrap()) as Box<dyn ExternalQueue>;
        check_resume(make(), make(), &ops[..cut], &ops[cut..])?;
    }

    #[test]
    fn reduced_heap_resumes_from_image(s in steps(400), cut in 0usize..400) {
        let ops = to_ops(&s, true);
        let cut = cut.min(ops.len());
        let make = || {
            Box::new(ReducedQueue::new(BufferedHeap::new(dev(8, 192)).unwrap())) as Box<dyn ExternalQueue>
        };
        check_resume(make(), make(), &ops[..cut], &ops[cut..])?;
    }

    #[test]
    fn ordered_subset_is_distinct_and_in_range(universe in 1u64..5000, n in 0usize..200, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match sample_ordered_subset(universe, n, &mut rng) {
            Ok(keys) => {
                prop_assert_eq!(keys.len(), n);
                let distinct: std::collections::HashSet<_> = keys.iter().collect();
                prop_assert_eq!(distinct.len(), n);
                prop_assert!(keys.iter().all(|&k| k < universe));
            }
            Err(_) => prop_assert!((n as u64) > universe),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn workload_roundtrips(beta in 2u32..4, h in 1u32..5, m in 1u64..3, seed in any::<u64>()) {
        let w = Workload::materialize(&TreeParams::new(beta, h, m, seed)).unwrap();
        let mut bin = Vec::new();
        w.write_binary(&mut bin).unwrap();
        let back = Workload::read_binary(bin.as_slice()).unwrap();
        prop_assert_eq!(&back.ops, &w.ops);
        prop_assert_eq!(&back.params, &w.params);
        let mut again = Vec::new();
        back.write_binary(&mut again).unwrap();
        prop_assert_eq!(&again, &bin);
        let mut text = Vec::new();
        w.write_jsonl(&mut text).unwrap();
        let back = Workload::read_jsonl(text.as_slice()).unwrap();
        prop_assert_eq!(&back.ops, &w.ops);
    }

    #[test]
    fn probes_are_conserved(beta in 2u32..4, h in 2u32..5, seed in any::<u64>(), tour in any::<bool>()) {
        let params = TreeParams::new(beta, h, 2, seed);
        let w = Workload::materialize(&params).unwrap();
        let tree = w.tree().unwrap();
        let mut q: Box<dyn PriorityQueue> = if tour {
            Box::new(TournamentQueue::new(dev(8, 192), 4 * params.n().unwrap() as usize, seed).unwrap())
        } else {
            let universe = params.universe().unwrap();
            Box::new(ReducedQueue::for_universe(BufferedHeap::new(dev(8, 192)).unwrap(), universe))
        };
        run_workload(q.as_mut(), &w.ops, seed).unwrap();
        let log = q.device().unwrap().probe_log();
        let stats = node_stats(&attribute(log, &tree).unwrap(), &tree);
        prop_assert!(check_conservation(&stats).is_ok());
        let root = stats.iter().find(|s| s.node == tree.root()).unwrap();
        prop_assert_eq!(root.c_count, log.len() as u64);
    }
}
