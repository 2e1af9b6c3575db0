//! Attribution of probes to workload-tree nodes and the per-node statistics
//! used to pick an embedding node.
//!
//! The first probe of an address is charged to the leaf issuing it. Every
//! later probe is charged to the lowest common ancestor of the current leaf
//! and the leaf that made the previous probe of the same address. A probe
//! charged to an internal node `v` goes from child `c_i(v)` (where the
//! address was last touched) to child `c_j(v)` (where it is touched now),
//! with `i < j`; `L(v,k)` counts probes with `i = k` and `R(v,k)` those with
//! `j = k`.

use std::collections::HashMap;

use thiserror::Error;

use crate::hard_dist::{NodeId, NodeKind, Tree};
use crate::io_model::ProbeRecord;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StatsError {
    #[error("probe {seq} carries no leaf context")]
    MissingLeaf { seq: u64 },
    #[error("probe {seq} names node {leaf}, which is not a leaf of the tree")]
    NotALeaf { seq: u64, leaf: u32 },
    #[error("no trials to select from")]
    NoTrials,
    #[error("height {0} leaves no internal level to select from")]
    HeightTooSmall(u32),
}

/// Where one probe was charged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Charge {
    pub node: NodeId,
    /// Leaf issuing the probe.
    pub leaf: NodeId,
    /// Leaf of the previous probe to the same address.
    pub previous: Option<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Attribution {
    pub charges: Vec<Charge>,
    /// Last leaf to touch each address.
    pub last_touch: HashMap<u64, NodeId>,
}

/// Charges every probe of `log` to a node of `tree`. Leaf ids are taken
/// relative to `leaf_offset` (the offset of the tree in a multi-tree run).
pub fn attribute(log: &[ProbeRecord], tree: &Tree) -> Result<Attribution, StatsError> {
    attribute_with_offset(log, tree, 0)
}

pub fn attribute_with_offset(log: &[ProbeRecord], tree: &Tree, leaf_offset: u32) -> Result<Attribution, StatsError> {
    let mut a = Attribution::default();
    a.charges.reserve(log.len());
    for p in log {
        let raw = p.leaf_id.ok_or(StatsError::MissingLeaf { seq: p.seq })?;
        let leaf = raw
            .checked_sub(leaf_offset)
            .filter(|&l| (l as usize) < tree.len() && !tree.node(l).is_internal())
            .ok_or(StatsError::NotALeaf { seq: p.seq, leaf: raw })?;
        let previous = a.last_touch.insert(p.addr.0, leaf);
        let node = previous.map_or(leaf, |z| tree.lca(z, leaf));
        a.charges.push(Charge { node, leaf, previous });
    }
    Ok(a)
}

/// Per-node probe counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeStats {
    pub node: NodeId,
    pub height: u32,
    pub kind: NodeKind,
    /// `|P(v)|`: probes charged to the node.
    pub p_count: u64,
    /// `L(v,k)` for `k = 1..=2+β` (index `k-1`); empty for leaves.
    pub l_counts: Vec<u64>,
    /// `R(v,k)`, indexed like `l_counts`.
    pub r_counts: Vec<u64>,
    /// `C(v)`: probes issued by leaves of the subtree.
    pub c_count: u64,
    /// Total probes of the run.
    pub t_total: u64,
}

pub fn node_stats(attribution: &Attribution, tree: &Tree) -> Vec<NodeStats> {
    let t_total = attribution.charges.len() as u64;
    let mut stats: Vec<NodeStats> = tree
        .nodes()
        .iter()
        .map(|n| NodeStats {
            node: n.id,
            height: n.height,
            kind: n.kind,
            p_count: 0,
            l_counts: vec![0; n.children.len()],
            r_counts: vec![0; n.children.len()],
            c_count: 0,
            t_total,
        })
        .collect();
    // Probes issued per leaf, summed over subtrees below.
    let mut issued = vec![0u64; tree.len()];
    for c in &attribution.charges {
        issued[c.leaf as usize] += 1;
        let s = &mut stats[c.node as usize];
        s.p_count += 1;
        if let (true, Some(z)) = (tree.node(c.node).is_internal(), c.previous) {
            let i = tree.child_index(c.node, z).expect("charged node is an ancestor");
            let j = tree.child_index(c.node, c.leaf).expect("charged node is an ancestor");
            s.l_counts[i - 1] += 1;
            s.r_counts[j - 1] += 1;
        }
    }
    // Pre-order: children follow their parent, so a reverse sweep sums up.
    for n in tree.nodes().iter().rev() {
        let own = if n.is_internal() {
            n.children.iter().map(|&c| stats[c as usize].c_count).sum()
        } else {
            issued[n.id as usize]
        };
        stats[n.id as usize].c_count = own;
    }
    stats
}

/// Mean with a normal-approximation 95% confidence half-width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub half_width: f64,
}

impl Estimate {
    pub fn of(samples: &[f64]) -> Estimate {
        let n = samples.len() as f64;
        if samples.is_empty() {
            return Estimate {
                mean: 0.0,
                half_width: 0.0,
            };
        }
        let mean = samples.iter().sum::<f64>() / n;
        if samples.len() < 2 {
            return Estimate { mean, half_width: 0.0 };
        }
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Estimate {
            mean,
            half_width: 1.96 * (var / n).sqrt(),
        }
    }
}

/// Result of the node search.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub h_star: u32,
    pub node: NodeId,
    /// Child index in `2..=β+1`.
    pub k: usize,
    /// Trial-averaged `Σ |P(v)|` over internal nodes of height `h_star`.
    pub level_p: Estimate,
    /// Trial-averaged `|L(v,k)| + |R(v,k)|` at the chosen pair.
    pub pair_lr: Estimate,
    /// Trial average over `k = 2..=β+1` of `|L(v,k)| + |R(v,k)|` at the node.
    pub node_mean_lr: f64,
    /// Trial-averaged `C(v)` at the chosen node.
    pub c_v: Estimate,
    /// Average `C` over the height class, the base of the admission bound.
    pub level_mean_c: f64,
    pub trials: usize,
}

pub const DEFAULT_ADMISSION_FACTOR: f64 = 4.0;

/// Picks the height `h* ∈ {⌊h/2⌋,…,h}` with the smallest trial-averaged
/// probe mass, then the node `v` at that height and middle child `k` with
/// the fewest averaged `L + R` probes among nodes whose averaged `C(v)` is
/// within `admission` times the height-class average. Ties go to the
/// smaller height, then the smaller node id, then the smaller `k`.
pub fn find_embedding(trials: &[Vec<NodeStats>], tree: &Tree, admission: f64) -> Result<Embedding, StatsError> {
    if trials.is_empty() {
        return Err(StatsError::NoTrials);
    }
    let h = tree.params.h;
    let beta = tree.params.beta as usize;
    let lo = (h / 2).max(1);
    let per_trial = |f: &dyn Fn(&[NodeStats]) -> f64| -> Vec<f64> { trials.iter().map(|t| f(t)).collect() };
    let mut best: Option<(f64, u32, Estimate)> = None;
    for height in lo..=h {
        let samples = per_trial(&|t| {
            t.iter()
                .filter(|s| s.kind == NodeKind::Internal && s.height == height)
                .map(|s| s.p_count as f64)
                .sum()
        });
        let est = Estimate::of(&samples);
        if best.as_ref().is_none_or(|(m, _, _)| est.mean < *m) {
            best = Some((est.mean, height, est));
        }
    }
    let (_, h_star, level_p) = best.ok_or(StatsError::HeightTooSmall(h))?;
    let level: Vec<NodeId> = tree
        .internal_nodes()
        .filter(|n| n.height == h_star)
        .map(|n| n.id)
        .collect();
    let avg =
        |f: &dyn Fn(&NodeStats) -> f64, v: NodeId| -> Vec<f64> { trials.iter().map(|t| f(&t[v as usize])).collect() };
    let c_means: Vec<f64> = level
        .iter()
        .map(|&v| Estimate::of(&avg(&|s| s.c_count as f64, v)).mean)
        .collect();
    let level_mean_c = c_means.iter().sum::<f64>() / c_means.len() as f64;
    let mut choice: Option<(f64, NodeId, usize, Estimate)> = None;
    for (idx, &v) in level.iter().enumerate() {
        if c_means[idx] > admission * level_mean_c {
            continue;
        }
        for k in 2..=beta + 1 {
            let est = Estimate::of(&avg(&|s| (s.l_counts[k - 1] + s.r_counts[k - 1]) as f64, v));
            if choice.as_ref().is_none_or(|(m, _, _, _)| est.mean < *m) {
                choice = Some((est.mean, v, k, est));
            }
        }
    }
    let (_, node, k, pair_lr) = choice.expect("the smallest C in a class is always admitted");
    let node_mean_lr = (2..=beta + 1)
        .map(|k| Estimate::of(&avg(&|s| (s.l_counts[k - 1] + s.r_counts[k - 1]) as f64, node)).mean)
        .sum::<f64>()
        / beta as f64;
    Ok(Embedding {
        h_star,
        node,
        k,
        level_p,
        pair_lr,
        node_mean_lr,
        c_v: Estimate::of(&avg(&|s| s.c_count as f64, node)),
        level_mean_c,
        trials: trials.len(),
    })
}

/// CSV with columns `node,height,kind,P,C,L1..L{2+β},R1..R{2+β}`; leaves
/// leave the L/R columns empty.
pub fn stats_to_csv(stats: &[NodeStats], beta: u32) -> String {
    let width = beta as usize + 2;
    let mut out = String::from("node,height,kind,P,C");
    for k in 1..=width {
        out.push_str(&format!(",L{k}"));
    }
    for k in 1..=width {
        out.push_str(&format!(",R{k}"));
    }
    out.push('\n');
    for s in stats {
        let kind = match s.kind {
            NodeKind::Internal => "internal",
            NodeKind::InsertLeaf => "insert_leaf",
            NodeKind::DeleteLeaf => "delete_leaf",
            NodeKind::ExtractMinLeaf => "extract_min_leaf",
        };
        out.push_str(&format!("{},{},{},{},{}", s.node, s.height, kind, s.p_count, s.c_count));
        for counts in [&s.l_counts, &s.r_counts] {
            for k in 0..width {
                out.push(',');
                if let Some(c) = counts.get(k) {
                    out.push_str(&c.to_string());
                }
            }
        }
        out.push('\n');
    }
    out
}

/// Checks the partition and child-sum identities; returns the first
/// violation found.
pub fn check_conservation(stats: &[NodeStats]) -> Result<(), String> {
    let total: u64 = stats.iter().map(|s| s.p_count).sum();
    if let Some(s) = stats.first() {
        if total != s.t_total {
            return Err(format!("sum of P is {total}, run made {} probes", s.t_total));
        }
    }
    for s in stats.iter().filter(|s| s.kind == NodeKind::Internal) {
        let l: u64 = s.l_counts.iter().sum();
        let r: u64 = s.r_counts.iter().sum();
        if l != s.p_count || r != s.p_count {
            return Err(format!("node {}: P = {}, sum L = {l}, sum R = {r}", s.node, s.p_count));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hard_dist::TreeParams;
    use crate::io_model::{Access, BlockAddress};

    fn probe(seq: u64, leaf: u32, addr: u64) -> ProbeRecord {
        ProbeRecord {
            seq,
            op_index: Some(seq),
            leaf_id: Some(leaf),
            addr: BlockAddress(addr),
            access: Access::Read,
        }
    }

    fn tree() -> Tree {
        Tree::build(&TreeParams::new(2, 2, 1, 0)).unwrap()
    }

    #[test]
    fn first_probe_and_same_leaf() {
        let t = tree();
        let leaf = t.leaves().nth(3).unwrap().id;
        let a = attribute(&[probe(0, leaf, 5), probe(1, leaf, 5)], &t).unwrap();
        assert_eq!(a.charges[0].node, leaf);
        assert_eq!(a.charges[1].node, leaf);
    }

    #[test]
    fn cross_child_probe_goes_to_ancestor() {
        let t = tree();
        let v = t.root();
        let in_c1 = t.child(v, 1);
        let under_c3 = t.node(t.child(v, 3)).children[1];
        let a = attribute(&[probe(0, in_c1, 9), probe(1, under_c3, 9)], &t).unwrap();
        assert_eq!(a.charges[1].node, v);
        let s = node_stats(&a, &t);
        assert_eq!(s[v as usize].l_counts[0], 1);
        assert_eq!(s[v as usize].r_counts[2], 1);
        check_conservation(&s).unwrap();
    }

    #[test]
    fn missing_context_rejected() {
        let t = tree();
        let mut p = probe(0, 0, 1);
        p.leaf_id = None;
        assert_eq!(attribute(&[p], &t), Err(StatsError::MissingLeaf { seq: 0 }));
        assert!(matches!(
            attribute(&[probe(0, 0, 1)], &t),
            Err(StatsError::NotALeaf { .. })
        ));
    }

    #[test]
    fn handcrafted_ten_probe_table() {
        let t = tree();
        let root = t.root();
        let c1 = t.child(root, 1);
        let c2 = t.child(root, 2);
        let c2_ins = t.child(c2, 1);
        let c2_del = t.child(c2, 2);
        let c3 = t.child(root, 3);
        let c3_del = t.child(c3, 3);
        let c4 = t.child(root, 4);
        let log: Vec<_> = [
            (c1, 1),
            (c1, 2),
            (c2_ins, 1),
            (c2_del, 1),
            (c2_del, 3),
            (c3_del, 3),
            (c3_del, 2),
            (c4, 1),
            (c4, 4),
            (c4, 4),
        ]
        .iter()
        .enumerate()
        .map(|(i, &(l, a))| probe(i as u64, l, a))
        .collect();
        let s = node_stats(&attribute(&log, &t).unwrap(), &t);
        // Root gets probes 2 (c1->c2), 5 (c2->c3), 6 (c1->c3) and 7 (c2->c4).
        let r = &s[root as usize];
        assert_eq!(r.p_count, 4);
        assert_eq!(r.l_counts, vec![2, 2, 0, 0]);
        assert_eq!(r.r_counts, vec![0, 1, 2, 1]);
        // c2 gets probe 3 (its insert-leaf -> its first delete-leaf).
        assert_eq!(s[c2 as usize].p_count, 1);
        assert_eq!(s[c2 as usize].l_counts[0], 1);
        assert_eq!(s[c2 as usize].r_counts[1], 1);
        // Leaves: first touches of 1, 2, 3 and 4, plus the repeat in c4.
        assert_eq!(s[c1 as usize].p_count, 2);
        assert_eq!(s[c2_del as usize].p_count, 1);
        assert_eq!(s[c4 as usize].p_count, 2);
        assert_eq!(s[root as usize].c_count, 10);
        assert_eq!(s[c2 as usize].c_count, 3);
        assert!(s[c1 as usize].l_counts.is_empty());
        check_conservation(&s).unwrap();
    }

    #[test]
    fn degenerate_single_leaf_log() {
        let t = tree();
        let leaf = t.child(0, 1);
        let log: Vec<_> = (0..5).map(|i| probe(i, leaf, i % 2)).collect();
        let s = node_stats(&attribute(&log, &t).unwrap(), &t);
        let e = find_embedding(&[s], &t, DEFAULT_ADMISSION_FACTOR).unwrap();
        assert_eq!(e.level_p.mean, 0.0);
        assert_eq!(e.pair_lr.mean, 0.0);
        assert_eq!(e.h_star, 1);
        assert_eq!(e.k, 2);
        let first_h1 = t.internal_nodes().find(|n| n.height == 1).unwrap().id;
        assert_eq!(e.node, first_h1);
    }

    #[test]
    fn empty_trials_rejected() {
        assert_eq!(find_embedding(&[], &tree(), 4.0), Err(StatsError::NoTrials));
    }
}
