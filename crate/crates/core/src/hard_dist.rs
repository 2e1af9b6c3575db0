//! The recursive `(2+β)`-ary workload tree and its materialized update
//! sequences.
//!
//! An internal node `v` of height `h_v` has children `c_1..c_{2+β}`: `c_1` is
//! an insert-leaf with `M·β^{h_v}` Inserts at priority `h_v`, `c_2..c_{1+β}`
//! are recursive nodes of height `h_v − 1`, and `c_{2+β}` is an extract-min
//! leaf with `M·β^{h_v}` ExtractMins followed by re-Inserts of the extracted
//! pairs whose priority is not `h_v`. Height-0 nodes are delete-leaves with
//! `M·h` Deletes. The workload is the pre-order concatenation of the leaves.
//!
//! Insert keys and delete keys are independent uniform random sets of size
//! `M·h·β^h` from the universe `[(M·h·β^h)^4]`, each assigned to its
//! operations in uniform random order.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::{BufRead, Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::pq::{Key, LeafOp, Operation, OracleQueue, PqError, Priority, PriorityQueue, PRIORITY_INF};

pub type NodeId = u32;

/// Leaf id carried by the universe pre-population operations of the
/// no-spurious-delete variant.
pub const PRELUDE_LEAF: u32 = u32::MAX;

pub const MAGIC: &[u8; 6] = b"IOPQW1";
const FORMAT_VERSION: u16 = 1;
const RECORD_BYTES: usize = 21;
const MAX_PREPOPULATED: u64 = 1 << 26;

#[derive(Debug, Error)]
pub enum DistError {
    #[error("beta must be at least 2, got {0}")]
    BetaTooSmall(u32),
    #[error("height must be at least 1")]
    HeightZero,
    #[error("M must be at least 1")]
    MemoryZero,
    #[error("strict mode requires h >= 8 and h divisible by 4, got h = {0}")]
    Strict(u32),
    #[error("parameters overflow the 64-bit key type")]
    UniverseOverflow,
    #[error("universe of {universe} keys cannot supply {needed} distinct keys")]
    UniverseTooSmall { universe: u64, needed: u64 },
    #[error("universe of {0} keys is too large to pre-populate (pass a smaller universe)")]
    UniverseTooLarge(u64),
    #[error("workloads do not share parameters")]
    MixedParams,
    #[error("node {0} is not an internal node")]
    NotInternal(NodeId),
    #[error("malformed workload file: {0}")]
    Format(String),
    #[error("oracle failure while materializing: {0}")]
    Oracle(#[from] PqError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Parameters of the distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TreeParams {
    pub beta: u32,
    pub h: u32,
    pub m: u64,
    pub seed: u64,
    pub strict: bool,
    /// Replaces the default universe size `(M·h·β^h)^4`.
    pub universe: Option<u64>,
}

impl TreeParams {
    pub fn new(beta: u32, h: u32, m: u64, seed: u64) -> Self {
        TreeParams {
            beta,
            h,
            m,
            seed,
            strict: false,
            universe: None,
        }
    }

    pub fn with_universe(mut self, universe: u64) -> Self {
        self.universe = Some(universe);
        self
    }

    pub fn with_strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }

    /// Checks the parameters; returns warnings for settings that are legal
    /// but outside the asymptotic regime.
    pub fn validate(&self) -> Result<Vec<String>, DistError> {
        if self.beta < 2 {
            return Err(DistError::BetaTooSmall(self.beta));
        }
        if self.h == 0 {
            return Err(DistError::HeightZero);
        }
        if self.m == 0 {
            return Err(DistError::MemoryZero);
        }
        let strict_ok = self.h >= 8 && self.h.is_multiple_of(4);
        if self.strict && !strict_ok {
            return Err(DistError::Strict(self.h));
        }
        let n = self.n()?;
        let u = self.universe()?;
        if u < n {
            return Err(DistError::UniverseTooSmall { universe: u, needed: n });
        }
        let mut warnings = Vec::new();
        if !strict_ok {
            warnings.push(format!("h = {} is below the asymptotic regime (h >= 8, 4 | h)", self.h));
        }
        if self.universe.is_some() {
            warnings.push(format!("universe reduced to {u} keys (default (M*h*beta^h)^4)"));
        }
        Ok(warnings)
    }

    /// `β^e` with overflow detection.
    pub fn beta_pow(&self, e: u32) -> Result<u64, DistError> {
        (self.beta as u64).checked_pow(e).ok_or(DistError::UniverseOverflow)
    }

    /// `N = M·h·β^h`: the number of Deletes (and of ExtractMins).
    pub fn n(&self) -> Result<u64, DistError> {
        self.m
            .checked_mul(self.h as u64)
            .and_then(|x| x.checked_mul(self.beta_pow(self.h).ok()?))
            .ok_or(DistError::UniverseOverflow)
    }

    pub fn universe(&self) -> Result<u64, DistError> {
        match self.universe {
            Some(u) => Ok(u),
            None => self.n()?.checked_pow(4).ok_or(DistError::UniverseOverflow),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Internal,
    InsertLeaf,
    DeleteLeaf,
    ExtractMinLeaf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeNode {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub depth: u32,
    /// `h_v`; insert- and extract-min leaves carry the height of their parent.
    pub height: u32,
    pub kind: NodeKind,
    pub children: Vec<NodeId>,
    /// One past the last pre-order id of the subtree.
    pub end: NodeId,
    /// Operations placed in this leaf before re-insertions (0 for internal nodes).
    pub base_ops: u64,
}

impl TreeNode {
    pub fn is_internal(&self) -> bool {
        self.kind == NodeKind::Internal
    }
}

/// The workload tree, nodes indexed by pre-order id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tree {
    pub params: TreeParams,
    nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn build(params: &TreeParams) -> Result<Tree, DistError> {
        params.validate()?;
        let mut tree = Tree {
            params: *params,
            nodes: Vec::new(),
        };
        tree.grow(params.h, None, 0)?;
        Ok(tree)
    }

    fn push(&mut self, parent: Option<NodeId>, depth: u32, height: u32, kind: NodeKind, base_ops: u64) -> NodeId {
        let id = self.nodes.len() as NodeId;
        self.nodes.push(TreeNode {
            id,
            parent,
            depth,
            height,
            kind,
            children: Vec::new(),
            end: id + 1,
            base_ops,
        });
        id
    }

    fn grow(&mut self, height: u32, parent: Option<NodeId>, depth: u32) -> Result<NodeId, DistError> {
        let p = self.params;
        if height == 0 {
            let ops = p.m * p.h as u64;
            return Ok(self.push(parent, depth, 0, NodeKind::DeleteLeaf, ops));
        }
        let v = self.push(parent, depth, height, NodeKind::Internal, 0);
        let leaf_ops =
            p.m.checked_mul(p.beta_pow(height)?)
                .ok_or(DistError::UniverseOverflow)?;
        let mut children = vec![self.push(Some(v), depth + 1, height, NodeKind::InsertLeaf, leaf_ops)];
        for _ in 0..p.beta {
            children.push(self.grow(height - 1, Some(v), depth + 1)?);
        }
        children.push(self.push(Some(v), depth + 1, height, NodeKind::ExtractMinLeaf, leaf_ops));
        let end = self.nodes.len() as NodeId;
        let node = &mut self.nodes[v as usize];
        node.children = children;
        node.end = end;
        Ok(v)
    }

    pub fn root(&self) -> NodeId {
        0
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &TreeNode {
        &self.nodes[id as usize]
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn internal_nodes(&self) -> impl Iterator<Item = &TreeNode> {
        self.nodes.iter().filter(|n| n.is_internal())
    }

    /// Leaves in pre-order.
    pub fn leaves(&self) -> impl Iterator<Item = &TreeNode> {
        self.nodes.iter().filter(|n| !n.is_internal())
    }

    pub fn contains(&self, ancestor: NodeId, node: NodeId) -> bool {
        ancestor <= node && node < self.node(ancestor).end
    }

    /// 1-based index of the child of `v` whose subtree contains `node`.
    pub fn child_index(&self, v: NodeId, node: NodeId) -> Option<usize> {
        self.node(v)
            .children
            .iter()
            .position(|&c| self.contains(c, node))
            .map(|i| i + 1)
    }

    pub fn lca(&self, a: NodeId, b: NodeId) -> NodeId {
        let (mut a, mut b) = (a, b);
        while self.node(a).depth > self.node(b).depth {
            a = self.node(a).parent.expect("deeper node has a parent");
        }
        while self.node(b).depth > self.node(a).depth {
            b = self.node(b).parent.expect("deeper node has a parent");
        }
        while a != b {
            a = self.node(a).parent.expect("distinct nodes below the root");
            b = self.node(b).parent.expect("distinct nodes below the root");
        }
        a
    }

    /// `c_k(v)` for `k` in `1..=2+β`.
    pub fn child(&self, v: NodeId, k: usize) -> NodeId {
        self.node(v).children[k - 1]
    }
}

/// Keys drawn for one tree, in the order of the operations that use them.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct KeyAssignment {
    pub insert_keys: Vec<Key>,
    pub delete_keys: Vec<Key>,
}

impl KeyAssignment {
    pub fn sample(params: &TreeParams, rng: &mut ChaCha8Rng) -> Result<Self, DistError> {
        let n = params.n()?;
        let u = params.universe()?;
        Ok(KeyAssignment {
            insert_keys: sample_ordered_subset(u, n as usize, rng)?,
            delete_keys: sample_ordered_subset(u, n as usize, rng)?,
        })
    }

    /// Reads the keys off a materialized single-tree operation list.
    pub fn from_ops(tree: &Tree, ops: &[LeafOp], leaf_offset: u32) -> Self {
        let mut a = KeyAssignment::default();
        for lo in ops {
            let Some(leaf) = lo.leaf.and_then(|l| l.checked_sub(leaf_offset)) else {
                continue;
            };
            if leaf as usize >= tree.len() {
                continue;
            }
            match (tree.node(leaf).kind, lo.op) {
                (NodeKind::InsertLeaf, Operation::Insert { key, .. }) => a.insert_keys.push(key),
                (NodeKind::DeleteLeaf, Operation::Delete { key }) => a.delete_keys.push(key),
                _ => {}
            }
        }
        a
    }
}

/// A uniformly random `n`-subset of `[0, universe)` in uniformly random order.
pub fn sample_ordered_subset(universe: u64, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Key>, DistError> {
    if (n as u64) > universe {
        return Err(DistError::UniverseTooSmall {
            universe,
            needed: n as u64,
        });
    }
    if universe <= 4 * n as u64 {
        let mut all: Vec<Key> = (0..universe).collect();
        let (chosen, _) = all.partial_shuffle(rng, n);
        return Ok(chosen.to_vec());
    }
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let k = rng.gen_range(0..universe);
        if seen.insert(k) {
            out.push(k);
        }
    }
    Ok(out)
}

/// SplitMix64 step: derives independent sub-seeds from one seed.
pub fn split_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Basic,
    /// Independent trees, one after the other, on one queue.
    MultiTree(u32),
    /// Universe pre-population plus the transformed trees; no Delete ever
    /// targets an absent key.
    NoSpurious(u32),
}

impl Variant {
    pub fn trees(&self) -> u32 {
        match self {
            Variant::Basic => 1,
            Variant::MultiTree(m) | Variant::NoSpurious(m) => *m,
        }
    }

    fn code(&self) -> u8 {
        match self {
            Variant::Basic => 0,
            Variant::MultiTree(_) => 1,
            Variant::NoSpurious(_) => 2,
        }
    }
}

/// A closed, replayable operation list drawn from the distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub params: TreeParams,
    pub variant: Variant,
    pub ops: Vec<LeafOp>,
    /// Key assignment of each tree.
    pub assignments: Vec<KeyAssignment>,
    pub warnings: Vec<String>,
}

/// Leaf id and answer of one ExtractMin.
pub type Extraction = (Option<u32>, Option<(Key, Priority)>);

/// `(X_v, Y_v, Y_v \ X_v)` of an internal node.
pub type NodeSets = (BTreeSet<Key>, BTreeSet<Key>, BTreeSet<Key>);

/// Operation counts by class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OpCounts {
    pub inserts: u64,
    pub deletes: u64,
    pub extract_mins: u64,
    pub decrease_keys: u64,
}

/// Appends the operations of one tree, resolving extract-min leaves against
/// `oracle`. With `no_spurious`, Inserts and Deletes are rewritten so that
/// no Delete targets an absent key and every key ends at priority infinity.
fn emit_tree(
    tree: &Tree,
    keys: &KeyAssignment,
    oracle: &mut OracleQueue,
    leaf_offset: u32,
    no_spurious: bool,
    out: &mut Vec<LeafOp>,
) -> Result<(), DistError> {
    let mut ins = keys.insert_keys.iter();
    let mut del = keys.delete_keys.iter();
    let emit = |out: &mut Vec<LeafOp>, leaf: NodeId, op: Operation| {
        out.push(LeafOp {
            leaf: Some(leaf + leaf_offset),
            op,
        })
    };
    for leaf in tree.leaves() {
        let hv = leaf.height as Priority;
        match leaf.kind {
            NodeKind::InsertLeaf => {
                for _ in 0..leaf.base_ops {
                    let key = *ins.next().expect("one insert key per insert");
                    if no_spurious {
                        oracle.delete_key(key)?;
                        emit(out, leaf.id, Operation::Delete { key });
                    }
                    oracle.insert(key, hv)?;
                    emit(out, leaf.id, Operation::Insert { key, priority: hv });
                }
            }
            NodeKind::DeleteLeaf => {
                for _ in 0..leaf.base_ops {
                    let key = *del.next().expect("one delete key per delete");
                    if no_spurious {
                        oracle.delete_key(key)?;
                        emit(out, leaf.id, Operation::Delete { key });
                        oracle.insert(key, PRIORITY_INF)?;
                        emit(
                            out,
                            leaf.id,
                            Operation::Insert {
                                key,
                                priority: PRIORITY_INF,
                            },
                        );
                    } else {
                        oracle.delete_if_present(key)?;
                        emit(out, leaf.id, Operation::Delete { key });
                    }
                }
            }
            NodeKind::ExtractMinLeaf => {
                let mut got = Vec::with_capacity(leaf.base_ops as usize);
                for _ in 0..leaf.base_ops {
                    emit(out, leaf.id, Operation::ExtractMin);
                    match oracle.extract_min() {
                        Ok(x) => got.push(x),
                        Err(PqError::Empty) => {}
                        Err(e) => return Err(e.into()),
                    }
                }
                for (key, p) in got {
                    let priority = if p != hv {
                        p
                    } else if no_spurious {
                        PRIORITY_INF
                    } else {
                        continue;
                    };
                    oracle.insert(key, priority)?;
                    emit(out, leaf.id, Operation::Insert { key, priority });
                }
            }
            NodeKind::Internal => unreachable!("leaves only"),
        }
    }
    Ok(())
}

impl Workload {
    /// Samples and materializes one tree.
    pub fn materialize(params: &TreeParams) -> Result<Workload, DistError> {
        Self::materialize_with(params, &mut OracleQueue::new())
    }

    /// Materializes against a caller-supplied oracle (its prior contents
    /// influence the extract-min leaves).
    pub fn materialize_with(params: &TreeParams, oracle: &mut OracleQueue) -> Result<Workload, DistError> {
        let warnings = params.validate()?;
        let tree = Tree::build(params)?;
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let keys = KeyAssignment::sample(params, &mut rng)?;
        let mut ops = Vec::new();
        emit_tree(&tree, &keys, oracle, 0, false, &mut ops)?;
        Ok(Workload {
            params: *params,
            variant: Variant::Basic,
            ops,
            assignments: vec![keys],
            warnings,
        })
    }

    /// `m` independently sampled trees, one after the other. Tree `t` uses
    /// seed `split_seed(seed, t)` and leaf ids offset by `t · |T|`.
    pub fn materialize_multi(params: &TreeParams, m: u32) -> Result<Workload, DistError> {
        let warnings = params.validate()?;
        let tree = Tree::build(params)?;
        let mut oracle = OracleQueue::new();
        let mut ops = Vec::new();
        let mut assignments = Vec::new();
        for t in 0..m {
            let mut rng = ChaCha8Rng::seed_from_u64(split_seed(params.seed, t as u64));
            let keys = KeyAssignment::sample(params, &mut rng)?;
            emit_tree(&tree, &keys, &mut oracle, leaf_offset(&tree, t)?, false, &mut ops)?;
            assignments.push(keys);
        }
        Ok(Workload {
            params: *params,
            variant: Variant::MultiTree(m),
            ops,
            assignments,
            warnings,
        })
    }

    pub fn tree(&self) -> Result<Tree, DistError> {
        Tree::build(&self.params)
    }

    pub fn counts(&self) -> OpCounts {
        let mut c = OpCounts::default();
        for lo in &self.ops {
            match lo.op {
                Operation::Insert { .. } => c.inserts += 1,
                Operation::Delete { .. } => c.deletes += 1,
                Operation::ExtractMin => c.extract_mins += 1,
                Operation::DecreaseKey { .. } => c.decrease_keys += 1,
            }
        }
        c
    }

    /// Replays the operations on a fresh oracle and returns, for every
    /// ExtractMin, its leaf and answer.
    pub fn extraction_transcript(&self) -> Result<Vec<Extraction>, DistError> {
        let mut o = OracleQueue::new();
        let mut out = Vec::new();
        for lo in &self.ops {
            match lo.op {
                Operation::Insert { key, priority } => o.insert(key, priority)?,
                Operation::Delete { key } => o.delete_if_present(key)?,
                Operation::DecreaseKey { key, priority } => o.decrease_key(key, priority)?,
                Operation::ExtractMin => out.push((lo.leaf, o.extract_min().ok())),
            }
        }
        Ok(out)
    }

    /// Keys extracted with priority `h_v` at the extract-min leaf of `v`
    /// (first tree).
    pub fn recovered_set(&self, v: NodeId) -> Result<BTreeSet<Key>, DistError> {
        let tree = self.tree()?;
        let node = tree.node(v);
        if !node.is_internal() {
            return Err(DistError::NotInternal(v));
        }
        let leaf = *node.children.last().expect("internal nodes have children");
        let hv = node.height as Priority;
        Ok(self
            .extraction_transcript()?
            .into_iter()
            .filter(|(l, _)| *l == Some(leaf))
            .filter_map(|(_, a)| a)
            .filter(|&(_, p)| p == hv)
            .map(|(k, _)| k)
            .collect())
    }

    /// `recovered_set` for every internal node of the first tree, from one
    /// replay.
    pub fn recovered_sets(&self) -> Result<HashMap<NodeId, BTreeSet<Key>>, DistError> {
        let tree = self.tree()?;
        let mut out: HashMap<NodeId, BTreeSet<Key>> = tree.internal_nodes().map(|n| (n.id, BTreeSet::new())).collect();
        for (leaf, answer) in self.extraction_transcript()? {
            let (Some(l), Some((key, p))) = (leaf, answer) else {
                continue;
            };
            if (l as usize) >= tree.len() || tree.node(l).kind != NodeKind::ExtractMinLeaf {
                continue;
            }
            let parent = tree.node(l).parent.expect("leaves have parents");
            if p == tree.node(parent).height as Priority {
                out.entry(parent).or_default().insert(key);
            }
        }
        Ok(out)
    }

    /// `(Y_v, X_v, Y_v \ X_v)` from the first tree's key assignment: keys
    /// inserted at `c_1(v)`, keys deleted inside `c_2(v)..c_{1+β}(v)`, and
    /// the predicted priority-`h_v` extraction set.
    pub fn ground_truth(&self, v: NodeId) -> Result<NodeSets, DistError> {
        let tree = self.tree()?;
        ground_truth(&tree, &self.assignments[0], v)
    }

    /// Checks that just before each extract-min leaf of `v` no live key has
    /// priority below `h_v` (first tree of a basic workload).
    pub fn check_low_priority_invariant(&self) -> Result<(), String> {
        let tree = self.tree().map_err(|e| e.to_string())?;
        let mut o = OracleQueue::new();
        let mut prev_leaf = None;
        for (i, lo) in self.ops.iter().enumerate() {
            if lo.leaf != prev_leaf {
                if let Some(l) = lo.leaf.filter(|&l| (l as usize) < tree.len()) {
                    let n = tree.node(l);
                    if n.kind == NodeKind::ExtractMinLeaf {
                        if let Some((k, p)) = o.peek_min() {
                            if p < n.height as Priority {
                                return Err(format!("op {i}: key {k} has priority {p} < {}", n.height));
                            }
                        }
                    }
                }
                prev_leaf = lo.leaf;
            }
            match lo.op {
                Operation::Insert { key, priority } => o.insert(key, priority).map_err(|e| e.to_string())?,
                Operation::Delete { key } => o.delete_if_present(key).map_err(|e| e.to_string())?,
                Operation::DecreaseKey { key, priority } => o.decrease_key(key, priority).map_err(|e| e.to_string())?,
                Operation::ExtractMin => {
                    o.extract_min().ok();
                }
            }
        }
        Ok(())
    }
}

fn leaf_offset(tree: &Tree, t: u32) -> Result<u32, DistError> {
    (tree.len() as u64)
        .checked_mul(t as u64)
        .and_then(|x| u32::try_from(x).ok())
        .filter(|&x| x < PRELUDE_LEAF)
        .ok_or(DistError::UniverseOverflow)
}

/// `(Y_v, X_v, Y_v \ X_v)` computed directly from a key assignment.
pub fn ground_truth(tree: &Tree, keys: &KeyAssignment, v: NodeId) -> Result<NodeSets, DistError> {
    let node = tree.node(v);
    if !node.is_internal() {
        return Err(DistError::NotInternal(v));
    }
    let c1 = node.children[0];
    let middle = &node.children[1..node.children.len() - 1];
    let mut y = BTreeSet::new();
    let mut x = BTreeSet::new();
    let (mut ii, mut di) = (0usize, 0usize);
    for leaf in tree.leaves() {
        let n = leaf.base_ops as usize;
        match leaf.kind {
            NodeKind::InsertLeaf => {
                if leaf.id == c1 {
                    y.extend(&keys.insert_keys[ii..ii + n]);
                }
                ii += n;
            }
            NodeKind::DeleteLeaf => {
                if middle.iter().any(|&c| tree.contains(c, leaf.id)) {
                    x.extend(&keys.delete_keys[di..di + n]);
                }
                di += n;
            }
            _ => {}
        }
    }
    let diff = y.difference(&x).copied().collect();
    Ok((y, x, diff))
}

/// Rewrites sampled trees so that no Delete targets an absent key: all
/// universe keys are first inserted at priority infinity, every tree Insert
/// becomes Delete-then-Insert, every Delete becomes Delete-then-Insert at
/// infinity, and extract-min leaves also re-insert at infinity the keys
/// extracted with the leaf's own priority. Extract-min leaves are resolved
/// again against the new queue contents.
pub fn transform_no_spurious(workloads: &[Workload]) -> Result<Workload, DistError> {
    let first = workloads.first().ok_or(DistError::MixedParams)?;
    let params = first.params;
    let mut keys = Vec::new();
    for w in workloads {
        if w.params.beta != params.beta
            || w.params.h != params.h
            || w.params.m != params.m
            || w.params.universe != params.universe
        {
            return Err(DistError::MixedParams);
        }
        keys.extend(w.assignments.iter().cloned());
    }
    let tree = Tree::build(&params)?;
    let u = params.universe()?;
    let needed = params.n()?.saturating_mul(2);
    if u < needed {
        return Err(DistError::UniverseTooSmall { universe: u, needed });
    }
    if u > MAX_PREPOPULATED {
        return Err(DistError::UniverseTooLarge(u));
    }
    let mut oracle = OracleQueue::new();
    let mut ops = Vec::with_capacity(u as usize);
    for key in 0..u {
        oracle.insert(key, PRIORITY_INF)?;
        ops.push(LeafOp {
            leaf: Some(PRELUDE_LEAF),
            op: Operation::Insert {
                key,
                priority: PRIORITY_INF,
            },
        });
    }
    for (t, k) in keys.iter().enumerate() {
        emit_tree(&tree, k, &mut oracle, leaf_offset(&tree, t as u32)?, true, &mut ops)?;
    }
    let mut warnings = first.warnings.clone();
    warnings.push(format!("{} trees after universe pre-population", keys.len()));
    Ok(Workload {
        params,
        variant: Variant::NoSpurious(keys.len() as u32),
        ops,
        assignments: keys,
        warnings,
    })
}

/// Header of the binary workload format.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct WorkloadHeader {
    pub version: u16,
    pub beta: u32,
    pub h: u32,
    pub m: u64,
    pub variant: Variant,
    pub universe: u64,
    pub universe_overridden: bool,
    pub strict: bool,
    pub seed: u64,
    pub op_count: u64,
}

impl Workload {
    pub fn header(&self) -> Result<WorkloadHeader, DistError> {
        Ok(WorkloadHeader {
            version: FORMAT_VERSION,
            beta: self.params.beta,
            h: self.params.h,
            m: self.params.m,
            variant: self.variant,
            universe: self.params.universe()?,
            universe_overridden: self.params.universe.is_some(),
            strict: self.params.strict,
            seed: self.params.seed,
            op_count: self.ops.len() as u64,
        })
    }

    /// Binary format: `IOPQW1`, version u16, beta u32, h u32, M u64, variant
    /// u8, trees u32, flags u8 (bit 0 universe override, bit 1 strict),
    /// universe u64, seed u64, op count u64, then 21-byte records (op u8,
    /// key u64, priority i64, leaf u32), all little-endian. Op codes: 0
    /// Insert, 1 Delete, 2 ExtractMin, 3 DecreaseKey; leaf `u32::MAX - 1`
    /// means no leaf.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<(), DistError> {
        let h = self.header()?;
        w.write_all(MAGIC)?;
        w.write_all(&h.version.to_le_bytes())?;
        w.write_all(&h.beta.to_le_bytes())?;
        w.write_all(&h.h.to_le_bytes())?;
        w.write_all(&h.m.to_le_bytes())?;
        w.write_all(&[self.variant.code()])?;
        w.write_all(&self.variant.trees().to_le_bytes())?;
        w.write_all(&[h.universe_overridden as u8 | (h.strict as u8) << 1])?;
        w.write_all(&h.universe.to_le_bytes())?;
        w.write_all(&h.seed.to_le_bytes())?;
        w.write_all(&h.op_count.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.ops.len() * RECORD_BYTES);
        for lo in &self.ops {
            let (code, key, priority) = match lo.op {
                Operation::Insert { key, priority } => (0u8, key, priority),
                Operation::Delete { key } => (1, key, 0),
                Operation::ExtractMin => (2, 0, 0),
                Operation::DecreaseKey { key, priority } => (3, key, priority),
            };
            buf.push(code);
            buf.extend_from_slice(&key.to_le_bytes());
            buf.extend_from_slice(&priority.to_le_bytes());
            buf.extend_from_slice(&lo.leaf.unwrap_or(NO_LEAF).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Workload, DistError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(6)? != MAGIC {
            return Err(DistError::Format("bad magic".into()));
        }
        let version = u16::from_le_bytes(cur.array()?);
        if version != FORMAT_VERSION {
            return Err(DistError::Format(format!("unsupported version {version}")));
        }
        let beta = u32::from_le_bytes(cur.array()?);
        let h = u32::from_le_bytes(cur.array()?);
        let m = u64::from_le_bytes(cur.array()?);
        let vcode = cur.take(1)?[0];
        let trees = u32::from_le_bytes(cur.array()?);
        let flags = cur.take(1)?[0];
        let universe = u64::from_le_bytes(cur.array()?);
        let seed = u64::from_le_bytes(cur.array()?);
        let op_count = u64::from_le_bytes(cur.array()?) as usize;
        let variant = match vcode {
            0 => Variant::Basic,
            1 => Variant::MultiTree(trees),
            2 => Variant::NoSpurious(trees),
            c => return Err(DistError::Format(format!("unknown variant {c}"))),
        };
        if bytes.len() - cur.pos != op_count * RECORD_BYTES {
            return Err(DistError::Format(
                "record section length does not match op count".into(),
            ));
        }
        let mut ops = Vec::with_capacity(op_count);
        for _ in 0..op_count {
            let code = cur.take(1)?[0];
            let key = u64::from_le_bytes(cur.array()?);
            let priority = i64::from_le_bytes(cur.array()?);
            let leaf = u32::from_le_bytes(cur.array()?);
            let op = match code {
                0 => Operation::Insert { key, priority },
                1 => Operation::Delete { key },
                2 => Operation::ExtractMin,
                3 => Operation::DecreaseKey { key, priority },
                c => return Err(DistError::Format(format!("unknown op code {c}"))),
            };
            ops.push(LeafOp {
                leaf: (leaf != NO_LEAF).then_some(leaf),
                op,
            });
        }
        let params = TreeParams {
            beta,
            h,
            m,
            seed,
            strict: flags & 2 != 0,
            universe: (flags & 1 != 0).then_some(universe),
        };
        Self::from_parts(params, variant, ops)
    }

    /// JSON-lines: a header object, then one operation per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), DistError> {
        let to_io = |e: serde_json::Error| DistError::Format(e.to_string());
        writeln!(w, "{}", serde_json::to_string(&self.header()?).map_err(to_io)?)?;
        for lo in &self.ops {
            writeln!(w, "{}", serde_json::to_string(lo).map_err(to_io)?)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Workload, DistError> {
        let to_fmt = |e: serde_json::Error| DistError::Format(e.to_string());
        let mut lines = r.lines();
        let first = lines.next().ok_or_else(|| DistError::Format("empty file".into()))??;
        let h: WorkloadHeader = serde_json::from_str(&first).map_err(to_fmt)?;
        let mut ops = Vec::new();
        for line in lines {
            let line = line?;
            if !line.trim().is_empty() {
                ops.push(serde_json::from_str(&line).map_err(to_fmt)?);
            }
        }
        if ops.len() as u64 != h.op_count {
            return Err(DistError::Format("op count mismatch".into()));
        }
        let params = TreeParams {
            beta: h.beta,
            h: h.h,
            m: h.m,
            seed: h.seed,
            strict: h.strict,
            universe: h.universe_overridden.then_some(h.universe),
        };
        Self::from_parts(params, h.variant, ops)
    }

    fn from_parts(params: TreeParams, variant: Variant, ops: Vec<LeafOp>) -> Result<Workload, DistError> {
        let warnings = params.validate()?;
        let tree = Tree::build(&params)?;
        let assignments = (0..variant.trees())
            .map(|t| Ok(KeyAssignment::from_ops(&tree, &ops, leaf_offset(&tree, t)?)))
            .collect::<Result<Vec<_>, DistError>>()?;
        Ok(Workload {
            params,
            variant,
            ops,
            assignments,
            warnings,
        })
    }
}

const NO_LEAF: u32 = u32::MAX - 1;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DistError> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| DistError::Format("truncated file".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], DistError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}
