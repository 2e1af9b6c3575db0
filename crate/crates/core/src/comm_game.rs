//! Two-phase communication games: the set-intersection input distributions,
//! the embeddings between them, and a two-party simulation that turns a
//! deterministic external-memory priority queue into a set-intersection
//! protocol with exact bit accounting.
//!
//! All element coordinates are 0-based: block `i` of a blocked instance is
//! `[i·U/k, (i+1)·U/k)` and its bucket `j` is `[i·U/k + j·U/l, i·U/k + (j+1)·U/l)`.

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::hard_dist::{sample_ordered_subset, split_seed, DistError, NodeId, NodeKind, Tree, TreeParams};
use crate::io_model::{Block, BlockAddress, Word};
use crate::pq::{ExternalQueue, Key, LeafOp, Operation, PqError, Priority};

#[derive(Debug, Error)]
pub enum CommError {
    #[error("size violation: {0}")]
    Size(String),
    #[error("divisibility violation: {0}")]
    Divisibility(String),
    #[error("instance does not match the protocol shape: {0}")]
    Shape(String),
    #[error("replicas diverged: {0}")]
    Divergence(String),
    #[error("phase transition already happened")]
    SecondTransition,
    #[error("queue failure: {0}")]
    Queue(#[from] PqError),
    #[error(transparent)]
    Dist(#[from] DistError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Player {
    Alice,
    Bob,
}

impl Player {
    pub fn as_str(&self) -> &'static str {
        match self {
            Player::Alice => "alice",
            Player::Bob => "bob",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    One,
    Two,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageKind {
    RejectFlag,
    ResampledSet,
    AddressSet,
    MemorySnapshot,
    ContentRequest,
    BlockContent,
    Intersection,
    PhaseTransition,
}

impl MessageKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MessageKind::RejectFlag => "reject_flag",
            MessageKind::ResampledSet => "resampled_set",
            MessageKind::AddressSet => "address_set",
            MessageKind::MemorySnapshot => "memory_snapshot",
            MessageKind::ContentRequest => "content_request",
            MessageKind::BlockContent => "block_content",
            MessageKind::Intersection => "intersection",
            MessageKind::PhaseTransition => "phase_transition",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Message {
    pub sender: Player,
    pub phase: Phase,
    pub kind: MessageKind,
    pub bits: u64,
    /// FNV-1a digest of the payload words.
    pub digest: u64,
}

/// Bits sent by each player in each phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CostVector {
    pub a1: u64,
    pub b1: u64,
    pub a2: u64,
    pub b2: u64,
}

impl CostVector {
    pub fn total(&self) -> u64 {
        self.a1 + self.b1 + self.a2 + self.b2
    }

    fn add(&mut self, sender: Player, phase: Phase, bits: u64) {
        match (sender, phase) {
            (Player::Alice, Phase::One) => self.a1 += bits,
            (Player::Bob, Phase::One) => self.b1 += bits,
            (Player::Alice, Phase::Two) => self.a2 += bits,
            (Player::Bob, Phase::Two) => self.b2 += bits,
        }
    }
}

fn digest(words: &[u64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for w in words {
        for b in w.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Ordered message log with a single phase transition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transcript {
    messages: Vec<Message>,
    phase: Phase,
}

impl Default for Transcript {
    fn default() -> Self {
        Transcript {
            messages: Vec::new(),
            phase: Phase::One,
        }
    }
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    pub fn send(&mut self, sender: Player, kind: MessageKind, bits: u64, payload: &[u64]) {
        self.messages.push(Message {
            sender,
            phase: self.phase,
            kind,
            bits,
            digest: digest(payload),
        });
    }

    /// Emits the zero-bit phase-transition marker.
    pub fn transition(&mut self, sender: Player) -> Result<(), CommError> {
        if self.phase == Phase::Two {
            return Err(CommError::SecondTransition);
        }
        self.messages.push(Message {
            sender,
            phase: Phase::One,
            kind: MessageKind::PhaseTransition,
            bits: 0,
            digest: 0,
        });
        self.phase = Phase::Two;
        Ok(())
    }

    /// Costs recomputed from the message log.
    pub fn cost(&self) -> CostVector {
        let mut c = CostVector::default();
        for m in &self.messages {
            c.add(m.sender, m.phase, m.bits);
        }
        c
    }

    pub fn count(&self, sender: Player, kind: MessageKind) -> usize {
        self.messages
            .iter()
            .filter(|m| m.sender == sender && m.kind == kind)
            .count()
    }

    /// CSV with columns `index,sender,phase,kind,bits`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,sender,phase,kind,bits\n");
        for (i, m) in self.messages.iter().enumerate() {
            let phase = match m.phase {
                Phase::One => 1,
                Phase::Two => 2,
            };
            out.push_str(&format!(
                "{i},{},{phase},{},{}\n",
                m.sender.as_str(),
                m.kind.as_str(),
                m.bits
            ));
        }
        out
    }
}

/// `⌈log2 n⌉` for `n ≥ 1`.
pub fn ceil_log2(n: u64) -> u64 {
    if n <= 1 {
        0
    } else {
        64 - (n - 1).leading_zeros() as u64
    }
}

/// Fixed message prices of the simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BitPrices {
    pub word_bits: u64,
    pub block_words: u64,
    pub memory_words: u64,
    pub universe: u64,
    pub n: u64,
}

impl BitPrices {
    pub fn address(&self) -> u64 {
        self.word_bits
    }

    pub fn block(&self) -> u64 {
        self.block_words * self.word_bits
    }

    /// A memory image of `len` words; never less than the `M`-word memory.
    pub fn memory(&self, len: usize) -> u64 {
        self.memory_words.max(len as u64) * self.word_bits
    }

    pub fn flag(&self) -> u64 {
        1
    }

    pub fn key_set(&self, s: usize) -> u64 {
        s as u64 * ceil_log2(self.universe)
    }

    pub fn address_set(&self, s: usize) -> u64 {
        s as u64 * self.word_bits
    }

    pub fn intersection(&self, s: usize) -> u64 {
        ceil_log2(self.n + 1) + self.key_set(s)
    }
}

/// Alice holds `x` (size `k`), Bob holds `y` (size `l`), both in `[universe]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SetIntersectionInstance {
    pub universe: u64,
    pub k: usize,
    pub l: usize,
    pub x: BTreeSet<u64>,
    pub y: BTreeSet<u64>,
}

impl SetIntersectionInstance {
    pub fn intersection(&self) -> BTreeSet<u64> {
        self.x.intersection(&self.y).copied().collect()
    }
}

/// Uniform independent `k`- and `l`-subsets of `[universe]`.
pub fn sample_uint(universe: u64, k: usize, l: usize, seed: u64) -> Result<SetIntersectionInstance, CommError> {
    if k as u64 > universe || l as u64 > universe {
        return Err(CommError::Size(format!("k = {k}, l = {l} exceed U = {universe}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = sample_ordered_subset(universe, k, &mut rng)?.into_iter().collect();
    let y = sample_ordered_subset(universe, l, &mut rng)?.into_iter().collect();
    Ok(SetIntersectionInstance { universe, k, l, x, y })
}

/// An instance with one Alice element per block and one Bob element per bucket.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockedInstance {
    pub inner: SetIntersectionInstance,
}

impl BlockedInstance {
    pub fn block_size(&self) -> u64 {
        self.inner.universe / self.inner.k as u64
    }

    pub fn bucket_size(&self) -> u64 {
        self.inner.universe / self.inner.l as u64
    }

    pub fn block_of(&self, e: u64) -> usize {
        (e / self.block_size()) as usize
    }

    pub fn bucket_of(&self, e: u64) -> usize {
        (e / self.bucket_size()) as usize
    }

    /// True when every block holds exactly one element of `x` and every
    /// bucket exactly one element of `y`.
    pub fn is_well_formed(&self) -> bool {
        let mut blocks = vec![0usize; self.inner.k];
        let mut buckets = vec![0usize; self.inner.l];
        for &e in &self.inner.x {
            blocks[self.block_of(e)] += 1;
        }
        for &e in &self.inner.y {
            buckets[self.bucket_of(e)] += 1;
        }
        blocks.iter().all(|&c| c == 1) && buckets.iter().all(|&c| c == 1)
    }
}

fn check_dint_shape(universe: u64, k: usize, l: usize) -> Result<(), CommError> {
    if k == 0 || l == 0 || universe == 0 {
        return Err(CommError::Size("sizes must be positive".into()));
    }
    if !l.is_multiple_of(k) || !universe.is_multiple_of(l as u64) {
        return Err(CommError::Divisibility(format!(
            "need k | l and l | U (U = {universe}, k = {k}, l = {l})"
        )));
    }
    Ok(())
}

/// Blocked distribution: one uniform element of each block for Alice, one of
/// each bucket for Bob.
pub fn sample_dint(universe: u64, k: usize, l: usize, seed: u64) -> Result<BlockedInstance, CommError> {
    check_dint_shape(universe, k, l)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (bs, us) = (universe / k as u64, universe / l as u64);
    let x = (0..k as u64).map(|i| i * bs + rng.gen_range(0..bs)).collect();
    let y = (0..l as u64).map(|j| j * us + rng.gen_range(0..us)).collect();
    Ok(BlockedInstance {
        inner: SetIntersectionInstance { universe, k, l, x, y },
    })
}

/// Alice holds `(f, o)`, Bob holds `ys`; they decide whether `o = ys[f]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexEqInstance {
    pub v: u64,
    pub len: usize,
    pub f: usize,
    pub o: u64,
    pub ys: Vec<u64>,
}

impl IndexEqInstance {
    pub fn answer(&self) -> bool {
        self.ys[self.f] == self.o
    }
}

pub fn sample_die(v: u64, len: usize, seed: u64) -> Result<IndexEqInstance, CommError> {
    if v == 0 || len == 0 {
        return Err(CommError::Size("V and L must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = rng.gen_range(0..len);
    let o = rng.gen_range(0..v);
    let ys = (0..len).map(|_| rng.gen_range(0..v)).collect();
    Ok(IndexEqInstance { v, len, f, o, ys })
}

/// Two independent uniform values in `[w]`.
pub fn sample_eq(w: u64, seed: u64) -> Result<(u64, u64), CommError> {
    if w == 0 {
        return Err(CommError::Size("W must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((rng.gen_range(0..w), rng.gen_range(0..w)))
}

/// Result of planting an index-equality instance in one block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DieEmbedding {
    pub instance: BlockedInstance,
    /// The publicly chosen block.
    pub block: usize,
}

impl DieEmbedding {
    /// The index-equality answer read off the blocked instance.
    pub fn decide(&self) -> bool {
        let b = self.instance.block_size();
        let lo = self.block as u64 * b;
        self.instance.inner.intersection().range(lo..lo + b).next().is_some()
    }
}

/// Plants `ie` in a public uniformly random block of a blocked instance with
/// `U = V·L·k`, `l = L·k`: Alice's element is `O + F·U/l + I·U/k` and Bob's
/// `f`-th is `Y_f + f·U/l + I·U/k`. All other blocks are sampled privately.
pub fn embed_die_in_dint(
    ie: &IndexEqInstance,
    k: usize,
    public_seed: u64,
    private_seed: u64,
) -> Result<DieEmbedding, CommError> {
    if k == 0 {
        return Err(CommError::Size("k must be positive".into()));
    }
    let bucket = ie.v;
    let block = ie.v * ie.len as u64;
    let universe = block * k as u64;
    let l = ie.len * k;
    let mut public = ChaCha8Rng::seed_from_u64(public_seed);
    let mut alice = ChaCha8Rng::seed_from_u64(split_seed(private_seed, 0));
    let mut bob = ChaCha8Rng::seed_from_u64(split_seed(private_seed, 1));
    let chosen = public.gen_range(0..k);
    let mut x = BTreeSet::new();
    let mut y = BTreeSet::new();
    for i in 0..k {
        let base = i as u64 * block;
        if i == chosen {
            x.insert(ie.o + ie.f as u64 * bucket + base);
            for (f, yf) in ie.ys.iter().enumerate() {
                y.insert(yf + f as u64 * bucket + base);
            }
        } else {
            x.insert(base + alice.gen_range(0..block));
            for f in 0..ie.len as u64 {
                y.insert(base + f * bucket + bob.gen_range(0..bucket));
            }
        }
    }
    Ok(DieEmbedding {
        instance: BlockedInstance {
            inner: SetIntersectionInstance { universe, k, l, x, y },
        },
        block: chosen,
    })
}

/// Public first-step layout of the uniform-to-blocked embedding: bucket
/// occupancy of Bob's set, the singleton buckets grouped into virtual blocks,
/// and the block occupancy of Alice's set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OccupancyLayout {
    pub bucket_counts: Vec<u32>,
    /// Virtual blocks, each a list of `l/k` singleton bucket indices.
    pub blocks: Vec<Vec<usize>>,
    /// Alice's elements per virtual block.
    pub block_counts: Vec<u32>,
    /// Alice's elements outside every virtual block.
    pub outside_count: u32,
    /// Indices into `blocks` holding exactly one of Alice's elements.
    pub good: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EmbedOutcome {
    /// The public sampling failed; the caller repeats with fresh coins.
    Fail {
        singletons: usize,
        good_blocks: usize,
    },
    Embedded(UintEmbedding),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UintEmbedding {
    pub instance: SetIntersectionInstance,
    pub layout: OccupancyLayout,
    /// For blocked block `i`, the virtual block it was planted in.
    pub planted: Vec<usize>,
    bucket_size: u64,
    per_block: usize,
}

impl UintEmbedding {
    /// Maps a blocked-instance element to its position in the uniform instance.
    pub fn map(&self, e: u64) -> u64 {
        let block_size = self.bucket_size * self.per_block as u64;
        let i = (e / block_size) as usize;
        let j = ((e % block_size) / self.bucket_size) as usize;
        let bucket = self.layout.blocks[self.planted[i]][j];
        bucket as u64 * self.bucket_size + e % self.bucket_size
    }

    /// The uniform instance's intersection restricted to the planted blocks,
    /// in blocked-instance coordinates.
    pub fn planted_intersection(&self) -> BTreeSet<u64> {
        let mut back = HashMap::new();
        for (i, &vb) in self.planted.iter().enumerate() {
            for (j, &bucket) in self.layout.blocks[vb].iter().enumerate() {
                back.insert(bucket, (i, j));
            }
        }
        let block_size = self.bucket_size * self.per_block as u64;
        self.instance
            .intersection()
            .into_iter()
            .filter_map(|e| {
                let &(i, j) = back.get(&((e / self.bucket_size) as usize))?;
                Some(i as u64 * block_size + j as u64 * self.bucket_size + e % self.bucket_size)
            })
            .collect()
    }
}

/// The public step of the embedding for a uniform `(U, k, l)` instance:
/// fails unless enough singleton buckets and at least `need` good blocks
/// appear.
pub fn public_occupancy(
    universe: u64,
    k: usize,
    l: usize,
    need: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Result<OccupancyLayout, (usize, usize)>, CommError> {
    check_dint_shape(universe, k, l)?;
    let bucket_size = universe / l as u64;
    let per_block = l / k;
    let nblocks = k / 3;
    let mut bucket_counts = vec![0u32; l];
    for e in sample_ordered_subset(universe, l, rng)? {
        bucket_counts[(e / bucket_size) as usize] += 1;
    }
    let singles: Vec<usize> = (0..l).filter(|&b| bucket_counts[b] == 1).collect();
    if singles.len() < nblocks * per_block || nblocks < need {
        return Ok(Err((singles.len(), 0)));
    }
    let blocks: Vec<Vec<usize>> = singles[..nblocks * per_block]
        .chunks(per_block)
        .map(<[usize]>::to_vec)
        .collect();
    let mut owner = HashMap::new();
    for (i, b) in blocks.iter().enumerate() {
        for &bucket in b {
            owner.insert(bucket, i);
        }
    }
    let mut block_counts = vec![0u32; nblocks];
    let mut outside_count = 0;
    for e in sample_ordered_subset(universe, k, rng)? {
        match owner.get(&((e / bucket_size) as usize)) {
            Some(&i) => block_counts[i] += 1,
            None => outside_count += 1,
        }
    }
    let good: Vec<usize> = (0..nblocks).filter(|&i| block_counts[i] == 1).collect();
    if good.len() < need {
        return Ok(Err((singles.len(), good.len())));
    }
    Ok(Ok(OccupancyLayout {
        bucket_counts,
        blocks,
        block_counts,
        outside_count,
        good,
    }))
}

fn sample_in_region(rng: &mut ChaCha8Rng, count: u32, size: u64, at: impl Fn(u64) -> u64, out: &mut BTreeSet<u64>) {
    let mut seen = HashSet::new();
    while seen.len() < count as usize {
        let i = rng.gen_range(0..size);
        if seen.insert(i) {
            out.insert(at(i));
        }
    }
}

/// Plants a blocked instance in the good blocks of a uniform `(U, k, l)`
/// instance. The blocked instance must use the same block and bucket sizes
/// (`U/k` and `U/l`); with `k` blocks grouped into `⌊k/3⌋` virtual blocks,
/// it may have at most that many blocks (the analysis uses `k/9`).
pub fn embed_dint_in_uint(
    dint: &BlockedInstance,
    universe: u64,
    k: usize,
    l: usize,
    public_seed: u64,
    private_seed: u64,
) -> Result<EmbedOutcome, CommError> {
    check_dint_shape(universe, k, l)?;
    let bucket_size = universe / l as u64;
    let per_block = l / k;
    if dint.bucket_size() != bucket_size || dint.block_size() != universe / k as u64 {
        return Err(CommError::Shape(
            "blocked instance must share block and bucket sizes".into(),
        ));
    }
    let need = dint.inner.k;
    let mut public = ChaCha8Rng::seed_from_u64(public_seed);
    let layout = match public_occupancy(universe, k, l, need, &mut public)? {
        Ok(layout) => layout,
        Err((singletons, good_blocks)) => {
            return Ok(EmbedOutcome::Fail {
                singletons,
                good_blocks,
            })
        }
    };
    let planted: Vec<usize> = layout.good[..need].to_vec();
    let mut emb = UintEmbedding {
        instance: SetIntersectionInstance {
            universe,
            k,
            l,
            x: BTreeSet::new(),
            y: BTreeSet::new(),
        },
        layout,
        planted,
        bucket_size,
        per_block,
    };
    let mut alice = ChaCha8Rng::seed_from_u64(split_seed(private_seed, 0));
    let mut bob = ChaCha8Rng::seed_from_u64(split_seed(private_seed, 1));
    let planted_set: HashSet<usize> = emb.planted.iter().copied().collect();
    let mut planted_buckets = HashSet::new();
    for &vb in &emb.planted {
        planted_buckets.extend(emb.layout.blocks[vb].iter().copied());
    }
    let mut x: BTreeSet<u64> = dint.inner.x.iter().map(|&e| emb.map(e)).collect();
    let mut y: BTreeSet<u64> = dint.inner.y.iter().map(|&e| emb.map(e)).collect();
    for (b, &c) in emb.layout.bucket_counts.iter().enumerate() {
        if !planted_buckets.contains(&b) {
            let base = b as u64 * bucket_size;
            sample_in_region(&mut bob, c, bucket_size, |i| base + i, &mut y);
        }
    }
    let mut grouped = HashSet::new();
    for (i, block) in emb.layout.blocks.iter().enumerate() {
        grouped.extend(block.iter().copied());
        if planted_set.contains(&i) {
            continue;
        }
        let block = block.clone();
        sample_in_region(
            &mut alice,
            emb.layout.block_counts[i],
            bucket_size * per_block as u64,
            |t| block[(t / bucket_size) as usize] as u64 * bucket_size + t % bucket_size,
            &mut x,
        );
    }
    let before = x.len();
    while x.len() < before + emb.layout.outside_count as usize {
        let e = alice.gen_range(0..universe);
        if !grouped.contains(&((e / bucket_size) as usize)) {
            x.insert(e);
        }
    }
    emb.instance.x = x;
    emb.instance.y = y;
    Ok(EmbedOutcome::Embedded(emb))
}

/// Monte Carlo failure rate of the public step at `(U, k, l)` when
/// `⌈k/9⌉` good blocks are required.
pub fn embedding_failure_rate(universe: u64, k: usize, l: usize, trials: usize, seed: u64) -> Result<f64, CommError> {
    let need = k.div_ceil(9);
    let mut fails = 0;
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, t as u64));
        if public_occupancy(universe, k, l, need, &mut rng)?.is_err() {
            fails += 1;
        }
    }
    Ok(fails as f64 / trials.max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SingletonBuckets {
    pub mean_singleton_fraction: f64,
    pub p_at_least_third: f64,
    /// Sample variance of the singleton count divided by `l²`.
    pub variance_over_l2: f64,
    pub trials: usize,
}

/// Samples a uniform `l`-subset of `[U]` per trial and counts the buckets
/// of size `U/l` holding exactly one element.
pub fn singleton_buckets(universe: u64, l: usize, trials: usize, seed: u64) -> Result<SingletonBuckets, CommError> {
    if l < 3 || trials == 0 {
        return Err(CommError::Size("need l >= 3 and at least one trial".into()));
    }
    if !universe.is_multiple_of(l as u64) {
        return Err(CommError::Divisibility(format!("l = {l} must divide U = {universe}")));
    }
    let bucket_size = universe / l as u64;
    let mut counts = Vec::with_capacity(trials);
    let mut at_least = 0;
    let mut occ = vec![0u32; l];
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, t as u64));
        occ.iter_mut().for_each(|c| *c = 0);
        for e in sample_ordered_subset(universe, l, &mut rng)? {
            occ[(e / bucket_size) as usize] += 1;
        }
        let singles = occ.iter().filter(|&&c| c == 1).count();
        if 3 * singles >= l {
            at_least += 1;
        }
        counts.push(singles as f64);
    }
    let n = trials as f64;
    let mean = counts.iter().sum::<f64>() / n;
    let var = if trials > 1 {
        counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(SingletonBuckets {
        mean_singleton_fraction: mean / l as f64,
        p_at_least_third: at_least as f64 / n,
        variance_over_l2: var / (l as f64 * l as f64),
        trials,
    })
}

/// Builds a fresh replica of the queue under test.
pub type QueueFactory<'a> = &'a dyn Fn() -> Result<Box<dyn ExternalQueue>, PqError>;

/// Everything a protocol run produced.
#[derive(Debug, Clone)]
pub struct ProtocolRun {
    pub alice_output: BTreeSet<Key>,
    pub bob_output: BTreeSet<Key>,
    pub truth: BTreeSet<Key>,
    pub cost: CostVector,
    pub transcript: Transcript,
    pub alice_requests: u64,
    pub bob_requests: u64,
    pub a_size: usize,
    pub z_size: usize,
    /// The operations executed, in order, as one workload.
    pub ops: Vec<LeafOp>,
    pub node: NodeId,
    pub k: usize,
    pub h_v: u32,
    pub seed: u64,
}

impl ProtocolRun {
    pub fn correct(&self) -> bool {
        self.alice_output == self.truth && self.bob_output == self.truth
    }

    pub const CSV_HEADER: &'static str = "seed,beta,h,h_v,k_child,a1,b1,a2,b2,intersection,correct,version";

    pub fn csv_row(&self, params: &TreeParams) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.seed,
            params.beta,
            params.h,
            self.h_v,
            self.k,
            self.cost.a1,
            self.cost.b1,
            self.cost.a2,
            self.cost.b2,
            self.truth.len(),
            self.correct(),
            crate::VERSION
        )
    }
}

/// `|X|` and `|Y|` required for node `v`: `M·h·β^{h_v−1}` and `M·β^{h_v}`.
pub fn protocol_shape(params: &TreeParams, tree: &Tree, v: NodeId) -> Result<(usize, usize), CommError> {
    let node = tree.node(v);
    if !node.is_internal() {
        return Err(CommError::Shape(format!("node {v} is not internal")));
    }
    let x = params.m * params.h as u64 * params.beta_pow(node.height - 1)?;
    let y = params.m * params.beta_pow(node.height)?;
    Ok((x as usize, y as usize))
}

struct Replica {
    queue: Box<dyn ExternalQueue>,
}

/// Keys per insert- or delete-leaf, in operation order.
type LeafKeys = HashMap<NodeId, Vec<Key>>;

impl Replica {
    fn log_len(&self) -> usize {
        self.queue.device().map_or(0, |d| d.probe_log().len())
    }

    fn probed_since(&self, from: usize) -> Vec<BlockAddress> {
        let mut seen = BTreeSet::new();
        if let Some(d) = self.queue.device() {
            for p in &d.probe_log()[from..] {
                seen.insert(p.addr);
            }
        }
        seen.into_iter().collect()
    }

    fn contents(&self, addrs: &[BlockAddress]) -> HashMap<u64, Block> {
        let d = self.queue.device().expect("external queues own a device");
        addrs.iter().map(|&a| (a.0, d.peek_block(a))).collect()
    }

    /// Runs the given leaves; returns the answers of each extract-min leaf.
    fn run_leaves(
        &mut self,
        tree: &Tree,
        leaves: &[NodeId],
        keys: &LeafKeys,
        op_index: &mut u64,
        ops: &mut Vec<LeafOp>,
    ) -> Result<HashMap<NodeId, Vec<(Key, Priority)>>, CommError> {
        let mut answers = HashMap::new();
        for &leaf in leaves {
            let node = tree.node(leaf);
            let hv = node.height as Priority;
            let mut step =
                |q: &mut Box<dyn ExternalQueue>, op: Operation| -> Result<Option<(Key, Priority)>, CommError> {
                    if let Some(d) = q.device_mut() {
                        d.set_context(*op_index, Some(leaf));
                    }
                    *op_index += 1;
                    ops.push(LeafOp { leaf: Some(leaf), op });
                    Ok(match op {
                        Operation::Insert { key, priority } => {
                            q.insert(key, priority)?;
                            None
                        }
                        Operation::Delete { key } => {
                            q.delete_if_present(key)?;
                            None
                        }
                        Operation::ExtractMin => match q.extract_min() {
                            Ok(x) => Some(x),
                            Err(PqError::Empty) => None,
                            Err(e) => return Err(e.into()),
                        },
                        Operation::DecreaseKey { .. } => unreachable!("the tree has no DecreaseKey"),
                    })
                };
            match node.kind {
                NodeKind::InsertLeaf => {
                    for &key in &keys[&leaf] {
                        step(&mut self.queue, Operation::Insert { key, priority: hv })?;
                    }
                }
                NodeKind::DeleteLeaf => {
                    for &key in &keys[&leaf] {
                        step(&mut self.queue, Operation::Delete { key })?;
                    }
                }
                NodeKind::ExtractMinLeaf => {
                    let mut got = Vec::new();
                    for _ in 0..node.base_ops {
                        got.extend(step(&mut self.queue, Operation::ExtractMin)?);
                    }
                    for &(key, priority) in got.iter().filter(|&&(_, p)| p != hv) {
                        step(&mut self.queue, Operation::Insert { key, priority })?;
                    }
                    answers.insert(leaf, got);
                }
                NodeKind::Internal => unreachable!("leaves only"),
            }
        }
        if let Some(d) = self.queue.device_mut() {
            d.clear_context();
        }
        Ok(answers)
    }
}

fn leaves_in(tree: &Tree, lo: NodeId, hi: NodeId) -> Vec<NodeId> {
    tree.leaves().map(|n| n.id).filter(|&id| id >= lo && id < hi).collect()
}

fn resample_disjoint(
    universe: u64,
    s: usize,
    avoid: &BTreeSet<u64>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<u64>, CommError> {
    if universe - (avoid.len() as u64) < s as u64 {
        return Err(CommError::Size(format!(
            "cannot draw {s} keys disjoint from {} in [{universe}]",
            avoid.len()
        )));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(s);
    while out.len() < s {
        let e = rng.gen_range(0..universe);
        if !avoid.contains(&e) && seen.insert(e) {
            out.push(e);
        }
    }
    Ok(out)
}

/// Simulates the reduction from set intersection to the queue built by
/// `factory`, embedding Alice's set in the delete-leaves under child `k` of
/// `v` and Bob's set in `v`'s insert-leaf. Public coins come from
/// `split_seed(seed, 0)`, Alice's private coins from `split_seed(seed, 1)`
/// and Bob's from `split_seed(seed, 2)`.
///
/// The address sets sent between players are the addresses *probed* in the
/// sender's part of the run, so every first touch of a cell the other
/// player has touched costs one content request.
pub fn run_embedding_protocol(
    factory: QueueFactory,
    params: &TreeParams,
    v: NodeId,
    k: usize,
    instance: &SetIntersectionInstance,
    seed: u64,
) -> Result<ProtocolRun, CommError> {
    let tree = Tree::build(params)?;
    let universe = params.universe()?;
    let n = params.n()?;
    let (xs, ys) = protocol_shape(params, &tree, v)?;
    let node = tree.node(v).clone();
    let beta = params.beta as usize;
    if !(2..=beta + 1).contains(&k) {
        return Err(CommError::Shape(format!("child index {k} outside 2..={}", beta + 1)));
    }
    if instance.universe != universe || instance.x.len() != xs || instance.y.len() != ys {
        return Err(CommError::Shape(format!(
            "need |X| = {xs}, |Y| = {ys} over [{universe}], got {}, {} over [{}]",
            instance.x.len(),
            instance.y.len(),
            instance.universe
        )));
    }
    if instance.x.iter().chain(&instance.y).any(|&e| e >= universe) {
        return Err(CommError::Shape("element outside the universe".into()));
    }
    let c1 = tree.child(v, 1);
    let ck = tree.child(v, k);
    let last = tree.child(v, beta + 2);
    let in_ck = |id: NodeId| tree.contains(ck, id);

    let mut public = ChaCha8Rng::seed_from_u64(split_seed(seed, 0));
    let mut alice_rng = ChaCha8Rng::seed_from_u64(split_seed(seed, 1));
    let mut bob_rng = ChaCha8Rng::seed_from_u64(split_seed(seed, 2));

    let populated = leaves_in(&tree, 0, node.end);
    let public_deletes: Vec<NodeId> = populated
        .iter()
        .copied()
        .filter(|&l| tree.node(l).kind == NodeKind::DeleteLeaf && !in_ck(l))
        .collect();
    let public_inserts: Vec<NodeId> = populated
        .iter()
        .copied()
        .filter(|&l| tree.node(l).kind == NodeKind::InsertLeaf && l != c1)
        .collect();
    let del_count: usize = public_deletes.iter().map(|&l| tree.node(l).base_ops as usize).sum();
    let ins_count: usize = public_inserts.iter().map(|&l| tree.node(l).base_ops as usize).sum();

    let dev_cfg = {
        let q = factory()?;
        *q.device()
            .ok_or_else(|| CommError::Shape("queue has no device".into()))?
            .config()
    };
    let prices = BitPrices {
        word_bits: dev_cfg.word_bits as u64,
        block_words: dev_cfg.block_words as u64,
        memory_words: dev_cfg.memory_words as u64,
        universe,
        n,
    };
    let mut transcript = Transcript::new();
    let mut cost = CostVector::default();
    let mut send = |t: &mut Transcript, who: Player, kind: MessageKind, bits: u64, payload: &[u64]| {
        t.send(who, kind, bits, payload);
        cost.add(who, t.phase(), bits);
    };

    // Rejection sampling of the public delete keys against X.
    let mut del_keys = sample_ordered_subset(universe, del_count, &mut public)?;
    if del_keys.iter().any(|e| instance.x.contains(e)) {
        send(
            &mut transcript,
            Player::Alice,
            MessageKind::RejectFlag,
            prices.flag(),
            &[0],
        );
        del_keys = resample_disjoint(universe, del_count, &instance.x, &mut alice_rng)?;
        send(
            &mut transcript,
            Player::Alice,
            MessageKind::ResampledSet,
            prices.key_set(del_count),
            &del_keys,
        );
    } else {
        send(
            &mut transcript,
            Player::Alice,
            MessageKind::RejectFlag,
            prices.flag(),
            &[1],
        );
    }
    let mut ins_keys = sample_ordered_subset(universe, ins_count, &mut public)?;
    if ins_keys.iter().any(|e| instance.y.contains(e)) {
        send(
            &mut transcript,
            Player::Bob,
            MessageKind::RejectFlag,
            prices.flag(),
            &[0],
        );
        ins_keys = resample_disjoint(universe, ins_count, &instance.y, &mut bob_rng)?;
        send(
            &mut transcript,
            Player::Bob,
            MessageKind::ResampledSet,
            prices.key_set(ins_count),
            &ins_keys,
        );
    } else {
        send(
            &mut transcript,
            Player::Bob,
            MessageKind::RejectFlag,
            prices.flag(),
            &[1],
        );
    }
    del_keys.shuffle(&mut public);
    ins_keys.shuffle(&mut public);
    let mut x_order: Vec<Key> = instance.x.iter().copied().collect();
    x_order.shuffle(&mut alice_rng);
    let mut y_order: Vec<Key> = instance.y.iter().copied().collect();
    y_order.shuffle(&mut bob_rng);

    let mut keys: LeafKeys = HashMap::new();
    let (mut di, mut ii, mut xi) = (0usize, 0usize, 0usize);
    for &l in &populated {
        let cnt = tree.node(l).base_ops as usize;
        match tree.node(l).kind {
            NodeKind::InsertLeaf if l == c1 => {
                keys.insert(l, y_order.clone());
            }
            NodeKind::InsertLeaf => {
                keys.insert(l, ins_keys[ii..ii + cnt].to_vec());
                ii += cnt;
            }
            NodeKind::DeleteLeaf if in_ck(l) => {
                keys.insert(l, x_order[xi..xi + cnt].to_vec());
                xi += cnt;
            }
            NodeKind::DeleteLeaf => {
                keys.insert(l, del_keys[di..di + cnt].to_vec());
                di += cnt;
            }
            _ => {}
        }
    }
    // Alice's view: her own leaves plus all public ones; Bob's likewise.
    let alice_keys: LeafKeys = keys
        .iter()
        .filter(|(&l, _)| l != c1)
        .map(|(&l, k)| (l, k.clone()))
        .collect();
    let bob_keys: LeafKeys = keys
        .iter()
        .filter(|(&l, _)| !in_ck(l))
        .map(|(&l, k)| (l, k.clone()))
        .collect();

    let new_player = || -> Result<Replica, CommError> {
        let mut queue = factory()?;
        queue.set_contract_checks(false);
        Ok(Replica { queue })
    };
    let mut alice = new_player()?;
    let mut bob = new_player()?;

    // Shared prefix: every leaf before v, run by both replicas.
    let prefix = leaves_in(&tree, 0, v);
    let mut ops = Vec::new();
    let mut op_index = 0u64;
    alice.run_leaves(&tree, &prefix, &alice_keys, &mut op_index, &mut ops)?;
    let mut bob_ops = Vec::new();
    let mut bob_index = 0u64;
    bob.run_leaves(&tree, &prefix, &bob_keys, &mut bob_index, &mut bob_ops)?;
    if bob_ops != ops {
        return Err(CommError::Divergence("prefix operations differ".into()));
    }
    {
        let (da, db) = (alice.queue.device().unwrap(), bob.queue.device().unwrap());
        let same_log = da
            .probe_log()
            .iter()
            .zip(db.probe_log())
            .all(|(a, b)| a.addr == b.addr && a.access == b.access);
        if da.probe_log().len() != db.probe_log().len()
            || !same_log
            || !da.same_contents(db)
            || alice.queue.memory_image() != bob.queue.memory_image()
        {
            return Err(CommError::Divergence("replica states differ after the prefix".into()));
        }
    }

    // Phase one: Bob runs c_1..c_{k-1}.
    let bob_from = bob.log_len();
    let bob_part: Vec<NodeId> = (1..k)
        .flat_map(|j| leaves_in(&tree, tree.child(v, j), tree.node(tree.child(v, j)).end))
        .collect();
    bob.run_leaves(&tree, &bob_part, &bob_keys, &mut op_index, &mut ops)?;
    let a_set = bob.probed_since(bob_from);
    let a_words: Vec<u64> = a_set.iter().map(|a| a.0).collect();
    send(
        &mut transcript,
        Player::Bob,
        MessageKind::AddressSet,
        prices.address_set(a_set.len()),
        &a_words,
    );
    let image = bob.queue.memory_image();
    send(
        &mut transcript,
        Player::Bob,
        MessageKind::MemorySnapshot,
        prices.memory(image.len()),
        &image,
    );
    alice.queue.restore_memory(&image)?;
    let bob_blocks = bob.contents(&a_set);
    alice
        .queue
        .device_mut()
        .expect("external queues own a device")
        .attach_remote(a_set.iter().copied(), bob_blocks.clone());

    // Alice runs c_k's subtree, fetching Bob's cells on first touch.
    let alice_from = alice.log_len();
    let alice_part = leaves_in(&tree, ck, tree.node(ck).end);
    alice.run_leaves(&tree, &alice_part, &alice_keys, &mut op_index, &mut ops)?;
    let alice_reqs = alice.queue.device_mut().unwrap().detach_remote();
    for a in &alice_reqs {
        send(
            &mut transcript,
            Player::Alice,
            MessageKind::ContentRequest,
            prices.address(),
            &[a.0],
        );
        let words: Vec<Word> = bob_blocks[&a.0].words().to_vec();
        send(
            &mut transcript,
            Player::Bob,
            MessageKind::BlockContent,
            prices.block(),
            &words,
        );
    }
    transcript.transition(Player::Alice)?;

    // Phase two: Alice hands over, Bob finishes v's subtree.
    let z_set = alice.probed_since(alice_from);
    let z_words: Vec<u64> = z_set.iter().map(|a| a.0).collect();
    send(
        &mut transcript,
        Player::Alice,
        MessageKind::AddressSet,
        prices.address_set(z_set.len()),
        &z_words,
    );
    let image = alice.queue.memory_image();
    send(
        &mut transcript,
        Player::Alice,
        MessageKind::MemorySnapshot,
        prices.memory(image.len()),
        &image,
    );
    bob.queue.restore_memory(&image)?;
    let alice_blocks = alice.contents(&z_set);
    bob.queue
        .device_mut()
        .expect("external queues own a device")
        .attach_remote(z_set.iter().copied(), alice_blocks.clone());
    let rest: Vec<NodeId> = (k + 1..=beta + 2)
        .flat_map(|j| leaves_in(&tree, tree.child(v, j), tree.node(tree.child(v, j)).end))
        .collect();
    let answers = bob.run_leaves(&tree, &rest, &bob_keys, &mut op_index, &mut ops)?;
    let bob_reqs = bob.queue.device_mut().unwrap().detach_remote();
    for a in &bob_reqs {
        send(
            &mut transcript,
            Player::Bob,
            MessageKind::ContentRequest,
            prices.address(),
            &[a.0],
        );
        let words: Vec<Word> = alice_blocks[&a.0].words().to_vec();
        send(
            &mut transcript,
            Player::Alice,
            MessageKind::BlockContent,
            prices.block(),
            &words,
        );
    }

    // Bob's deduction: Y minus keys deleted in the other middle children
    // minus keys extracted with priority h_v at the last child.
    let hv = node.height as Priority;
    let mut bob_output: BTreeSet<Key> = instance.y.clone();
    for j in (2..=beta + 1).filter(|&j| j != k) {
        let c = tree.child(v, j);
        for l in leaves_in(&tree, c, tree.node(c).end) {
            if tree.node(l).kind == NodeKind::DeleteLeaf {
                for key in &keys[&l] {
                    bob_output.remove(key);
                }
            }
        }
    }
    for &(key, p) in answers.get(&last).map(Vec::as_slice).unwrap_or(&[]) {
        if p == hv {
            bob_output.remove(&key);
        }
    }
    let out_words: Vec<u64> = bob_output.iter().copied().collect();
    send(
        &mut transcript,
        Player::Bob,
        MessageKind::Intersection,
        prices.intersection(bob_output.len()),
        &out_words,
    );
    let alice_output = bob_output.clone();

    Ok(ProtocolRun {
        alice_output,
        bob_output,
        truth: instance.intersection(),
        cost,
        transcript,
        alice_requests: alice_reqs.len() as u64,
        bob_requests: bob_reqs.len() as u64,
        a_size: a_set.len(),
        z_size: z_set.len(),
        ops,
        node: v,
        k,
        h_v: node.height,
        seed,
    })
}

/// `|R(v,k)|` and `|L(v,k)|` of a protocol run, recomputed by replaying its
/// operations on one fresh queue and attributing the probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReferenceCounts {
    pub r_vk: u64,
    pub l_vk: u64,
    pub probes: u64,
}

pub fn reference_counts(
    factory: QueueFactory,
    params: &TreeParams,
    run: &ProtocolRun,
) -> Result<ReferenceCounts, CommError> {
    let tree = Tree::build(params)?;
    let mut q = factory()?;
    q.set_contract_checks(false);
    crate::pq::run_workload(&mut *q, &run.ops, run.seed)
        .map_err(|e| CommError::Divergence(format!("reference run: {e}")))?;
    let log = q.device().map(|d| d.probe_log()).unwrap_or(&[]);
    let attribution = crate::probe_stats::attribute(log, &tree)
        .map_err(|e| CommError::Divergence(format!("reference attribution: {e}")))?;
    let stats = crate::probe_stats::node_stats(&attribution, &tree);
    let s = &stats[run.node as usize];
    Ok(ReferenceCounts {
        r_vk: s.r_counts[run.k - 1],
        l_vk: s.l_counts[run.k - 1],
        probes: log.len() as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uint_forced_full_sets() {
        let s = sample_uint(4, 4, 4, 1).unwrap();
        assert_eq!(s.x, (0..4).collect());
        assert_eq!(s.y, (0..4).collect());
        assert!(sample_uint(3, 4, 1, 0).is_err());
    }

    #[test]
    fn uint_expected_intersection() {
        let trials = 10_000;
        let total: usize = (0..trials)
            .map(|t| sample_uint(1_000_000, 100, 1000, t).unwrap().intersection().len())
            .sum();
        let mean = total as f64 / trials as f64;
        assert!((mean - 0.1).abs() <= 0.02, "mean {mean}");
    }

    #[test]
    fn uint_marginal_inclusion() {
        // Chi-square over the 20 elements of [20] with k = 5: each appears
        // with probability 1/4.
        let trials = 4000;
        let mut hits = [0f64; 20];
        for t in 0..trials {
            for e in sample_uint(20, 5, 5, t).unwrap().x {
                hits[e as usize] += 1.0;
            }
        }
        let expect = trials as f64 * 5.0 / 20.0;
        let chi: f64 = hits.iter().map(|h| (h - expect).powi(2) / expect).sum();
        // 19 degrees of freedom, 0.999 quantile is about 43.8.
        assert!(chi < 43.8, "chi-square {chi}");
    }

    #[test]
    fn dint_structure() {
        let d = sample_dint(8, 2, 4, 3).unwrap();
        assert_eq!(d.block_size(), 4);
        assert_eq!(d.bucket_size(), 2);
        assert!(d.is_well_formed());
        assert!(matches!(sample_dint(8, 3, 4, 0), Err(CommError::Divisibility(_))));
    }

    #[test]
    fn die_singleton_range() {
        for s in 0..20 {
            assert!(sample_die(1, 4, s).unwrap().answer());
        }
    }

    #[test]
    fn eq_half_equal() {
        let eq = (0..10_000).filter(|&s| {
            let (a, b) = sample_eq(2, s).unwrap();
            a == b
        });
        let p = eq.count() as f64 / 10_000.0;
        assert!((p - 0.5).abs() <= 0.02, "p = {p}");
    }

    #[test]
    fn die_embedding_formula() {
        let ie = IndexEqInstance {
            v: 2,
            len: 2,
            f: 1,
            o: 1,
            ys: vec![0, 1],
        };
        let e = embed_die_in_dint(&ie, 2, 5, 6).unwrap();
        let (u, l, k) = (8u64, 4u64, 2u64);
        let i = e.block as u64;
        assert!(e.instance.inner.x.contains(&(ie.o + ie.f as u64 * u / l + i * u / k)));
        for (f, yf) in ie.ys.iter().enumerate() {
            assert!(e.instance.inner.y.contains(&(yf + f as u64 * u / l + i * u / k)));
        }
        assert!(e.instance.is_well_formed());
    }

    #[test]
    fn die_embedding_exhaustive() {
        for f in 0..2 {
            for o in 0..2 {
                for y0 in 0..2 {
                    for y1 in 0..2 {
                        let ie = IndexEqInstance {
                            v: 2,
                            len: 2,
                            f,
                            o,
                            ys: vec![y0, y1],
                        };
                        for s in 0..8 {
                            let e = embed_die_in_dint(&ie, 2, s, s + 100).unwrap();
                            assert_eq!(e.decide(), ie.answer());
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn dint_to_uint_preserves_planted_intersection() {
        let (u, k, l) = (9000u64, 9usize, 90usize);
        let mut embedded = 0;
        for s in 0..40 {
            let dint = sample_dint(u / 9, k / 9, l / 9, s).unwrap();
            match embed_dint_in_uint(&dint, u, k, l, s, s + 1000).unwrap() {
                EmbedOutcome::Fail { .. } => {}
                EmbedOutcome::Embedded(e) => {
                    embedded += 1;
                    assert_eq!(e.instance.x.len(), k);
                    assert_eq!(e.instance.y.len(), l);
                    assert_eq!(e.planted_intersection(), dint.inner.intersection());
                }
            }
        }
        assert!(embedded > 0);
    }

    #[test]
    fn singleton_buckets_forced_case() {
        let o = singleton_buckets(30, 30, 5, 0).unwrap();
        assert_eq!(o.mean_singleton_fraction, 1.0);
        assert_eq!(o.p_at_least_third, 1.0);
        assert!(singleton_buckets(31, 3, 1, 0).is_err());
    }

    #[test]
    fn transcript_accounting() {
        let mut t = Transcript::new();
        t.send(Player::Alice, MessageKind::RejectFlag, 1, &[1]);
        t.send(Player::Bob, MessageKind::AddressSet, 128, &[1, 2]);
        t.transition(Player::Alice).unwrap();
        assert!(t.transition(Player::Alice).is_err());
        t.send(Player::Bob, MessageKind::Intersection, 7, &[]);
        let c = t.cost();
        assert_eq!((c.a1, c.b1, c.a2, c.b2), (1, 128, 0, 7));
        assert_eq!(t.to_csv().lines().count(), 5);
    }

    fn tournament() -> Result<Box<dyn ExternalQueue>, PqError> {
        let dev = crate::io_model::Device::new(crate::io_model::DeviceConfig::new(8, 192, 64)?)?;
        Ok(Box::new(crate::pq::TournamentQueue::new(dev, 512, 7)?))
    }

    #[test]
    fn protocol_recovers_intersection() {
        let params = TreeParams::new(2, 3, 1, 0).with_universe(96);
        let tree = Tree::build(&params).unwrap();
        let (mut requests, mut nonempty) = (0, 0);
        for seed in 0..6 {
            let v = tree.internal_nodes().nth(seed as usize % 3).unwrap().id;
            let k = 2 + seed as usize % 2;
            let (xs, ys) = protocol_shape(&params, &tree, v).unwrap();
            let inst = sample_uint(96, xs, ys, seed).unwrap();
            let run = run_embedding_protocol(&tournament, &params, v, k, &inst, seed).unwrap();
            assert!(run.correct(), "seed {seed}");
            assert_eq!(run.cost, run.transcript.cost());
            let r = reference_counts(&tournament, &params, &run).unwrap();
            assert_eq!((run.alice_requests, run.bob_requests), (r.r_vk, r.l_vk));
            requests += run.alice_requests + run.bob_requests;
            nonempty += !run.truth.is_empty() as usize;
        }
        assert!(requests > 0);
        assert!(nonempty > 0);
    }

    #[test]
    fn protocol_rejects_bad_shape() {
        let params = TreeParams::new(2, 2, 1, 0).with_universe(64);
        let inst = sample_uint(64, 3, 4, 0).unwrap();
        assert!(matches!(
            run_embedding_protocol(&tournament, &params, 0, 2, &inst, 0),
            Err(CommError::Shape(_))
        ));
    }

    #[test]
    fn log_prices() {
        assert_eq!(ceil_log2(1), 0);
        assert_eq!(ceil_log2(2), 1);
        assert_eq!(ceil_log2(129), 8);
        assert_eq!(ceil_log2(1 << 20), 20);
    }
}
