//! `ioprobe`: generate hard workloads, run them on instrumented queues,
//! attribute probes to the tree, and simulate the two-party protocol.

mod queue;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ioprobe::comm_game::{
    embedding_failure_rate, protocol_shape, reference_counts, run_embedding_protocol, sample_uint, singleton_buckets,
    ProtocolRun,
};
use ioprobe::hard_dist::{split_seed, transform_no_spurious, Tree, TreeParams, Variant, Workload, MAGIC};
use ioprobe::pq::{run_workload, ExternalQueue, RunReport};
use ioprobe::probe_stats::{
    attribute, check_conservation, find_embedding, node_stats, stats_to_csv, NodeStats, DEFAULT_ADMISSION_FACTOR,
};
use ioprobe::{DeviceConfig, PqError, VERSION};

use queue::{QueueKind, QueueSpec};

#[derive(Parser)]
#[command(
    name = "ioprobe",
    version,
    about = "Probe-level experiments on external-memory priority queues"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Materialize a workload from the hard distribution.
    Gen(GenArgs),
    /// Replay a workload file on a queue and report probe counts.
    Run(RunArgs),
    /// Per-node probe statistics and the embedding node search.
    Stats(StatsArgs),
    /// Run the two-party protocol on random set-intersection instances.
    Comm(CommArgs),
    /// Monte Carlo of the singleton-bucket count.
    Obs1(Obs1Args),
    /// Probe counts of several queues on the same workloads.
    Bench(BenchArgs),
}

#[derive(Args, Clone)]
struct TreeArgs {
    /// Branching parameter; nodes have 2+beta children.
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u32).range(2..))]
    beta: u32,
    /// Tree height.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..))]
    h: u32,
    /// Tree memory parameter (leaf batch size).
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    m: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overrides the default key universe.
    #[arg(long)]
    universe: Option<u64>,
    /// Enforce the strict parameter regime.
    #[arg(long)]
    strict: bool,
}

impl TreeArgs {
    fn params(&self) -> TreeParams {
        let p = TreeParams::new(self.beta, self.h, self.m, self.seed).with_strict(self.strict);
        match self.universe {
            Some(u) => p.with_universe(u),
            None => p,
        }
    }
}

#[derive(Args, Clone)]
struct DeviceArgs {
    /// Words per block.
    #[arg(long, default_value_t = 8)]
    b: usize,
    /// Words of main memory.
    #[arg(long = "mem", default_value_t = 192)]
    mem: usize,
    /// Bits per word.
    #[arg(long, default_value_t = 64)]
    w: u32,
}

impl DeviceArgs {
    fn config(&self) -> Result<DeviceConfig> {
        Ok(DeviceConfig::new(self.b, self.mem, self.w)?)
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    tree: TreeArgs,
    /// `basic`, `multi:<trees>` or `no_spurious:<trees>`.
    #[arg(long, default_value = "basic", value_parser = parse_variant)]
    variant: Variant,
    /// Output file; a `.jsonl` extension selects the text format.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Workload file written by `gen`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "tournament")]
    queue: QueueKind,
    #[command(flatten)]
    device: DeviceArgs,
    /// Seed recorded in the report and used for the queue's key hash.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the probe log as CSV.
    #[arg(long)]
    probe_log: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[command(flatten)]
    tree: TreeArgs,
    #[command(flatten)]
    device: DeviceArgs,
    #[arg(long, default_value = "tournament")]
    queue: QueueKind,
    /// Independent workloads averaged by the node search.
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    trials: u64,
    /// Admission factor on C(v) relative to its height class.
    #[arg(long, default_value_t = DEFAULT_ADMISSION_FACTOR)]
    admission: f64,
    /// Node statistics of the first trial.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CommArgs {
    #[command(flatten)]
    tree: TreeArgs,
    #[command(flatten)]
    device: DeviceArgs,
    /// Queue under simulation; the buffered heap is wrapped automatically.
    #[arg(long, default_value = "tournament")]
    queue: QueueKind,
    #[arg(long, default_value_t = 100)]
    trials: u64,
    /// Write the message transcript of the first trial.
    #[arg(long)]
    transcript: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Obs1Args {
    /// Universe size.
    #[arg(long = "universe", default_value_t = 1_000_000)]
    universe: u64,
    /// Set size and bucket count.
    #[arg(long, default_value_t = 1000)]
    l: usize,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also estimate the embedding failure rate for sets of this size.
    #[arg(long)]
    embed_k: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    tree: TreeArgs,
    #[command(flatten)]
    device: DeviceArgs,
    /// Comma-separated queue selectors.
    #[arg(long, default_value = "tournament,dk:buffered_heap,oracle", value_delimiter = ',')]
    queue: Vec<QueueKind>,
    #[arg(long, default_value = "basic", value_parser = parse_variant)]
    variant: Variant,
    #[arg(long, default_value_t = 3)]
    trials: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    let trees = |t: &str| {
        t.parse::<u32>()
            .map_err(|e| format!("tree count `{t}`: {e}"))
            .and_then(|n| {
                if n == 0 {
                    Err("tree count must be positive".into())
                } else {
                    Ok(n)
                }
            })
    };
    match s.split_once(':') {
        None if s == "basic" => Ok(Variant::Basic),
        Some(("multi", t)) => Ok(Variant::MultiTree(trees(t)?)),
        Some(("no_spurious", t)) => Ok(Variant::NoSpurious(trees(t)?)),
        _ => Err(format!(
            "unknown variant `{s}`; use basic, multi:<n> or no_spurious:<n>"
        )),
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn build_workload(params: &TreeParams, variant: Variant) -> Result<Workload> {
    Ok(match variant {
        Variant::Basic => Workload::materialize(params)?,
        Variant::MultiTree(m) => Workload::materialize_multi(params, m)?,
        Variant::NoSpurious(m) => {
            let trees = (0..m as u64)
                .map(|t| {
                    Workload::materialize(&TreeParams {
                        seed: split_seed(params.seed, t),
                        ..*params
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            transform_no_spurious(&trees)?
        }
    })
}

fn read_workload(path: &Path) -> Result<Workload> {
    let mut r = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let binary = r.fill_buf()?.starts_with(MAGIC);
    let w = if binary {
        Workload::read_binary(r)
    } else {
        Workload::read_jsonl(r)
    };
    w.with_context(|| format!("reading {}", path.display()))
}

fn cmd_gen(a: &GenArgs) -> Result<()> {
    let params = a.tree.params();
    let w = build_workload(&params, a.variant)?;
    for warning in &w.warnings {
        eprintln!("warning: {warning}");
    }
    let mut out = BufWriter::new(File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    if a.out.extension().is_some_and(|e| e == "jsonl") {
        w.write_jsonl(&mut out)?;
    } else {
        w.write_binary(&mut out)?;
    }
    out.flush()?;
    let c = w.counts();
    println!(
        "inserts={} deletes={} extract_mins={} decrease_keys={} ops={} n={} universe={} seed={} version={VERSION}",
        c.inserts,
        c.deletes,
        c.extract_mins,
        c.decrease_keys,
        w.ops.len(),
        params.n()?,
        params.universe()?,
        params.seed
    );
    Ok(())
}

/// Upper bound on keys stored at once by a workload.
fn capacity_of(w: &Workload) -> usize {
    (w.counts().inserts as usize).max(1)
}

fn cmd_run(a: &RunArgs) -> Result<()> {
    let w = read_workload(&a.input)?;
    let spec = QueueSpec {
        kind: a.queue,
        device: a.device.config()?,
        capacity: capacity_of(&w),
        universe: w.params.universe()?,
        hash_seed: split_seed(a.seed, 0),
    };
    let mut q = spec.build()?;
    let report = run_workload(q.as_mut(), &w.ops, a.seed).with_context(|| format!("running {}", a.queue))?;
    let mut out = output(a.out.as_deref())?;
    writeln!(out, "{}", RunReport::CSV_HEADER)?;
    writeln!(out, "{}", report.csv_row())?;
    out.flush()?;
    use ioprobe::pq::OpClass::*;
    eprintln!(
        "amortized probes: insert {:.3}, delete {:.3}, extract_min {:.3}, decrease_key {:.3}",
        report.amortized(Insert),
        report.amortized(Delete),
        report.amortized(ExtractMin),
        report.amortized(DecreaseKey)
    );
    if let Some(p) = &a.probe_log {
        let csv = q.device().map(|d| d.probe_log_csv()).unwrap_or_default();
        std::fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn cmd_stats(a: &StatsArgs) -> Result<()> {
    let base = a.tree.params();
    let tree = Tree::build(&base)?;
    let mut trials: Vec<Vec<NodeStats>> = Vec::new();
    for t in 0..a.trials {
        let params = TreeParams {
            seed: split_seed(base.seed, t),
            ..base
        };
        let w = Workload::materialize(&params)?;
        let spec = QueueSpec {
            kind: a.queue,
            device: a.device.config()?,
            capacity: capacity_of(&w),
            universe: params.universe()?,
            hash_seed: split_seed(params.seed, 1),
        };
        let mut q = spec.build()?;
        run_workload(q.as_mut(), &w.ops, params.seed)?;
        let log = q.device().map(|d| d.probe_log()).unwrap_or(&[]);
        let stats = node_stats(&attribute(log, &tree)?, &tree);
        check_conservation(&stats).map_err(|e| anyhow::anyhow!("trial {t}: conservation violated: {e}"))?;
        let p_sum: u64 = stats.iter().map(|s| s.p_count).sum();
        if p_sum != log.len() as u64 {
            bail!("trial {t}: sum of P(v) is {p_sum}, total probes {}", log.len());
        }
        println!("trial={t} seed={} probes={} sum_P={p_sum}", params.seed, log.len());
        if t == 0 {
            if let Some(p) = &a.out {
                std::fs::write(p, stats_to_csv(&stats, base.beta))
                    .with_context(|| format!("writing {}", p.display()))?;
            }
        }
        trials.push(stats);
    }
    let e = find_embedding(&trials, &tree, a.admission)?;
    println!(
        "embedding: h_star={} node={} k={} level_P={:.2}+-{:.2} pair_LR={:.2}+-{:.2} node_mean_LR={:.2} C_v={:.2}+-{:.2} level_mean_C={:.2} trials={} seed={} version={VERSION}",
        e.h_star,
        e.node,
        e.k,
        e.level_p.mean,
        e.level_p.half_width,
        e.pair_lr.mean,
        e.pair_lr.half_width,
        e.node_mean_lr,
        e.c_v.mean,
        e.c_v.half_width,
        e.level_mean_c,
        e.trials,
        base.seed
    );
    Ok(())
}

fn cmd_comm(a: &CommArgs) -> Result<bool> {
    let params = a.tree.params();
    let tree = Tree::build(&params)?;
    let n = params.n()? as usize;
    let mut kind = a.queue;
    if kind.base == queue::Base::BufferedHeap {
        kind.wrapped = true;
    }
    let spec = QueueSpec {
        kind,
        device: a.device.config()?,
        capacity: (8 * n).max(1024),
        universe: params.universe()?,
        hash_seed: split_seed(params.seed, 7),
    };
    spec.build_external()?;
    let factory = || -> Result<Box<dyn ExternalQueue>, PqError> {
        spec.build_external().map_err(|e| PqError::Corrupt(e.to_string()))
    };
    let candidates: Vec<_> = tree.internal_nodes().filter(|v| v.height >= 2).map(|v| v.id).collect();
    if candidates.is_empty() {
        bail!("the tree has no internal node of height at least 2; use --h 2 or more");
    }
    let mut out = output(a.out.as_deref())?;
    writeln!(
        out,
        "{},requests_alice,requests_bob,r_vk,l_vk,queue",
        ProtocolRun::CSV_HEADER
    )?;
    let mut all_ok = true;
    for t in 0..a.trials {
        let seed = split_seed(params.seed, 100 + t);
        let v = candidates[t as usize % candidates.len()];
        let k = 2 + (t as usize / candidates.len()) % params.beta as usize;
        let (xs, ys) = protocol_shape(&params, &tree, v)?;
        let inst = sample_uint(params.universe()?, xs, ys, split_seed(seed, 3))?;
        let run = run_embedding_protocol(&factory, &params, v, k, &inst, seed)?;
        let r = reference_counts(&factory, &params, &run)?;
        let consistent = r.r_vk == run.alice_requests && r.l_vk == run.bob_requests;
        if !run.correct() || !consistent || run.cost != run.transcript.cost() {
            all_ok = false;
            eprintln!("trial {t}: correct={} requests consistent={consistent}", run.correct());
        }
        writeln!(
            out,
            "{},{},{},{},{},{kind}",
            run.csv_row(&params),
            run.alice_requests,
            run.bob_requests,
            r.r_vk,
            r.l_vk
        )?;
        if t == 0 {
            if let Some(p) = &a.transcript {
                std::fs::write(p, run.transcript.to_csv()).with_context(|| format!("writing {}", p.display()))?;
            }
        }
    }
    out.flush()?;
    Ok(all_ok)
}

fn cmd_obs1(a: &Obs1Args) -> Result<bool> {
    let o = singleton_buckets(a.universe, a.l, a.trials, a.seed)?;
    let e1 = (-1f64).exp();
    let mut out = output(a.out.as_deref())?;
    write!(
        out,
        "universe,l,trials,mean_singleton_fraction,e_inv,p_at_least_third,variance_over_l2"
    )?;
    if a.embed_k.is_some() {
        write!(out, ",embed_k,embed_failure_rate")?;
    }
    writeln!(out, ",seed,version")?;
    write!(
        out,
        "{},{},{},{:.6},{e1:.6},{:.6},{:.8}",
        a.universe, a.l, o.trials, o.mean_singleton_fraction, o.p_at_least_third, o.variance_over_l2
    )?;
    if let Some(k) = a.embed_k {
        write!(
            out,
            ",{k},{:.6}",
            embedding_failure_rate(a.universe, k, a.l, a.trials, a.seed)?
        )?;
    }
    writeln!(out, ",{},{VERSION}", a.seed)?;
    out.flush()?;
    let ok = (o.mean_singleton_fraction - e1).abs() <= 0.02;
    if !ok {
        eprintln!(
            "mean singleton fraction {:.4} is not within 0.02 of {e1:.4}",
            o.mean_singleton_fraction
        );
    }
    Ok(ok)
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let base = a.tree.params();
    let mut out = output(a.out.as_deref())?;
    writeln!(out, "{},trial,workload_seed,beta,h,m", RunReport::CSV_HEADER)?;
    for t in 0..a.trials {
        let params = TreeParams {
            seed: split_seed(base.seed, t),
            ..base
        };
        let w = build_workload(&params, a.variant)?;
        for kind in &a.queue {
            let spec = QueueSpec {
                kind: *kind,
                device: a.device.config()?,
                capacity: capacity_of(&w),
                universe: params.universe()?,
                hash_seed: split_seed(params.seed, 1),
            };
            let mut q = spec.build()?;
            let report = run_workload(q.as_mut(), &w.ops, base.seed).with_context(|| format!("running {kind}"))?;
            writeln!(
                out,
                "{},{t},{},{},{},{}",
                report.csv_row(),
                params.seed,
                params.beta,
                params.h,
                params.m
            )?;
        }
    }
    out.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Gen(a) => cmd_gen(a).map(|_| true),
        Cmd::Run(a) => cmd_run(a).map(|_| true),
        Cmd::Stats(a) => cmd_stats(a).map(|_| true),
        Cmd::Comm(a) => cmd_comm(a),
        Cmd::Obs1(a) => cmd_obs1(a),
        Cmd::Bench(a) => cmd_bench(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
