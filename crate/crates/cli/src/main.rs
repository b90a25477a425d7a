use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use knor::{
    fit, gen_synthetic, load_matrix, read_header, save_matrix, DataSource, EngineConfig, Init, KnorError, Layout,
    RowAccess, RowMatrix, RowStore, RunReport, SchedulerPolicy, SyntheticSpec,
};

#[derive(Debug, Parser)]
#[command(name = "knor", version, about = "Parallel, pruned and out-of-core k-means")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Run k-means on a dataset and write a per-iteration report.
    Train(TrainArgs),
    /// Print the shape and a value summary of a dataset.
    Info(InfoArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FamilyArg {
    Gaussian,
    Uniform,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long, value_enum, default_value = "gaussian")]
    family: FamilyArg,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    d: u64,
    /// Number of mixture components (gaussian only).
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..))]
    k_true: u64,
    /// Spacing between component centers, in standard deviations (gaussian only).
    #[arg(long, default_value_t = 10.0)]
    separation: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Write bare row data without the header.
    #[arg(long)]
    raw: bool,
}

/// Shape of a headerless file.
#[derive(Debug, Args)]
struct Shape {
    /// Treat the file as headerless with N rows of D values.
    #[arg(long, num_args = 2, value_names = ["N", "D"])]
    raw: Option<Vec<usize>>,
}

impl Shape {
    fn dims(&self) -> Option<(usize, usize)> {
        self.raw.as_ref().map(|v| (v[0], v[1]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Im,
    Sem,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SchedulerArg {
    Numa,
    Fifo,
    Static,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum InitArg {
    Forgy,
    RandomPartition,
    Kmeanspp,
}

#[derive(Debug, Args)]
struct TrainArgs {
    data: PathBuf,
    #[command(flatten)]
    shape: Shape,
    #[arg(short, long)]
    k: usize,
    #[arg(long, value_enum, default_value = "im")]
    mode: ModeArg,
    /// Enable triangle-inequality pruning (default).
    #[arg(long, overrides_with = "no_prune")]
    prune: bool,
    #[arg(long)]
    no_prune: bool,
    /// Enable the row cache (out-of-core mode only; default there).
    #[arg(long, overrides_with = "no_cache")]
    cache: bool,
    #[arg(long)]
    no_cache: bool,
    #[arg(long, value_enum, default_value = "numa")]
    scheduler: SchedulerArg,
    /// Worker threads; defaults to the available parallelism.
    #[arg(short = 'T', long)]
    threads: Option<usize>,
    /// NUMA node count, overriding detection and KNOR_NUMA_NODES.
    #[arg(short = 'N', long)]
    numa_nodes: Option<usize>,
    #[arg(long, default_value_t = knor::DEFAULT_TASK_SIZE)]
    task_size: usize,
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    #[arg(long, value_enum, default_value = "forgy")]
    init: InitArg,
    /// Initial centroids as a k x d matrix file (overrides --init).
    #[arg(long)]
    centroids_in: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Stop once an iteration reassigns at most this many points.
    #[arg(long, default_value_t = 0)]
    tolerance: u64,
    /// Report destination; `-` for standard output.
    #[arg(long, default_value = "-")]
    report: PathBuf,
    #[arg(long, default_value_t = knor::sem::DEFAULT_PAGE_SIZE)]
    page_size: usize,
    #[arg(long, default_value_t = knor::DEFAULT_CACHE_BYTES)]
    cache_bytes: usize,
    #[arg(long, default_value_t = knor::sem::DEFAULT_CACHE_INTERVAL)]
    cache_interval: usize,
    /// Do not pin workers to their node's CPUs.
    #[arg(long)]
    no_bind: bool,
    #[arg(long)]
    centroids_out: Option<PathBuf>,
    /// Final assignments as an n x 1 matrix file.
    #[arg(long)]
    assignments_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InfoArgs {
    data: PathBuf,
    #[command(flatten)]
    shape: Shape,
    /// Rows sampled for the value summary.
    #[arg(long, default_value_t = 1000)]
    sample: usize,
}

/// Errors that should be reported as bad usage rather than failures.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Info(a) => cmd_info(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        // a closed pipe downstream (`| head`) is not our failure
        Err(e) if broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn broken_pipe(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<io::Error>().is_some_and(|io| io.kind() == io::ErrorKind::BrokenPipe)
    })
}

fn cmd_gen(a: &GenArgs) -> Result<()> {
    let (n, d) = (a.n as usize, a.d as usize);
    let spec = match a.family {
        FamilyArg::Gaussian => SyntheticSpec::gaussian(n, d, a.k_true as usize, a.separation, a.seed),
        FamilyArg::Uniform => SyntheticSpec::uniform(n, d, a.seed),
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let m = gen_synthetic(&spec)?;
    let layout = if a.raw { Layout::Raw } else { Layout::Header };
    save_matrix(&m, &a.out, layout)?;
    let bytes = std::fs::metadata(&a.out)?.len();
    writeln!(
        io::stdout(),
        "wrote {}: n={n} d={d} dtype=f64 layout={} bytes={bytes}",
        a.out.display(),
        if a.raw { "raw" } else { "header" }
    )?;
    Ok(())
}

/// Maps a missing header to a usage hint.
fn header_hint(path: &Path, e: KnorError) -> anyhow::Error {
    match e {
        KnorError::MagicMismatch { .. } => usage(format!(
            "{} has no matrix header; pass --raw N D for headerless files",
            path.display()
        )),
        other => other.into(),
    }
}

fn open_store(path: &Path, shape: &Shape, page_size: usize) -> Result<RowStore> {
    match shape.dims() {
        Some((n, d)) => Ok(RowStore::open_raw(path, n, d, page_size)?),
        None => RowStore::open_with_header(path, page_size).map_err(|e| header_hint(path, e)),
    }
}

fn load(path: &Path, shape: &Shape) -> Result<RowMatrix> {
    match shape.dims() {
        Some(dims) => Ok(load_matrix(path, Layout::Raw, Some(dims))?),
        None => load_matrix(path, Layout::Header, None).map_err(|e| header_hint(path, e)),
    }
}

fn engine_config(a: &TrainArgs) -> Result<EngineConfig> {
    if a.mode == ModeArg::Im && a.cache {
        bail!(usage("--cache only applies to --mode sem"));
    }
    let init = match (&a.centroids_in, a.init) {
        (Some(p), _) => {
            let c = load_matrix(p, Layout::Header, None).with_context(|| format!("reading {}", p.display()))?;
            if c.n() != a.k {
                bail!(usage(format!("{} holds {} centroids but k = {}", p.display(), c.n(), a.k)));
            }
            Init::Given(c.into_values())
        }
        (None, InitArg::Forgy) => Init::Forgy,
        (None, InitArg::RandomPartition) => Init::RandomPartition,
        (None, InitArg::Kmeanspp) => Init::KmeansPlusPlus,
    };
    let threads = a
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let cfg = EngineConfig {
        k: a.k,
        max_iters: a.max_iters,
        init,
        seed: a.seed,
        threads,
        numa_nodes: a.numa_nodes,
        task_size: a.task_size,
        pruning: !a.no_prune,
        tolerance: a.tolerance,
        scheduler: match a.scheduler {
            SchedulerArg::Numa => SchedulerPolicy::Numa,
            SchedulerArg::Fifo => SchedulerPolicy::Fifo,
            SchedulerArg::Static => SchedulerPolicy::Static,
        },
        bind_threads: !a.no_bind,
        page_size: a.page_size,
        cache: a.mode == ModeArg::Sem && !a.no_cache,
        cache_bytes: a.cache_bytes,
        cache_interval: a.cache_interval,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = engine_config(a)?;
    let matrix;
    let store;
    let source = match a.mode {
        ModeArg::Im => {
            matrix = load(&a.data, &a.shape)?;
            DataSource::InMemory(&matrix)
        }
        ModeArg::Sem => {
            store = open_store(&a.data, &a.shape, cfg.page_size)?;
            DataSource::Sem(&store)
        }
    };
    let rows: &dyn RowAccess = match source {
        DataSource::InMemory(m) => m,
        DataSource::Sem(s) => s,
    };
    let (n, d) = (rows.n(), rows.d());
    if cfg.k > n {
        bail!(usage(format!("k = {} exceeds the {n} rows in {}", cfg.k, a.data.display())));
    }
    let result = fit(source, &cfg)?;
    let report = RunReport::new(source.mode_name(), n, d, &cfg, &result);

    let mut out: Box<dyn Write> = if a.report.as_os_str() == "-" {
        Box::new(io::stdout().lock())
    } else {
        let f = File::create(&a.report).with_context(|| format!("creating {}", a.report.display()))?;
        Box::new(BufWriter::new(f))
    };
    for line in report.lines() {
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;

    if let Some(p) = &a.centroids_out {
        let c = RowMatrix::new(cfg.k, d, result.centroids.means.clone())?;
        save_matrix(&c, p, Layout::Header)?;
    }
    if let Some(p) = &a.assignments_out {
        let v = result.assignments.iter().map(|&x| f64::from(x)).collect();
        save_matrix(&RowMatrix::new(n, 1, v)?, p, Layout::Header)?;
    }
    let s = &report.summary;
    eprintln!(
        "{} iterations, converged={}, wcss={:.6e}, distance computations={}",
        s.totals.iterations, s.converged, s.final_wcss, s.totals.distance_computations
    );
    Ok(())
}

fn cmd_info(a: &InfoArgs) -> Result<()> {
    let store = open_store(&a.data, &a.shape, knor::sem::DEFAULT_PAGE_SIZE)?;
    let (n, d) = (store.n(), store.d());
    let layout = if a.shape.dims().is_some() {
        "raw"
    } else {
        // validates the header fields beyond the magic
        read_header(&a.data)?;
        "header"
    };
    let bytes = std::fs::metadata(&a.data)?.len();
    let sample = a.sample.clamp(1, n);
    let mut row = vec![0.0; d];
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for j in 0..sample {
        // evenly spaced rows, always including the first and last
        let i = if sample == 1 { 0 } else { j * (n - 1) / (sample - 1) };
        store.read_row(i, &mut row)?;
        for &x in &row {
            lo = lo.min(x);
            hi = hi.max(x);
        }
    }
    let mut out = io::stdout().lock();
    writeln!(out, "path: {}", a.data.display())?;
    writeln!(out, "layout: {layout}")?;
    writeln!(out, "n: {n}")?;
    writeln!(out, "d: {d}")?;
    writeln!(out, "dtype: f64")?;
    writeln!(out, "bytes: {bytes}")?;
    writeln!(out, "sampled rows: {sample}")?;
    writeln!(out, "min: {lo}")?;
    writeln!(out, "max: {hi}")?;
    Ok(())
}
