//! The iteration driver shared by every execution mode.
//!
//! One iteration is a single parallel pass: each worker pulls row blocks from
//! the partitioned task queue, assigns every point it touches to its nearest
//! centroid and folds the point into its private accumulator. The only
//! synchronization is the join at the end of the pass, after which the
//! accumulators are tree-merged and the next centroids computed.
//!
//! With pruning on, the per-worker accumulators carry signed deltas (a point
//! that changes cluster is removed from the old one and added to the new one)
//! and are folded into a run-long total, so points skipped by clause 1 never
//! need their row data again.

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::centroids::{finalize_centroids, merge_in_place, nearest_squared, CentroidSet, ThreadAccumulator};
use crate::distance::squared_norm;
use crate::error::{KnorError, Result};
use crate::init::{init_centroids, Init};
use crate::matrix::{RowAccess, RowMatrix};
use crate::mti::{scan_candidates, update_bounds_after_move, CentroidGeometry, PruneCounts, PruneState};
use crate::partition::{partition_rows, RowPartition};
use crate::sched::{PartitionedTaskQueue, SchedulerCounters, SchedulerPolicy, Task, Topology};
use crate::sem::{fetch_rows, should_refresh, CacheSchedule, FetchBuffer, IoStats, RowCache, RowStore, DEFAULT_CACHE_INTERVAL, DEFAULT_PAGE_SIZE};

pub const DEFAULT_TASK_SIZE: usize = 8192;
pub const DEFAULT_CACHE_BYTES: usize = 64 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub k: usize,
    pub max_iters: usize,
    pub init: Init,
    pub seed: u64,
    pub threads: usize,
    /// `None` detects the node count (or reads `KNOR_NUMA_NODES`).
    pub numa_nodes: Option<usize>,
    pub task_size: usize,
    pub pruning: bool,
    /// Stop once an iteration reassigns at most this many points.
    pub tolerance: u64,
    pub scheduler: SchedulerPolicy,
    /// Pin workers to their node's CPUs when the topology is known.
    pub bind_threads: bool,
    pub page_size: usize,
    /// Row cache on/off (out-of-core mode only).
    pub cache: bool,
    pub cache_bytes: usize,
    pub cache_interval: usize,
}

impl EngineConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            max_iters: 100,
            init: Init::Forgy,
            seed: 0,
            threads: 1,
            numa_nodes: None,
            task_size: DEFAULT_TASK_SIZE,
            pruning: true,
            tolerance: 0,
            scheduler: SchedulerPolicy::Numa,
            bind_threads: true,
            page_size: DEFAULT_PAGE_SIZE,
            cache: true,
            cache_bytes: DEFAULT_CACHE_BYTES,
            cache_interval: DEFAULT_CACHE_INTERVAL,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(KnorError::config("k must be at least 1"));
        }
        if self.max_iters == 0 {
            return Err(KnorError::config("max_iters must be at least 1"));
        }
        if self.task_size == 0 {
            return Err(KnorError::config("task size must be at least 1"));
        }
        if self.threads == 0 {
            return Err(KnorError::config("need at least one thread"));
        }
        if self.page_size == 0 {
            return Err(KnorError::config("page size must be positive"));
        }
        CacheSchedule::new(self.cache_interval)?;
        Ok(())
    }
}

/// Where the rows live.
#[derive(Debug, Clone, Copy)]
pub enum DataSource<'a> {
    InMemory(&'a RowMatrix),
    /// Rows stay on disk; only `O(n)` point state is resident.
    Sem(&'a RowStore),
}

impl DataSource<'_> {
    fn rows(&self) -> &dyn RowAccess {
        match self {
            DataSource::InMemory(m) => *m,
            DataSource::Sem(s) => *s,
        }
    }

    pub fn mode_name(&self) -> &'static str {
        match self {
            DataSource::InMemory(_) => "im",
            DataSource::Sem(_) => "sem",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iter: usize,
    pub reassignments: u64,
    /// Within-cluster sum of squares of this iteration's assignment against
    /// the centroids it was computed from.
    pub wcss: f64,
    pub distance_computations: u64,
    pub pruned: PruneCounts,
    pub io: IoStats,
    pub scheduler: SchedulerCounters,
    pub tasks: u64,
    pub cache_refreshed: bool,
    pub wall_secs: f64,
}

/// Bytes held by each piece of engine state, at its high-water mark.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryFootprint {
    pub data: usize,
    pub point_state: usize,
    pub centroids: usize,
    pub accumulators: usize,
    pub geometry: usize,
    pub cache: usize,
    pub buffers: usize,
}

impl MemoryFootprint {
    /// Everything except the row cache and I/O buffers.
    pub fn resident(&self) -> usize {
        self.data + self.point_state + self.centroids + self.accumulators + self.geometry
    }

    fn raise(&mut self, o: &MemoryFootprint) {
        self.data = self.data.max(o.data);
        self.point_state = self.point_state.max(o.point_state);
        self.centroids = self.centroids.max(o.centroids);
        self.accumulators = self.accumulators.max(o.accumulators);
        self.geometry = self.geometry.max(o.geometry);
        self.cache = self.cache.max(o.cache);
        self.buffers = self.buffers.max(o.buffers);
    }
}

#[derive(Debug, Clone)]
pub struct KmeansResult {
    pub centroids: CentroidSet,
    pub assignments: Vec<u32>,
    pub iterations: Vec<IterationStats>,
    pub converged: bool,
    pub memory: MemoryFootprint,
    pub topology: Topology,
    /// Whether every worker was pinned to its node.
    pub threads_bound: bool,
}

impl KmeansResult {
    pub fn total_io(&self) -> IoStats {
        let mut t = IoStats::default();
        self.iterations.iter().for_each(|s| t.add(&s.io));
        t
    }

    pub fn total_distance_computations(&self) -> u64 {
        self.iterations.iter().map(|s| s.distance_computations).sum()
    }

    pub fn total_scheduler(&self) -> SchedulerCounters {
        let mut t = SchedulerCounters::default();
        self.iterations.iter().for_each(|s| t.add(&s.scheduler));
        t
    }
}

/// Engine state as of the end of one iteration, handed to observers.
#[derive(Debug)]
pub struct IterationView<'a> {
    pub stats: &'a IterationStats,
    pub assignments: &'a [u32],
    /// Centroids the assignment was computed against.
    pub centroids_used: &'a CentroidSet,
    /// Centroids for the next iteration.
    pub centroids_next: &'a CentroidSet,
    /// Upper bounds, already loosened for `centroids_next` (pruning only).
    pub upper: Option<&'a [f64]>,
    pub tight: Option<&'a [bool]>,
}

/// Exhaustive Lloyd's (no pruning), in memory.
pub fn run_lloyd(m: &RowMatrix, cfg: &EngineConfig) -> Result<KmeansResult> {
    let cfg = EngineConfig {
        pruning: false,
        ..cfg.clone()
    };
    fit(DataSource::InMemory(m), &cfg)
}

/// Lloyd's with triangle-inequality pruning, in memory.
pub fn run_lloyd_mti(m: &RowMatrix, cfg: &EngineConfig) -> Result<KmeansResult> {
    let cfg = EngineConfig {
        pruning: true,
        ..cfg.clone()
    };
    fit(DataSource::InMemory(m), &cfg)
}

/// Out-of-core run; pruning and cache follow `cfg`.
pub fn run_lloyd_sem(store: &RowStore, cfg: &EngineConfig) -> Result<KmeansResult> {
    fit(DataSource::Sem(store), cfg)
}

pub fn run_with_scheduler(
    policy: SchedulerPolicy,
    source: DataSource<'_>,
    cfg: &EngineConfig,
) -> Result<KmeansResult> {
    let cfg = EngineConfig {
        scheduler: policy,
        ..cfg.clone()
    };
    fit(source, &cfg)
}

pub fn fit(source: DataSource<'_>, cfg: &EngineConfig) -> Result<KmeansResult> {
    fit_observed(source, cfg, &mut |_| {})
}

/// Mutable views of the per-point arrays covering one task's rows.
struct Chunk<'a> {
    assignment: &'a mut [u32],
    upper: &'a mut [f64],
    tight: &'a mut [bool],
    active: &'a mut [bool],
}

/// Hands out consecutive disjoint chunks of the per-point arrays.
struct Splitter<'a> {
    assignment: &'a mut [u32],
    upper: &'a mut [f64],
    tight: &'a mut [bool],
    active: &'a mut [bool],
}

fn split_front<'a, T>(s: &mut &'a mut [T], len: usize) -> &'a mut [T] {
    if s.is_empty() {
        return Default::default();
    }
    let (head, tail) = std::mem::take(s).split_at_mut(len);
    *s = tail;
    head
}

impl<'a> Splitter<'a> {
    fn take(&mut self, len: usize) -> Chunk<'a> {
        Chunk {
            assignment: split_front(&mut self.assignment, len),
            upper: split_front(&mut self.upper, len),
            tight: split_front(&mut self.tight, len),
            active: split_front(&mut self.active, len),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pass {
    /// Every point against every centroid.
    Exhaustive,
    /// Exhaustive, and seed tight upper bounds.
    SeedBounds,
    Pruned,
}

struct IterCtx<'a> {
    source: DataSource<'a>,
    centroids: &'a CentroidSet,
    geometry: Option<&'a CentroidGeometry>,
    cache: Option<&'a RowCache>,
    pass: Pass,
}

#[derive(Debug, Default)]
struct WorkerScratch {
    ids: Vec<usize>,
    fetch: FetchBuffer,
}

impl WorkerScratch {
    fn resident_bytes(&self) -> usize {
        8 * self.ids.capacity() + self.fetch.resident_bytes()
    }
}

#[derive(Debug, Default)]
struct WorkerTally {
    reassignments: u64,
    distance_computations: u64,
    pruned: PruneCounts,
    io: IoStats,
    wcss: f64,
    sq_norm: f64,
}

enum Rows<'a> {
    Matrix(&'a RowMatrix),
    Fetched(&'a FetchBuffer, usize),
}

impl Rows<'_> {
    #[inline]
    fn get(&self, pos: usize, id: usize) -> &[f64] {
        match self {
            Rows::Matrix(m) => m.row(id),
            Rows::Fetched(buf, d) => buf.row(pos, *d),
        }
    }
}

fn process_task(
    task: Task<Chunk<'_>>,
    ctx: &IterCtx<'_>,
    acc: &mut ThreadAccumulator,
    scratch: &mut WorkerScratch,
    tally: &mut WorkerTally,
) -> Result<()> {
    let Chunk {
        assignment,
        upper,
        tight,
        active,
    } = task.payload;
    let base = task.rows.start;
    let c = ctx.centroids;
    let k = c.k() as u64;

    scratch.ids.clear();
    match ctx.pass {
        Pass::Exhaustive | Pass::SeedBounds => scratch.ids.extend(task.rows.clone()),
        Pass::Pruned => {
            let geo = ctx.geometry.expect("pruned pass needs centroid geometry");
            for j in 0..assignment.len() {
                if upper[j] <= geo.s[assignment[j] as usize] {
                    tally.pruned.clause1 += k;
                    tally.io.rows_elided += 1;
                } else {
                    scratch.ids.push(base + j);
                }
            }
        }
    }
    if !active.is_empty() {
        active.fill(false);
        for &id in &scratch.ids {
            active[id - base] = true;
        }
    }

    let rows = match ctx.source {
        DataSource::InMemory(m) => Rows::Matrix(m),
        DataSource::Sem(store) => {
            let cache = ctx.cache.expect("out-of-core pass needs a row cache");
            fetch_rows(store, &scratch.ids, cache, &mut tally.io, &mut scratch.fetch)?;
            Rows::Fetched(&scratch.fetch, store.d())
        }
    };

    match ctx.pass {
        Pass::Exhaustive => {
            for (pos, &id) in scratch.ids.iter().enumerate() {
                let j = id - base;
                let v = rows.get(pos, id);
                let (a, sq) = nearest_squared(v, c);
                if a as u32 != assignment[j] {
                    tally.reassignments += 1;
                    assignment[j] = a as u32;
                }
                acc.add(a, v);
                tally.wcss += sq;
            }
            tally.distance_computations += k * scratch.ids.len() as u64;
        }
        Pass::SeedBounds => {
            for (pos, &id) in scratch.ids.iter().enumerate() {
                let j = id - base;
                let v = rows.get(pos, id);
                let (a, sq) = nearest_squared(v, c);
                if a as u32 != assignment[j] {
                    tally.reassignments += 1;
                    assignment[j] = a as u32;
                }
                upper[j] = sq.sqrt();
                tight[j] = true;
                acc.add(a, v);
                tally.sq_norm += squared_norm(v);
            }
            tally.distance_computations += k * scratch.ids.len() as u64;
        }
        Pass::Pruned => {
            let geo = ctx.geometry.expect("pruned pass needs centroid geometry");
            for (pos, &id) in scratch.ids.iter().enumerate() {
                let j = id - base;
                let v = rows.get(pos, id);
                let old = assignment[j];
                let out = scan_candidates(v, c, geo, &mut assignment[j], &mut upper[j], &mut tight[j]);
                tally.distance_computations += out.computations;
                tally.pruned.clause2 += out.clause2;
                tally.pruned.clause3 += out.clause3;
                if out.id as u32 != old {
                    tally.reassignments += 1;
                    acc.remove(old as usize, v);
                    acc.add(out.id, v);
                }
            }
        }
    }
    Ok(())
}

/// `sum_i |v_i - c_a(i)|^2` from cluster sums: `Q - 2 sum_c <S_c, c> + sum_c n_c |c|^2`.
fn wcss_from_sums(sq_norm_total: f64, sums: &ThreadAccumulator, c: &CentroidSet) -> f64 {
    let mut cross = 0.0;
    let mut self_term = 0.0;
    for x in 0..c.k() {
        let mean = c.mean(x);
        cross += sums.sum_row(x).iter().zip(mean).map(|(s, m)| s * m).sum::<f64>();
        self_term += sums.counts[x] as f64 * squared_norm(mean);
    }
    (sq_norm_total - 2.0 * cross + self_term).max(0.0)
}

/// Runs k-means, calling `observer` after every iteration.
pub fn fit_observed(
    source: DataSource<'_>,
    cfg: &EngineConfig,
    observer: &mut dyn FnMut(&IterationView<'_>),
) -> Result<KmeansResult> {
    cfg.validate()?;
    let rows = source.rows();
    let (n, d, k) = (rows.n(), rows.d(), cfg.k);
    let threads = cfg.threads;

    let topology = Topology::build(threads, cfg.numa_nodes);
    let parts: Vec<RowPartition> = partition_rows(n, threads, topology.nodes)?;
    let bind = cfg.bind_threads && topology.node_cpus.len() > 1;
    let bound_all = AtomicBool::new(bind);

    let mut centroids = init_centroids(rows, k, &cfg.init, cfg.seed)?;

    let mut state = PruneState {
        assignment: vec![0; n],
        upper: if cfg.pruning { vec![0.0; n] } else { Vec::new() },
        tight: if cfg.pruning { vec![false; n] } else { Vec::new() },
    };
    let mut active: Vec<bool> = match source {
        DataSource::Sem(_) => vec![false; n],
        DataSource::InMemory(_) => Vec::new(),
    };
    let mut cache = match source {
        DataSource::Sem(_) => Some(RowCache::new(
            &parts,
            d,
            if cfg.cache { cfg.cache_bytes } else { 0 },
        )),
        DataSource::InMemory(_) => None,
    };
    let schedule = CacheSchedule::new(cfg.cache_interval)?;

    let mut accs: Vec<ThreadAccumulator> = (0..threads).map(|w| ThreadAccumulator::new(k, d, w)).collect();
    let mut running = cfg.pruning.then(|| ThreadAccumulator::new(k, d, threads));
    let mut scratch: Vec<WorkerScratch> = (0..threads).map(|_| WorkerScratch::default()).collect();
    let mut sq_norm_total = 0.0;

    let mut memory = MemoryFootprint::default();
    let mut iterations = Vec::new();
    let mut converged = false;

    for t in 0..cfg.max_iters {
        let started = Instant::now();
        let pass = match (cfg.pruning, t) {
            (false, _) => Pass::Exhaustive,
            (true, 0) => Pass::SeedBounds,
            (true, _) => Pass::Pruned,
        };
        let geometry = (pass == Pass::Pruned).then(|| CentroidGeometry::compute(&centroids));

        let queue = PartitionedTaskQueue::new(&topology, cfg.scheduler);
        let mut splitter = Splitter {
            assignment: &mut state.assignment,
            upper: &mut state.upper,
            tight: &mut state.tight,
            active: &mut active,
        };
        let tasks = queue.enqueue_iteration(&parts, cfg.task_size, |r| splitter.take(r.len()))?;

        let ctx = IterCtx {
            source,
            centroids: &centroids,
            geometry: geometry.as_ref(),
            cache: cache.as_ref(),
            pass,
        };
        let abort = AtomicBool::new(false);
        let tallies: Vec<Result<WorkerTally>> = std::thread::scope(|s| {
            let handles: Vec<_> = accs
                .iter_mut()
                .zip(scratch.iter_mut())
                .enumerate()
                .map(|(w, (acc, scratch))| {
                    let (queue, ctx, abort, topology, bound_all) = (&queue, &ctx, &abort, &topology, &bound_all);
                    s.spawn(move || -> Result<WorkerTally> {
                        if bind && !topology.bind_current_thread(w) {
                            bound_all.store(false, Ordering::Relaxed);
                        }
                        acc.reset();
                        let mut tally = WorkerTally::default();
                        while !abort.load(Ordering::Relaxed) {
                            let Some(task) = queue.next_task(w) else { break };
                            if let Err(e) = process_task(task, ctx, acc, scratch, &mut tally) {
                                abort.store(true, Ordering::Relaxed);
                                return Err(e);
                            }
                        }
                        Ok(tally)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        let scheduler = queue.counters();
        drop(queue);

        let mut stats = IterationStats {
            iter: t,
            tasks: tasks as u64,
            scheduler,
            ..Default::default()
        };
        let mut wcss = 0.0;
        for tally in tallies {
            let tally = tally.map_err(|e| KnorError::Iteration {
                iteration: t,
                source: Box::new(e),
            })?;
            stats.reassignments += tally.reassignments;
            stats.distance_computations += tally.distance_computations;
            stats.pruned.add(&tally.pruned);
            stats.io.add(&tally.io);
            wcss += tally.wcss;
            sq_norm_total += tally.sq_norm;
        }

        merge_in_place(&mut accs)?;
        let next = match running.as_mut() {
            Some(total) => {
                total.absorb(&accs[0]);
                stats.wcss = wcss_from_sums(sq_norm_total, total, &centroids);
                finalize_centroids(total, &centroids)
            }
            None => {
                stats.wcss = wcss;
                finalize_centroids(&accs[0], &centroids)
            }
        };
        if cfg.pruning {
            update_bounds_after_move(&mut state, &next);
        }

        if let (DataSource::Sem(store), Some(cache)) = (source, cache.as_mut()) {
            if cache.capacity_bytes() > 0 && t >= 1 && should_refresh(t, &schedule) {
                cache
                    .refresh(&active, store, &mut stats.io)
                    .map_err(|e| KnorError::Iteration {
                        iteration: t,
                        source: Box::new(e),
                    })?;
                stats.cache_refreshed = true;
            }
        }

        memory.raise(&MemoryFootprint {
            data: match source {
                DataSource::InMemory(m) => m.resident_bytes(),
                DataSource::Sem(_) => 0,
            },
            point_state: state.resident_bytes() + active.capacity(),
            centroids: centroids.resident_bytes() + next.resident_bytes(),
            accumulators: accs.iter().map(|a| a.resident_bytes()).sum::<usize>()
                + running.as_ref().map_or(0, |r| r.resident_bytes()),
            geometry: geometry.as_ref().map_or(0, |g| g.resident_bytes()),
            cache: cache.as_ref().map_or(0, |c| c.resident_bytes()),
            buffers: scratch.iter().map(|s| s.resident_bytes()).sum(),
        });

        stats.wall_secs = started.elapsed().as_secs_f64();
        observer(&IterationView {
            stats: &stats,
            assignments: &state.assignment,
            centroids_used: &centroids,
            centroids_next: &next,
            upper: cfg.pruning.then_some(&state.upper[..]),
            tight: cfg.pruning.then_some(&state.tight[..]),
        });
        let done = stats.reassignments <= cfg.tolerance;
        iterations.push(stats);
        centroids = next;
        if done {
            converged = true;
            break;
        }
    }

    Ok(KmeansResult {
        centroids,
        assignments: state.assignment,
        iterations,
        converged,
        memory,
        topology,
        threads_bound: bound_all.load(Ordering::Relaxed),
    })
}
