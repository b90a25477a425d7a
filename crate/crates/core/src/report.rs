//! Machine-readable run reports: one config record, one record per
//! iteration, one summary record.

use serde::Serialize;

use crate::engine::{EngineConfig, IterationStats, KmeansResult, MemoryFootprint};
use crate::mti::PruneCounts;
use crate::sched::{SchedulerCounters, TopologySource};
use crate::sem::IoStats;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigEcho {
    pub mode: String,
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub threads: usize,
    pub numa_nodes: usize,
    pub topology: TopologySource,
    pub threads_bound: bool,
    pub scheduler: String,
    pub pruning: bool,
    pub cache: bool,
    pub task_size: usize,
    pub page_size: usize,
    pub cache_bytes: usize,
    pub cache_interval: usize,
    pub init: String,
    pub seed: u64,
    pub max_iters: usize,
    pub tolerance: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Totals {
    pub iterations: usize,
    pub reassignments: u64,
    pub distance_computations: u64,
    pub pruned: PruneCounts,
    pub io: IoStats,
    pub scheduler: SchedulerCounters,
    pub tasks: u64,
    pub wall_secs: f64,
}

impl Totals {
    pub fn from_iterations(its: &[IterationStats]) -> Self {
        let mut t = Totals {
            iterations: its.len(),
            ..Default::default()
        };
        for s in its {
            t.reassignments += s.reassignments;
            t.distance_computations += s.distance_computations;
            t.pruned.add(&s.pruned);
            t.io.add(&s.io);
            t.scheduler.add(&s.scheduler);
            t.tasks += s.tasks;
            t.wall_secs += s.wall_secs;
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub converged: bool,
    pub final_wcss: f64,
    pub totals: Totals,
    pub memory: MemoryFootprint,
}

/// One line of a JSON-lines report.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "record", rename_all = "kebab-case")]
pub enum ReportLine<'a> {
    Config(&'a ConfigEcho),
    Iteration(&'a IterationStats),
    Summary(&'a Summary),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub config: ConfigEcho,
    pub iterations: Vec<IterationStats>,
    pub summary: Summary,
}

impl RunReport {
    pub fn new(mode: &str, n: usize, d: usize, cfg: &EngineConfig, r: &KmeansResult) -> Self {
        let config = ConfigEcho {
            mode: mode.to_string(),
            n,
            d,
            k: cfg.k,
            threads: cfg.threads,
            numa_nodes: r.topology.nodes,
            topology: r.topology.source,
            threads_bound: r.threads_bound,
            scheduler: cfg.scheduler.name().to_string(),
            pruning: cfg.pruning,
            cache: mode == "sem" && cfg.cache,
            task_size: cfg.task_size,
            page_size: cfg.page_size,
            cache_bytes: cfg.cache_bytes,
            cache_interval: cfg.cache_interval,
            init: cfg.init.name().to_string(),
            seed: cfg.seed,
            max_iters: cfg.max_iters,
            tolerance: cfg.tolerance,
        };
        let summary = Summary {
            converged: r.converged,
            final_wcss: r.iterations.last().map_or(0.0, |s| s.wcss),
            totals: Totals::from_iterations(&r.iterations),
            memory: r.memory,
        };
        Self {
            config,
            iterations: r.iterations.clone(),
            summary,
        }
    }

    /// Records in output order.
    pub fn lines(&self) -> impl Iterator<Item = ReportLine<'_>> {
        std::iter::once(ReportLine::Config(&self.config))
            .chain(self.iterations.iter().map(ReportLine::Iteration))
            .chain(std::iter::once(ReportLine::Summary(&self.summary)))
    }
}
