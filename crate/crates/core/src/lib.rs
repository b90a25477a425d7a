//! Single-machine parallel k-means with triangle-inequality pruning,
//! topology-aware work stealing and an out-of-core mode that streams rows
//! from disk through a page-granular row cache.

pub mod centroids;
pub mod distance;
pub mod engine;
pub mod error;
pub mod init;
pub mod matrix;
pub mod mti;
pub mod partition;
pub mod report;
pub mod sched;
pub mod sem;
pub mod synth;

pub use centroids::{assign_nearest, finalize_centroids, merge_accumulators, merge_in_place, CentroidSet, ThreadAccumulator};
pub use distance::{distance, euclidean_distance, squared_distance};
pub use engine::{
    fit, fit_observed, run_lloyd, run_lloyd_mti, run_lloyd_sem, run_with_scheduler, DataSource, EngineConfig,
    IterationStats, IterationView, KmeansResult, MemoryFootprint, DEFAULT_CACHE_BYTES, DEFAULT_TASK_SIZE,
};
pub use error::{KnorError, Result};
pub use init::{init_centroids, Init};
pub use matrix::{load_matrix, read_header, save_matrix, Layout, MatrixHeader, RowAccess, RowMatrix};
pub use mti::{
    assign_point_mti, clause1_skip, tighten_bound, update_bounds_after_move, CentroidGeometry, PruneCounts, PruneState,
    ScanOutcome,
};
pub use partition::{node_of_worker, partition_rows, RowPartition};
pub use report::{ConfigEcho, ReportLine, RunReport, Summary, Totals};
pub use sched::{PartitionedTaskQueue, SchedulerCounters, SchedulerPolicy, Task, Topology, TopologySource};
pub use sem::{fetch_rows, should_refresh, BlockDevice, CacheSchedule, FetchBuffer, IoStats, RowCache, RowStore};
pub use synth::{gen_synthetic, Family, SyntheticSpec};
