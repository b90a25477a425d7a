//! Topology-aware task scheduling.
//!
//! Each worker owns a partition of the task queue holding the row blocks it
//! is responsible for. Idle workers steal whole tasks, preferring peers bound
//! to the same NUMA node.

mod queue;
mod topology;

pub use queue::{PartitionedTaskQueue, SchedulerCounters, SchedulerPolicy, Task};
pub use topology::{parse_cpulist, Topology, TopologySource, NODES_ENV};
