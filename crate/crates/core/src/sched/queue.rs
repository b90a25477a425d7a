use std::collections::VecDeque;
use std::ops::Range;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::topology::Topology;
use crate::error::{KnorError, Result};
use crate::partition::RowPartition;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchedulerPolicy {
    /// Own partition, then same-node peers, then remote nodes.
    Numa,
    /// Own partition, then any partition in worker order, ignoring nodes.
    Fifo,
    /// Own partition only.
    Static,
}

impl SchedulerPolicy {
    pub fn name(self) -> &'static str {
        match self {
            SchedulerPolicy::Numa => "numa",
            SchedulerPolicy::Fifo => "fifo",
            SchedulerPolicy::Static => "static",
        }
    }
}

/// A contiguous block of rows. `payload` carries whatever the worker needs
/// exclusive access to while processing the block.
#[derive(Debug)]
pub struct Task<P> {
    pub rows: Range<usize>,
    pub home_node: usize,
    pub owner: usize,
    pub payload: P,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerCounters {
    pub taken_local: u64,
    pub stolen_same_node: u64,
    pub stolen_remote: u64,
}

impl SchedulerCounters {
    pub fn dispensed(&self) -> u64 {
        self.taken_local + self.stolen_same_node + self.stolen_remote
    }

    pub fn add(&mut self, o: &SchedulerCounters) {
        self.taken_local += o.taken_local;
        self.stolen_same_node += o.stolen_same_node;
        self.stolen_remote += o.stolen_remote;
    }
}

#[derive(Debug, Clone, Copy)]
enum Source {
    Local,
    SameNode,
    Remote,
}

#[derive(Debug, Default)]
struct Counters {
    taken_local: AtomicU64,
    stolen_same_node: AtomicU64,
    stolen_remote: AtomicU64,
}

/// One task list per worker, each behind its own lock.
///
/// Counters are kept per *taking* worker.
#[derive(Debug)]
pub struct PartitionedTaskQueue<P> {
    partitions: Vec<Mutex<VecDeque<Task<P>>>>,
    counters: Vec<Counters>,
    node_of: Vec<usize>,
    policy: SchedulerPolicy,
    remaining: AtomicUsize,
}

impl<P> PartitionedTaskQueue<P> {
    pub fn new(topology: &Topology, policy: SchedulerPolicy) -> Self {
        let t = topology.workers;
        Self {
            partitions: (0..t).map(|_| Mutex::new(VecDeque::new())).collect(),
            counters: (0..t).map(|_| Counters::default()).collect(),
            node_of: topology.node_of.clone(),
            policy,
            remaining: AtomicUsize::new(0),
        }
    }

    pub fn workers(&self) -> usize {
        self.partitions.len()
    }

    pub fn policy(&self) -> SchedulerPolicy {
        self.policy
    }

    /// Tasks not yet dispensed.
    pub fn len(&self) -> usize {
        self.remaining.load(Ordering::Acquire)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tasks still sitting in partitions, counted under each partition's lock.
    /// Unlike [`len`](Self::len) this excludes tasks mid-pop.
    pub fn queued(&self) -> usize {
        self.partitions.iter().map(|p| p.lock().unwrap().len()).sum()
    }

    /// Splits each worker's rows into `task_size` blocks (ascending, last one
    /// possibly short) and queues them on that worker's partition.
    ///
    /// `payload` is called once per task in ascending row order. Returns the
    /// number of tasks queued.
    pub fn enqueue_iteration(
        &self,
        parts: &[RowPartition],
        task_size: usize,
        mut payload: impl FnMut(&Range<usize>) -> P,
    ) -> Result<usize> {
        if task_size == 0 {
            return Err(KnorError::config("task size must be at least 1"));
        }
        if parts.len() != self.partitions.len() {
            return Err(KnorError::config(format!(
                "{} row partitions for {} workers",
                parts.len(),
                self.partitions.len()
            )));
        }
        let pending = self.len();
        if pending != 0 {
            return Err(KnorError::QueueNotEmpty(pending));
        }
        let mut queued = 0;
        for (owner, part) in parts.iter().enumerate() {
            let mut q = self.partitions[owner].lock().unwrap();
            let mut start = part.rows.start;
            while start < part.rows.end {
                let end = (start + task_size).min(part.rows.end);
                let rows = start..end;
                let p = payload(&rows);
                q.push_back(Task {
                    rows,
                    home_node: part.node,
                    owner,
                    payload: p,
                });
                start = end;
                queued += 1;
            }
        }
        self.remaining.fetch_add(queued, Ordering::AcqRel);
        Ok(queued)
    }

    fn pop_from(&self, worker: usize, victim: usize, source: Source) -> Option<Task<P>> {
        let task = self.partitions[victim].lock().unwrap().pop_front()?;
        self.remaining.fetch_sub(1, Ordering::AcqRel);
        let c = &self.counters[worker];
        match source {
            Source::Local => &c.taken_local,
            Source::SameNode => &c.stolen_same_node,
            Source::Remote => &c.stolen_remote,
        }
        .fetch_add(1, Ordering::Relaxed);
        Some(task)
    }

    fn classify(&self, worker: usize, victim: usize) -> Source {
        if victim == worker {
            Source::Local
        } else if self.node_of[victim] == self.node_of[worker] {
            Source::SameNode
        } else {
            Source::Remote
        }
    }

    /// Next task for `worker` under the queue's policy; `None` only once every
    /// partition the policy may draw from is empty.
    pub fn next_task(&self, worker: usize) -> Option<Task<P>> {
        if let Some(t) = self.pop_from(worker, worker, Source::Local) {
            return Some(t);
        }
        let t = self.partitions.len();
        match self.policy {
            SchedulerPolicy::Static => None,
            SchedulerPolicy::Fifo => {
                for off in 1..t {
                    if self.is_empty() {
                        return None;
                    }
                    let victim = (worker + off) % t;
                    if let Some(task) = self.pop_from(worker, victim, self.classify(worker, victim)) {
                        return Some(task);
                    }
                }
                None
            }
            SchedulerPolicy::Numa => {
                let home = self.node_of[worker];
                for victim in (0..t).filter(|&v| v != worker && self.node_of[v] == home) {
                    if self.is_empty() {
                        return None;
                    }
                    if let Some(task) = self.pop_from(worker, victim, Source::SameNode) {
                        return Some(task);
                    }
                }
                // one cycle over remote partitions, taking a front task
                for off in 1..t {
                    let victim = (worker + off) % t;
                    if self.node_of[victim] == home {
                        continue;
                    }
                    if self.is_empty() {
                        return None;
                    }
                    if let Some(task) = self.pop_from(worker, victim, Source::Remote) {
                        return Some(task);
                    }
                }
                // anything left anywhere
                for victim in 0..t {
                    if self.is_empty() {
                        return None;
                    }
                    if let Some(task) = self.pop_from(worker, victim, self.classify(worker, victim)) {
                        return Some(task);
                    }
                }
                None
            }
        }
    }

    pub fn worker_counters(&self, worker: usize) -> SchedulerCounters {
        let c = &self.counters[worker];
        SchedulerCounters {
            taken_local: c.taken_local.load(Ordering::Relaxed),
            stolen_same_node: c.stolen_same_node.load(Ordering::Relaxed),
            stolen_remote: c.stolen_remote.load(Ordering::Relaxed),
        }
    }

    pub fn counters(&self) -> SchedulerCounters {
        let mut total = SchedulerCounters::default();
        for w in 0..self.partitions.len() {
            total.add(&self.worker_counters(w));
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::partition_rows;

    fn queue(t: usize, nodes: usize, policy: SchedulerPolicy) -> PartitionedTaskQueue<()> {
        PartitionedTaskQueue::new(&Topology::build(t, Some(nodes)), policy)
    }

    fn sizes(q: &PartitionedTaskQueue<()>, worker: usize) -> Vec<usize> {
        let mut out = Vec::new();
        while let Some(t) = q.next_task(worker) {
            out.push(t.rows.len());
        }
        out
    }

    #[test]
    fn default_task_size_one_task_per_partition() {
        let q = queue(2, 1, SchedulerPolicy::Numa);
        let parts = partition_rows(16384, 2, 1).unwrap();
        assert_eq!(q.enqueue_iteration(&parts, 8192, |_| ()).unwrap(), 2);
        let t = q.next_task(0).unwrap();
        assert_eq!(t.rows, 0..8192);
        assert_eq!(t.owner, 0);
    }

    #[test]
    fn short_last_block() {
        let q = queue(1, 1, SchedulerPolicy::Numa);
        q.enqueue_iteration(&partition_rows(10, 1, 1).unwrap(), 3, |_| ()).unwrap();
        assert_eq!(sizes(&q, 0), vec![3, 3, 3, 1]);
    }

    #[test]
    fn zero_rows_means_no_tasks() {
        let q = queue(2, 1, SchedulerPolicy::Numa);
        assert_eq!(q.enqueue_iteration(&partition_rows(0, 2, 1).unwrap(), 3, |_| ()).unwrap(), 0);
        assert!(q.next_task(0).is_none());
        assert!(q.next_task(1).is_none());
    }

    #[test]
    fn enqueue_rejects_non_empty_queue() {
        let q = queue(1, 1, SchedulerPolicy::Numa);
        let parts = partition_rows(10, 1, 1).unwrap();
        q.enqueue_iteration(&parts, 3, |_| ()).unwrap();
        assert!(matches!(
            q.enqueue_iteration(&parts, 3, |_| ()),
            Err(KnorError::QueueNotEmpty(4))
        ));
    }

    #[test]
    fn local_first() {
        let q = queue(2, 1, SchedulerPolicy::Numa);
        q.enqueue_iteration(&partition_rows(20, 2, 1).unwrap(), 5, |_| ()).unwrap();
        let t = q.next_task(1).unwrap();
        assert_eq!(t.owner, 1);
        assert_eq!(t.rows, 10..15);
        assert_eq!(q.worker_counters(1).taken_local, 1);
    }

    #[test]
    fn same_node_steal_preferred() {
        // workers 0,1 on node 0; 2,3 on node 1. Worker 0 drains its own
        // partition, then must steal from 1 before touching 2 or 3.
        let q = queue(4, 2, SchedulerPolicy::Numa);
        q.enqueue_iteration(&partition_rows(40, 4, 2).unwrap(), 5, |_| ()).unwrap();
        for _ in 0..2 {
            assert_eq!(q.next_task(0).unwrap().owner, 0);
        }
        let stolen = q.next_task(0).unwrap();
        assert_eq!(stolen.owner, 1);
        assert_eq!(stolen.rows, 10..15);
        assert_eq!(q.worker_counters(0).stolen_same_node, 1);
        assert_eq!(q.next_task(0).unwrap().owner, 1);
        // node 0 exhausted: remote steal takes a front task
        let remote = q.next_task(0).unwrap();
        assert_eq!(remote.owner, 2);
        assert_eq!(remote.rows, 20..25);
        assert_eq!(q.worker_counters(0).stolen_remote, 1);
    }

    #[test]
    fn static_never_steals() {
        let q = queue(2, 1, SchedulerPolicy::Static);
        q.enqueue_iteration(&partition_rows(20, 2, 1).unwrap(), 5, |_| ()).unwrap();
        assert_eq!(sizes(&q, 0), vec![5, 5]);
        assert_eq!(q.len(), 2);
        assert_eq!(q.counters().stolen_same_node + q.counters().stolen_remote, 0);
    }

    #[test]
    fn fifo_ignores_nodes() {
        // worker 1 (node 0) steals from worker 2 (node 1) before worker 0
        let q = queue(4, 2, SchedulerPolicy::Fifo);
        q.enqueue_iteration(&partition_rows(40, 4, 2).unwrap(), 10, |_| ()).unwrap();
        assert_eq!(q.next_task(1).unwrap().owner, 1);
        assert_eq!(q.next_task(1).unwrap().owner, 2);
        assert_eq!(q.worker_counters(1).stolen_remote, 1);
    }

    #[test]
    fn straggler_drained_exactly_once() {
        let q = queue(4, 2, SchedulerPolicy::Numa);
        let mut parts = partition_rows(0, 4, 2).unwrap();
        parts[3].rows = 0..100;
        q.enqueue_iteration(&parts, 10, |_| ()).unwrap();
        let mut seen = vec![0u32; 100];
        for w in (0..4).cycle() {
            match q.next_task(w) {
                Some(t) => t.rows.for_each(|r| seen[r] += 1),
                None => break,
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(q.counters().dispensed(), 10);
    }
}
