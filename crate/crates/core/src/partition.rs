use std::ops::Range;

use crate::error::{KnorError, Result};

/// A contiguous block of rows owned by one worker, living on `node`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowPartition {
    pub rows: Range<usize>,
    pub node: usize,
}

/// Index of the node hosting `worker` when `workers` are dealt to `nodes` in
/// contiguous blocks, lower nodes absorbing the remainder.
pub fn node_of_worker(worker: usize, workers: usize, nodes: usize) -> usize {
    let per = workers / nodes;
    let extra = workers % nodes;
    let big = extra * (per + 1);
    if worker < big {
        worker / (per + 1)
    } else {
        extra + (worker - big) / per
    }
}

/// Splits `[0, n)` into `threads` contiguous ranges whose sizes differ by at
/// most one (the first `n % threads` ranges get the extra row).
pub fn partition_rows(n: usize, threads: usize, nodes: usize) -> Result<Vec<RowPartition>> {
    if threads == 0 || nodes == 0 {
        return Err(KnorError::config("partitioning needs at least one thread and one node"));
    }
    if threads < nodes {
        return Err(KnorError::config(format!(
            "{threads} threads cannot cover {nodes} nodes"
        )));
    }
    let base = n / threads;
    let extra = n % threads;
    let mut start = 0;
    Ok((0..threads)
        .map(|t| {
            let len = base + usize::from(t < extra);
            let rows = start..start + len;
            start += len;
            RowPartition {
                rows,
                node: node_of_worker(t, threads, nodes),
            }
        })
        .collect())
}
