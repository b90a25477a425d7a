use serde::{Deserialize, Serialize};

use super::cache::RowCache;
use super::store::{decode_into, RowStore};
use crate::error::{KnorError, Result};

/// I/O counters for one iteration (or a whole run, once summed).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoStats {
    /// Row bytes asked for, whether served from cache or disk.
    pub bytes_requested: u64,
    /// `page_size` times the number of distinct uncached pages read.
    pub bytes_read: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    /// Rows whose fetch was skipped because clause 1 held.
    pub rows_elided: u64,
    /// Page bytes read while repopulating the row cache.
    pub cache_fill_bytes: u64,
}

impl IoStats {
    pub fn add(&mut self, o: &IoStats) {
        self.bytes_requested += o.bytes_requested;
        self.bytes_read += o.bytes_read;
        self.cache_hits += o.cache_hits;
        self.cache_misses += o.cache_misses;
        self.rows_elided += o.rows_elided;
        self.cache_fill_bytes += o.cache_fill_bytes;
    }

    /// Hits over all fetched rows; `None` when nothing was fetched.
    pub fn hit_rate(&self) -> Option<f64> {
        let total = self.cache_hits + self.cache_misses;
        (total > 0).then(|| self.cache_hits as f64 / total as f64)
    }
}

/// Reusable per-worker buffers for [`fetch_rows`].
#[derive(Debug, Default)]
pub struct FetchBuffer {
    /// Fetched rows, in the order of the requested ids.
    pub values: Vec<f64>,
    miss_pos: Vec<usize>,
    miss_ids: Vec<usize>,
    miss_values: Vec<f64>,
    bytes: Vec<u8>,
}

impl FetchBuffer {
    pub fn row(&self, pos: usize, d: usize) -> &[f64] {
        &self.values[pos * d..(pos + 1) * d]
    }

    pub fn resident_bytes(&self) -> usize {
        8 * (self.values.capacity()
            + self.miss_pos.capacity()
            + self.miss_ids.capacity()
            + self.miss_values.capacity())
            + self.bytes.capacity()
    }
}

/// Reads rows `ids` (strictly ascending) into `buf.values`.
///
/// Cached rows are copied from `cache`; the rest are read page-wise, with
/// runs of adjacent pages coalesced into single reads.
pub fn fetch_rows(
    store: &RowStore,
    ids: &[usize],
    cache: &RowCache,
    stats: &mut IoStats,
    buf: &mut FetchBuffer,
) -> Result<()> {
    let d = store.d();
    check_ids(store, ids)?;
    buf.values.resize(ids.len() * d, 0.0);
    buf.miss_pos.clear();
    buf.miss_ids.clear();
    for (pos, &id) in ids.iter().enumerate() {
        match cache.get(id) {
            Some(row) => {
                buf.values[pos * d..(pos + 1) * d].copy_from_slice(row);
                stats.cache_hits += 1;
            }
            None => {
                buf.miss_pos.push(pos);
                buf.miss_ids.push(id);
            }
        }
    }
    stats.bytes_requested += (ids.len() * store.row_bytes()) as u64;
    stats.cache_misses += buf.miss_ids.len() as u64;
    if buf.miss_ids.is_empty() {
        return Ok(());
    }
    buf.miss_values.resize(buf.miss_ids.len() * d, 0.0);
    read_rows_uncached(store, &buf.miss_ids, &mut buf.miss_values, stats, &mut buf.bytes)?;
    for (j, &pos) in buf.miss_pos.iter().enumerate() {
        buf.values[pos * d..(pos + 1) * d].copy_from_slice(&buf.miss_values[j * d..(j + 1) * d]);
    }
    Ok(())
}

fn check_ids(store: &RowStore, ids: &[usize]) -> Result<()> {
    if let Some(&last) = ids.last() {
        if last >= store.n() {
            return Err(KnorError::RowOutOfRange {
                row: last,
                n: store.n(),
            });
        }
    }
    if ids.windows(2).any(|w| w[0] >= w[1]) {
        return Err(KnorError::config("row ids must be strictly ascending"));
    }
    Ok(())
}

/// Page-wise read of ascending `ids` into `out` (`ids.len() * d` values).
/// Only `bytes_read` is updated.
pub(crate) fn read_rows_uncached(
    store: &RowStore,
    ids: &[usize],
    out: &mut [f64],
    stats: &mut IoStats,
    scratch: &mut Vec<u8>,
) -> Result<()> {
    let d = store.d();
    let w = store.row_bytes();
    let page = store.page_size();
    let mut first = 0; // index into ids of the current run's first row
    while first < ids.len() {
        let run_start = *store.pages_of_row(ids[first]).start();
        let mut run_end = *store.pages_of_row(ids[first]).end();
        let mut last = first + 1;
        while last < ids.len() {
            let pages = store.pages_of_row(ids[last]);
            if *pages.start() > run_end + 1 {
                break;
            }
            run_end = run_end.max(*pages.end());
            last += 1;
        }
        let count = run_end - run_start + 1;
        store.read_pages(run_start, count, scratch)?;
        stats.bytes_read += count * page as u64;
        let base = run_start as usize * page;
        for j in first..last {
            let off = ids[j] * w - base;
            decode_into(&scratch[off..off + w], &mut out[j * d..(j + 1) * d]);
        }
        first = last;
    }
    Ok(())
}
