use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::fetch::{read_rows_uncached, IoStats};
use super::store::RowStore;
use crate::error::{KnorError, Result};
use crate::matrix::ELEM_BYTES;
use crate::partition::RowPartition;

pub const DEFAULT_CACHE_INTERVAL: usize = 5;

/// When the row cache is rebuilt: at iteration `I`, then after gaps of
/// `2I`, `4I`, ... (iterations `I, 3I, 7I, 15I, ...`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheSchedule {
    pub interval: usize,
}

impl Default for CacheSchedule {
    fn default() -> Self {
        Self {
            interval: DEFAULT_CACHE_INTERVAL,
        }
    }
}

impl CacheSchedule {
    pub fn new(interval: usize) -> Result<Self> {
        if interval == 0 {
            return Err(KnorError::config("cache interval must be at least 1"));
        }
        Ok(Self { interval })
    }
}

pub fn should_refresh(iter: usize, sched: &CacheSchedule) -> bool {
    let i = sched.interval;
    iter >= i && iter.is_multiple_of(i) && (iter / i + 1).is_power_of_two()
}

#[derive(Debug, Default)]
struct CachePartition {
    rows: Range<usize>,
    ids: Vec<usize>,
    values: Vec<f64>,
}

impl CachePartition {
    fn get(&self, id: usize, d: usize) -> Option<&[f64]> {
        let pos = self.ids.binary_search(&id).ok()?;
        Some(&self.values[pos * d..(pos + 1) * d])
    }
}

/// Row-granular cache split into one partition per worker. A partition only
/// holds rows from its owner's range and is only written by its owner, at
/// refresh time; between refreshes the whole cache is read-only.
#[derive(Debug)]
pub struct RowCache {
    d: usize,
    capacity_bytes: usize,
    partitions: Vec<CachePartition>,
    /// First row of each partition, for owner lookup.
    starts: Vec<usize>,
}

impl RowCache {
    pub fn new(parts: &[RowPartition], d: usize, capacity_bytes: usize) -> Self {
        Self {
            d,
            capacity_bytes,
            partitions: parts
                .iter()
                .map(|p| CachePartition {
                    rows: p.rows.clone(),
                    ..Default::default()
                })
                .collect(),
            starts: parts.iter().map(|p| p.rows.start).collect(),
        }
    }

    /// A cache that never holds anything.
    pub fn disabled(parts: &[RowPartition], d: usize) -> Self {
        Self::new(parts, d, 0)
    }

    pub fn capacity_bytes(&self) -> usize {
        self.capacity_bytes
    }

    /// Rows each partition may hold.
    pub fn rows_per_partition(&self) -> usize {
        let share = self.capacity_bytes / self.partitions.len().max(1);
        share / (self.d * ELEM_BYTES)
    }

    pub fn len(&self) -> usize {
        self.partitions.iter().map(|p| p.ids.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cached_bytes(&self) -> usize {
        self.len() * self.d * ELEM_BYTES
    }

    pub fn resident_bytes(&self) -> usize {
        self.partitions
            .iter()
            .map(|p| 8 * (p.ids.capacity() + p.values.capacity()))
            .sum()
    }

    #[inline]
    pub fn get(&self, id: usize) -> Option<&[f64]> {
        if self.capacity_bytes == 0 {
            return None;
        }
        let part = self.starts.partition_point(|&s| s <= id).checked_sub(1)?;
        // several empty partitions can share a start; walk back to the owner
        let owner = self.partitions[..=part]
            .iter()
            .rposition(|p| p.rows.contains(&id))?;
        self.partitions[owner].get(id, self.d)
    }

    /// Flushes every partition and refills it with its owner's active rows in
    /// ascending id order, up to the partition's share of the capacity.
    ///
    /// Partitions are filled concurrently, one thread per owner. Bytes read to
    /// fill the cache are reported in `stats.cache_fill_bytes`.
    pub fn refresh(&mut self, active: &[bool], store: &RowStore, stats: &mut IoStats) -> Result<()> {
        let limit = self.rows_per_partition();
        let d = self.d;
        let results: Vec<Result<IoStats>> = std::thread::scope(|s| {
            let handles: Vec<_> = self
                .partitions
                .iter_mut()
                .map(|part| {
                    s.spawn(move || -> Result<IoStats> {
                        part.ids.clear();
                        part.values.clear();
                        if limit == 0 {
                            part.ids.shrink_to_fit();
                            part.values.shrink_to_fit();
                            return Ok(IoStats::default());
                        }
                        part.ids.extend(
                            part.rows
                                .clone()
                                .filter(|&i| active[i])
                                .take(limit),
                        );
                        part.values.resize(part.ids.len() * d, 0.0);
                        let mut fill = IoStats::default();
                        let mut scratch = Vec::new();
                        read_rows_uncached(store, &part.ids, &mut part.values, &mut fill, &mut scratch)?;
                        Ok(fill)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        for r in results {
            stats.cache_fill_bytes += r?.bytes_read;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doubling_gaps() {
        let s = CacheSchedule::new(5).unwrap();
        let hits: Vec<usize> = (1..=80).filter(|&i| should_refresh(i, &s)).collect();
        assert_eq!(hits, vec![5, 15, 35, 75]);
        assert!(!should_refresh(10, &s));
        assert!(!should_refresh(20, &s));
        assert!(!should_refresh(3, &s));
    }

    #[test]
    fn unit_interval() {
        let s = CacheSchedule::new(1).unwrap();
        let hits: Vec<usize> = (1..=16).filter(|&i| should_refresh(i, &s)).collect();
        assert_eq!(hits, vec![1, 3, 7, 15]);
    }

    #[test]
    fn zero_interval_rejected() {
        assert!(CacheSchedule::new(0).is_err());
        assert_eq!(CacheSchedule::default().interval, 5);
    }
}
