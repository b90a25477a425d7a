//! Out-of-core execution support: rows stay on disk and are read page-wise,
//! with a lazily refreshed, per-worker-partitioned row cache in front.

mod cache;
mod fetch;
mod store;

pub use cache::{should_refresh, CacheSchedule, RowCache, DEFAULT_CACHE_INTERVAL};
pub use fetch::{fetch_rows, FetchBuffer, IoStats};
pub use store::{BlockDevice, FileDevice, RowStore, DEFAULT_PAGE_SIZE};
