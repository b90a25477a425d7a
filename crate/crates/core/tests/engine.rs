use std::io;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use knor::{
    assign_nearest, fit, fit_observed, gen_synthetic, run_lloyd, run_lloyd_mti, run_lloyd_sem, save_matrix,
    BlockDevice, CentroidSet, DataSource, EngineConfig, Init, KnorError, Layout, RowMatrix, RowStore, SchedulerPolicy,
    SyntheticSpec,
};

fn cfg(k: usize) -> EngineConfig {
    EngineConfig {
        numa_nodes: Some(1),
        bind_threads: false,
        ..EngineConfig::new(k)
    }
}

/// Runs with an observer and returns the assignment vector of every iteration.
fn trace(source: DataSource<'_>, cfg: &EngineConfig) -> (Vec<Vec<u32>>, knor::KmeansResult) {
    let mut seen = Vec::new();
    let r = fit_observed(source, cfg, &mut |v| seen.push(v.assignments.to_vec())).unwrap();
    (seen, r)
}

fn linf(a: &CentroidSet, b: &CentroidSet) -> f64 {
    a.max_abs_diff(b)
}

fn to_store(m: &RowMatrix, dir: &tempfile::TempDir, page: usize) -> RowStore {
    let path = dir.path().join("rows.bin");
    save_matrix(m, &path, Layout::Raw).unwrap();
    RowStore::open_raw(&path, m.n(), m.d(), page).unwrap()
}

#[test]
fn pruned_matches_exhaustive_every_iteration() {
    for (seed, k) in [(1, 3), (2, 9), (3, 20)] {
        let m = gen_synthetic(&SyntheticSpec::gaussian(3000, 5, 6, 4.0, seed)).unwrap();
        let c = EngineConfig { seed, max_iters: 40, ..cfg(k) };
        let plain = EngineConfig { pruning: false, ..c.clone() };
        let (a, ra) = trace(DataSource::InMemory(&m), &plain);
        let (b, rb) = trace(DataSource::InMemory(&m), &c);
        assert_eq!(a, b, "seed {seed} k {k}");
        assert!(linf(&ra.centroids, &rb.centroids) <= 1e-9);
        for (x, y) in ra.iterations.iter().zip(&rb.iterations) {
            assert_eq!(x.reassignments, y.reassignments);
            assert!((x.wcss - y.wcss).abs() <= 1e-9 * x.wcss.max(1.0));
        }
    }
}

#[test]
fn final_assignment_is_nearest_centroid_of_previous_step() {
    let m = gen_synthetic(&SyntheticSpec::uniform(2000, 3, 5)).unwrap();
    let mut checked = 0;
    fit_observed(DataSource::InMemory(&m), &EngineConfig { max_iters: 15, ..cfg(6) }, &mut |v| {
        for (i, row) in m.rows().enumerate() {
            assert_eq!(v.assignments[i] as usize, assign_nearest(row, v.centroids_used).0);
        }
        checked += 1;
    })
    .unwrap();
    assert!(checked > 1);
}

#[test]
fn upper_bounds_stay_valid() {
    let m = gen_synthetic(&SyntheticSpec::gaussian(4000, 4, 5, 3.0, 8)).unwrap();
    fit_observed(DataSource::InMemory(&m), &EngineConfig { max_iters: 30, ..cfg(7) }, &mut |v| {
        let upper = v.upper.unwrap();
        let tight = v.tight.unwrap();
        for (i, row) in m.rows().enumerate() {
            let a = v.assignments[i] as usize;
            let true_d = knor::distance(row, v.centroids_next.mean(a));
            assert!(true_d <= upper[i] * (1.0 + 1e-12) + 1e-12, "row {i}");
            if tight[i] {
                assert!((true_d - upper[i]).abs() <= 1e-12 * true_d.max(1.0));
            }
        }
    })
    .unwrap();
}

#[test]
fn thread_count_and_policy_do_not_change_results() {
    let m = gen_synthetic(&SyntheticSpec::gaussian(5000, 6, 4, 5.0, 21)).unwrap();
    let base = EngineConfig { task_size: 300, max_iters: 30, ..cfg(5) };
    let (a1, r1) = trace(DataSource::InMemory(&m), &base);
    for threads in [2, 3, 4, 8] {
        for policy in [SchedulerPolicy::Numa, SchedulerPolicy::Fifo, SchedulerPolicy::Static] {
            let c = EngineConfig {
                threads,
                numa_nodes: Some(2),
                scheduler: policy,
                ..base.clone()
            };
            let (a, r) = trace(DataSource::InMemory(&m), &c);
            assert_eq!(a, a1, "T={threads} {policy:?}");
            assert!(linf(&r.centroids, &r1.centroids) <= 1e-9);
            let s = r.total_scheduler();
            assert_eq!(s.dispensed(), r.iterations.iter().map(|i| i.tasks).sum::<u64>());
            if policy == SchedulerPolicy::Static {
                assert_eq!(s.stolen_same_node + s.stolen_remote, 0);
            }
        }
    }
}

#[test]
fn task_size_does_not_change_results() {
    let m = gen_synthetic(&SyntheticSpec::uniform(3000, 4, 2)).unwrap();
    let (a, r) = trace(DataSource::InMemory(&m), &EngineConfig { max_iters: 20, ..cfg(6) });
    for ts in [1, 7, 1000, 100_000] {
        let c = EngineConfig {
            task_size: ts,
            threads: 3,
            max_iters: 20,
            ..cfg(6)
        };
        let (b, rb) = trace(DataSource::InMemory(&m), &c);
        assert_eq!(a, b, "task size {ts}");
        assert!(linf(&r.centroids, &rb.centroids) <= 1e-9);
    }
}

#[test]
fn out_of_core_matches_in_memory() {
    let m = gen_synthetic(&SyntheticSpec::gaussian(6000, 8, 6, 4.0, 31)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let store = to_store(&m, &dir, 4096);
    let data = 6000 * 8 * 8;
    let base = EngineConfig {
        max_iters: 25,
        threads: 2,
        cache_interval: 2,
        ..cfg(6)
    };
    let (want, rwant) = trace(DataSource::InMemory(&m), &base);
    for pruning in [true, false] {
        for cache_bytes in [0, data / 4, data] {
            let c = EngineConfig {
                pruning,
                cache: cache_bytes > 0,
                cache_bytes,
                ..base.clone()
            };
            let (got, r) = trace(DataSource::Sem(&store), &c);
            assert_eq!(got, want, "pruning {pruning} cache {cache_bytes}");
            assert!(linf(&r.centroids, &rwant.centroids) <= 1e-9);
            if !pruning {
                for s in &r.iterations {
                    assert_eq!(s.io.bytes_requested, data as u64);
                    assert_eq!(s.io.rows_elided, 0);
                }
            }
            if cache_bytes == 0 {
                assert!(r.iterations.iter().all(|s| s.io.cache_hits == 0));
            }
        }
    }
}

#[test]
fn elided_rows_keep_the_exhaustive_assignment() {
    let m = gen_synthetic(&SyntheticSpec::gaussian(4000, 4, 4, 8.0, 4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let store = to_store(&m, &dir, 4096);
    let mut elided = 0;
    fit_observed(DataSource::Sem(&store), &EngineConfig { max_iters: 20, ..cfg(4) }, &mut |v| {
        elided += v.stats.io.rows_elided;
        for (i, row) in m.rows().enumerate() {
            assert_eq!(v.assignments[i] as usize, assign_nearest(row, v.centroids_used).0);
        }
    })
    .unwrap();
    assert!(elided > 0);
}

/// In-memory device that counts every byte handed out.
struct CountingDevice {
    bytes: Vec<u8>,
    read: Arc<AtomicU64>,
    fail_after: Option<u64>,
    failed: Arc<AtomicBool>,
}

impl BlockDevice for CountingDevice {
    fn len(&self) -> u64 {
        self.bytes.len() as u64
    }

    fn read_at(&self, offset: u64, buf: &mut [u8]) -> io::Result<()> {
        let so_far = self.read.fetch_add(buf.len() as u64, Ordering::SeqCst);
        if let Some(limit) = self.fail_after {
            if so_far >= limit {
                self.failed.store(true, Ordering::SeqCst);
                return Err(io::Error::other("injected failure"));
            }
        }
        let o = offset as usize;
        buf.copy_from_slice(&self.bytes[o..o + buf.len()]);
        Ok(())
    }
}

fn counting_store(m: &RowMatrix, page: usize, fail_after: Option<u64>) -> (RowStore, Arc<AtomicU64>, Arc<AtomicBool>) {
    let bytes: Vec<u8> = m.values().iter().flat_map(|x| x.to_le_bytes()).collect();
    let read = Arc::new(AtomicU64::new(0));
    let failed = Arc::new(AtomicBool::new(false));
    let dev = CountingDevice {
        bytes,
        read: read.clone(),
        fail_after,
        failed: failed.clone(),
    };
    let store = RowStore::with_device(Box::new(dev), "counting", m.n(), m.d(), page, 0).unwrap();
    (store, read, failed)
}

#[test]
fn bytes_read_equals_device_traffic() {
    // 4096 rows of 32 bytes = 32 pages of 4096 bytes exactly, so no short tail
    let m = gen_synthetic(&SyntheticSpec::gaussian(4096, 4, 4, 6.0, 12)).unwrap();
    let given = Init::Given(m.values()[..4 * 4].to_vec());
    for (pruning, cache) in [(false, false), (true, false), (true, true)] {
        let (store, read, _) = counting_store(&m, 4096, None);
        let c = EngineConfig {
            pruning,
            cache,
            cache_bytes: 4096 * 16,
            cache_interval: 1,
            init: given.clone(),
            threads: 2,
            task_size: 100,
            max_iters: 30,
            ..cfg(4)
        };
        let mut last = 0;
        fit_observed(DataSource::Sem(&store), &c, &mut |v| {
            let now = read.load(Ordering::SeqCst);
            assert_eq!(now - last, v.stats.io.bytes_read + v.stats.io.cache_fill_bytes);
            assert!(v.stats.io.bytes_read + v.stats.io.cache_hits * 32 >= v.stats.io.bytes_requested);
            last = now;
        })
        .unwrap();
    }
}

#[test]
fn io_failure_reports_iteration() {
    let m = gen_synthetic(&SyntheticSpec::uniform(4096, 4, 1)).unwrap();
    let (store, _, failed) = counting_store(&m, 4096, Some(3 * 4096 * 32));
    let c = EngineConfig {
        pruning: false,
        cache: false,
        init: Init::Given(m.values()[..8].to_vec()),
        max_iters: 50,
        ..cfg(2)
    };
    let err = run_lloyd_sem(&store, &c).unwrap_err();
    assert!(failed.load(Ordering::SeqCst));
    match err {
        KnorError::Iteration { iteration, source } => {
            assert!(iteration >= 2, "failed at {iteration}");
            assert!(matches!(*source, KnorError::ShortRead { .. }));
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn recovers_well_separated_pair() {
    let spec = SyntheticSpec::gaussian(2000, 2, 2, 20.0, 5);
    let m = gen_synthetic(&spec).unwrap();
    let centers = knor::synth::gaussian_centers(&spec).unwrap();
    let r = run_lloyd_mti(&m, &EngineConfig { init: Init::KmeansPlusPlus, ..cfg(2) }).unwrap();
    assert!(r.converged);
    for c in 0..2 {
        let mean = r.centroids.mean(c);
        let best = (0..2)
            .map(|j| knor::distance(mean, &centers[j * 2..j * 2 + 2]))
            .fold(f64::INFINITY, f64::min);
        // sample mean of 1000 unit-variance points: error ~ 0.03 per coordinate
        assert!(best < 0.2, "centroid {c} off by {best}");
    }
    // generator deals points round-robin, so clusters alternate
    assert_ne!(r.assignments[0], r.assignments[1]);
    assert!(r.assignments.iter().step_by(2).all(|&a| a == r.assignments[0]));
}

#[test]
fn wcss_never_increases() {
    let m = gen_synthetic(&SyntheticSpec::uniform(5000, 3, 77)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let store = to_store(&m, &dir, 4096);
    let base = EngineConfig { max_iters: 40, ..cfg(12) };
    let runs = [
        run_lloyd(&m, &base).unwrap(),
        run_lloyd_mti(&m, &base).unwrap(),
        run_lloyd_sem(&store, &base).unwrap(),
    ];
    for r in &runs {
        for w in r.iterations.windows(2) {
            assert!(w[1].wcss <= w[0].wcss * (1.0 + 1e-9), "{} -> {}", w[0].wcss, w[1].wcss);
        }
    }
}

#[test]
fn k_larger_than_n_is_rejected() {
    let m = RowMatrix::from_rows(&[[1.0], [2.0]]).unwrap();
    assert!(matches!(fit(DataSource::InMemory(&m), &cfg(3)), Err(KnorError::InvalidConfig(_))));
}

#[test]
fn more_threads_than_rows() {
    let m = RowMatrix::from_rows(&[[0.0], [1.0], [10.0]]).unwrap();
    let c = EngineConfig {
        threads: 8,
        init: Init::Given(vec![0.0, 10.0]),
        ..cfg(2)
    };
    let r = run_lloyd_mti(&m, &c).unwrap();
    assert_eq!(r.assignments, vec![0, 0, 1]);
    assert_eq!(r.centroids.means, vec![0.5, 10.0]);
}

#[test]
fn memory_accounting_follows_the_state_sizes() {
    let (n, d, k, t) = (20_000, 4, 5, 2);
    let m = gen_synthetic(&SyntheticSpec::uniform(n, d, 3)).unwrap();
    let c = EngineConfig { threads: t, max_iters: 3, ..cfg(k) };
    let r = run_lloyd_mti(&m, &c).unwrap();
    assert_eq!(r.memory.data, n * d * 8);
    assert_eq!(r.memory.point_state, 13 * n);
    let plain = run_lloyd(&m, &c).unwrap();
    assert_eq!(plain.memory.point_state, 4 * n);
    assert_eq!(plain.memory.geometry, 0);

    let dir = tempfile::tempdir().unwrap();
    let store = to_store(&m, &dir, 4096);
    let r = run_lloyd_sem(&store, &c).unwrap();
    assert_eq!(r.memory.data, 0);
    assert_eq!(r.memory.point_state, 14 * n);
}
