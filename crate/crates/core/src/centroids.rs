//! Centroid state, per-thread accumulators and the merge/finalize steps of a
//! Lloyd's iteration.

use crate::distance::{distance, squared_distance};
use crate::error::{KnorError, Result};

/// The `k` centroids of one iteration plus where they were one step earlier.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    k: usize,
    d: usize,
    pub means: Vec<f64>,
    pub prev_means: Vec<f64>,
    /// Members per centroid as of the last finalize.
    pub counts: Vec<u64>,
    /// Distance each centroid moved in the last finalize.
    pub drift: Vec<f64>,
}

impl CentroidSet {
    /// Builds a set from `k x d` means with zero counts and zero drift.
    pub fn from_means(k: usize, d: usize, means: Vec<f64>) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(KnorError::config("centroid set needs k >= 1 and d >= 1"));
        }
        if means.len() != k * d {
            return Err(KnorError::DimensionMismatch {
                expected: k * d,
                actual: means.len(),
            });
        }
        if let Some(pos) = means.iter().position(|v| !v.is_finite()) {
            return Err(KnorError::NonFinite {
                row: pos / d,
                col: pos % d,
            });
        }
        Ok(Self {
            k,
            d,
            prev_means: means.clone(),
            means,
            counts: vec![0; k],
            drift: vec![0.0; k],
        })
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn mean(&self, c: usize) -> &[f64] {
        &self.means[c * self.d..(c + 1) * self.d]
    }

    pub fn prev_mean(&self, c: usize) -> &[f64] {
        &self.prev_means[c * self.d..(c + 1) * self.d]
    }

    pub fn resident_bytes(&self) -> usize {
        8 * (self.means.capacity()
            + self.prev_means.capacity()
            + self.counts.capacity()
            + self.drift.capacity())
    }

    /// Largest absolute coordinate difference between two sets' means.
    pub fn max_abs_diff(&self, other: &CentroidSet) -> f64 {
        self.means
            .iter()
            .zip(&other.means)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Nearest centroid by exhaustive scan; ties go to the lowest id.
#[inline]
pub fn assign_nearest(v: &[f64], c: &CentroidSet) -> (usize, f64) {
    let (id, sq) = nearest_squared(v, c);
    (id, sq.sqrt())
}

/// Like [`assign_nearest`] but returns the squared distance.
#[inline]
pub(crate) fn nearest_squared(v: &[f64], c: &CentroidSet) -> (usize, f64) {
    let mut best = f64::INFINITY;
    let mut id = 0;
    for (x, mean) in c.means.chunks_exact(c.d).enumerate() {
        let dd = squared_distance(v, mean);
        if dd < best {
            best = dd;
            id = x;
        }
    }
    (id, best)
}

/// Per-worker running sums for the next iteration's centroids.
///
/// Counts are signed so the same type can carry add/remove deltas; an
/// accumulator that has only seen `add` keeps non-negative counts and an
/// all-zero sum row wherever its count is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ThreadAccumulator {
    k: usize,
    d: usize,
    pub sums: Vec<f64>,
    pub counts: Vec<i64>,
    pub owner: usize,
}

impl ThreadAccumulator {
    pub fn new(k: usize, d: usize, owner: usize) -> Self {
        Self {
            k,
            d,
            sums: vec![0.0; k * d],
            counts: vec![0; k],
            owner,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn add(&mut self, c: usize, v: &[f64]) {
        for (s, x) in self.sums[c * self.d..(c + 1) * self.d].iter_mut().zip(v) {
            *s += x;
        }
        self.counts[c] += 1;
    }

    #[inline]
    pub fn remove(&mut self, c: usize, v: &[f64]) {
        for (s, x) in self.sums[c * self.d..(c + 1) * self.d].iter_mut().zip(v) {
            *s -= x;
        }
        self.counts[c] -= 1;
    }

    pub fn absorb(&mut self, other: &ThreadAccumulator) {
        debug_assert_eq!((self.k, self.d), (other.k, other.d));
        for (s, o) in self.sums.iter_mut().zip(&other.sums) {
            *s += o;
        }
        for (c, o) in self.counts.iter_mut().zip(&other.counts) {
            *c += o;
        }
    }

    pub fn reset(&mut self) {
        self.sums.fill(0.0);
        self.counts.fill(0);
    }

    pub fn total_count(&self) -> i64 {
        self.counts.iter().sum()
    }

    pub fn sum_row(&self, c: usize) -> &[f64] {
        &self.sums[c * self.d..(c + 1) * self.d]
    }

    pub fn resident_bytes(&self) -> usize {
        8 * (self.sums.capacity() + self.counts.capacity())
    }
}

/// Below this many summed elements a merge round runs on the calling thread.
const PAR_MERGE_MIN: usize = 1 << 16;

/// Pairwise tree reduction in place: after the call `accs[0]` holds the total.
///
/// Round `r` adds slot `i + 2^r` into slot `i` for every `i` divisible by
/// `2^(r+1)`, so the floating-point order depends only on `accs.len()`.
/// Pairs within a round are summed concurrently when the work is large.
pub fn merge_in_place(accs: &mut [ThreadAccumulator]) -> Result<()> {
    if accs.is_empty() {
        return Err(KnorError::EmptyMerge);
    }
    let (k, d) = (accs[0].k, accs[0].d);
    if let Some(bad) = accs.iter().find(|a| (a.k, a.d) != (k, d)) {
        return Err(KnorError::DimensionMismatch {
            expected: k * d,
            actual: bad.k * bad.d,
        });
    }
    let mut stride = 1;
    while stride < accs.len() {
        let pairs: Vec<(&mut ThreadAccumulator, &ThreadAccumulator)> = accs
            .chunks_mut(2 * stride)
            .filter(|g| g.len() > stride)
            .map(|g| {
                let (lo, hi) = g.split_at_mut(stride);
                (&mut lo[0], &hi[0])
            })
            .collect();
        if pairs.len() > 1 && pairs.len() * k * d >= PAR_MERGE_MIN {
            std::thread::scope(|s| {
                for (dst, src) in pairs {
                    s.spawn(move || dst.absorb(src));
                }
            });
        } else {
            for (dst, src) in pairs {
                dst.absorb(src);
            }
        }
        stride *= 2;
    }
    Ok(())
}

/// Merges accumulators ordered by ascending owner id into one.
pub fn merge_accumulators(mut accs: Vec<ThreadAccumulator>) -> Result<ThreadAccumulator> {
    accs.sort_by_key(|a| a.owner);
    merge_in_place(&mut accs)?;
    Ok(accs.swap_remove(0))
}

/// Turns merged sums into the next centroid set.
///
/// Empty clusters keep their previous position (and so report zero drift).
pub fn finalize_centroids(merged: &ThreadAccumulator, prev: &CentroidSet) -> CentroidSet {
    let (k, d) = (prev.k, prev.d);
    let mut means = prev.means.clone();
    let mut counts = vec![0u64; k];
    let mut drift = vec![0.0; k];
    for c in 0..k {
        let count = merged.counts[c];
        counts[c] = count.max(0) as u64;
        if count > 0 {
            let inv = count as f64;
            for (m, s) in means[c * d..(c + 1) * d].iter_mut().zip(merged.sum_row(c)) {
                *m = s / inv;
            }
        }
        drift[c] = distance(&means[c * d..(c + 1) * d], prev.mean(c));
    }
    CentroidSet {
        k,
        d,
        means,
        prev_means: prev.means.clone(),
        counts,
        drift,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(k: usize, d: usize, means: &[f64]) -> CentroidSet {
        CentroidSet::from_means(k, d, means.to_vec()).unwrap()
    }

    #[test]
    fn tie_goes_to_lowest_id() {
        let c = set(2, 1, &[-1.0, 1.0]);
        assert_eq!(assign_nearest(&[0.0], &c), (0, 1.0));
    }

    #[test]
    fn nearest_simple() {
        let c = set(2, 1, &[0.0, 1.0]);
        let (id, dist) = assign_nearest(&[0.9], &c);
        assert_eq!(id, 1);
        assert!((dist - 0.1).abs() < 1e-12);
    }

    #[test]
    fn nearest_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 3;
        let means: Vec<f64> = (0..5 * d).map(|_| rng.random_range(-5.0..5.0)).collect();
        let c = set(5, d, &means);
        for _ in 0..100 {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-6.0..6.0)).collect();
            let dists: Vec<f64> = (0..5)
                .map(|x| {
                    (0..d)
                        .map(|j| (v[j] - means[x * d + j]).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            let mut want = 0;
            for x in 1..5 {
                if dists[x] < dists[want] {
                    want = x;
                }
            }
            let (got, dist) = assign_nearest(&v, &c);
            assert_eq!(got, want);
            assert!((dist - dists[want]).abs() < 1e-12);
        }
    }

    #[test]
    fn merge_single_is_identity() {
        let mut a = ThreadAccumulator::new(2, 2, 0);
        a.add(1, &[1.0, 2.0]);
        let merged = merge_accumulators(vec![a.clone()]).unwrap();
        assert_eq!(merged, a);
    }

    #[test]
    fn merge_adds_counts() {
        let mut a = ThreadAccumulator::new(2, 1, 0);
        let mut b = ThreadAccumulator::new(2, 1, 1);
        a.counts = vec![3, 0];
        b.counts = vec![2, 5];
        let merged = merge_accumulators(vec![b, a]).unwrap();
        assert_eq!(merged.counts, vec![5, 5]);
    }

    #[test]
    fn merge_empty_is_error() {
        assert!(matches!(merge_accumulators(vec![]), Err(KnorError::EmptyMerge)));
    }

    fn random_accs(seed: u64, t: usize, k: usize, d: usize) -> Vec<ThreadAccumulator> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..t)
            .map(|owner| {
                let mut a = ThreadAccumulator::new(k, d, owner);
                a.sums.iter_mut().for_each(|s| *s = rng.random_range(-1e3..1e3));
                a.counts.iter_mut().for_each(|c| *c = rng.random_range(0..100));
                a
            })
            .collect()
    }

    #[test]
    fn merge_matches_serial_fold() {
        for t in [2, 3, 5, 8] {
            let accs = random_accs(9, t, 7, 5);
            let mut fold = ThreadAccumulator::new(7, 5, 0);
            for a in &accs {
                fold.absorb(a);
            }
            let merged = merge_accumulators(accs.clone()).unwrap();
            assert_eq!(merged.counts, fold.counts);
            for (m, f) in merged.sums.iter().zip(&fold.sums) {
                assert!((m - f).abs() <= 1e-9 * f.abs().max(1.0));
            }
            let again = merge_accumulators(accs).unwrap();
            assert_eq!(
                merged.sums.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                again.sums.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn parallel_merge_rounds_match_serial_rounds() {
        // big enough to take the threaded path
        let accs = random_accs(3, 8, 64, 512);
        let mut serial = accs.clone();
        let mut stride = 1;
        while stride < serial.len() {
            let mut i = 0;
            while i + stride < serial.len() {
                let src = serial[i + stride].clone();
                serial[i].absorb(&src);
                i += 2 * stride;
            }
            stride *= 2;
        }
        let merged = merge_accumulators(accs).unwrap();
        assert_eq!(merged.sums, serial[0].sums);
    }

    #[test]
    fn finalize_keeps_empty_clusters() {
        let prev = set(2, 2, &[1.0, 1.0, 5.0, 5.0]);
        let mut acc = ThreadAccumulator::new(2, 2, 0);
        for p in [[0.0, 0.0], [2.0, 0.0], [4.0, 0.0]] {
            acc.add(0, &p);
        }
        let next = finalize_centroids(&acc, &prev);
        assert_eq!(next.mean(0), &[2.0, 0.0]);
        assert_eq!(next.mean(1), &[5.0, 5.0]);
        assert_eq!(next.drift[1], 0.0);
        assert_eq!(next.counts, vec![3, 0]);
        assert_eq!(next.prev_means, prev.means);
    }

    #[test]
    fn finalize_drift_matches_recomputed_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (k, d) = (6, 4);
        let prev_means: Vec<f64> = (0..k * d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let prev = set(k, d, &prev_means);
        let mut acc = ThreadAccumulator::new(k, d, 0);
        for _ in 0..200 {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            acc.add(rng.random_range(0..k), &v);
        }
        let next = finalize_centroids(&acc, &prev);
        for c in 0..k {
            let want = (0..d)
                .map(|j| (next.means[c * d + j] - prev_means[c * d + j]).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!((next.drift[c] - want).abs() <= 1e-12 * want.max(1.0));
            assert!(next.drift[c] >= 0.0);
        }
        assert_eq!(next.counts.iter().sum::<u64>(), 200);
    }

    #[test]
    fn from_means_rejects_non_finite() {
        assert!(CentroidSet::from_means(1, 2, vec![0.0, f64::NAN]).is_err());
        assert!(CentroidSet::from_means(2, 2, vec![0.0; 3]).is_err());
    }
}
