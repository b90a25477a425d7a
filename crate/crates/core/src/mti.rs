//! Minimal triangle-inequality pruning.
//!
//! Each point keeps one upper bound `u` on the distance to its assigned
//! centroid; the only other state is the `O(k^2)` table of half
//! inter-centroid distances. Three tests skip work:
//!
//! * clause 1: `u <= s[a]`, where `s[a]` is half the distance from centroid
//!   `a` to its nearest other centroid. The point cannot move, so it is
//!   skipped entirely (and in out-of-core mode its row is never read).
//! * clauses 2 and 3: for a candidate `x`, `u <= half_dist(a, x)` proves `x`
//!   is no closer than `a`, so `d(v, x)` is never computed.
//!
//! Comparing against *half* distances is what makes the skip exact: if
//! `d(v, a) <= d(a, x) / 2` then `d(v, x) >= d(a, x) - d(v, a) >= d(v, a)`.

use serde::{Deserialize, Serialize};

use crate::centroids::CentroidSet;
use crate::distance::distance;

/// Half of every pairwise centroid distance plus each centroid's nearest
/// half-distance.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidGeometry {
    k: usize,
    /// Strict upper triangle, row-major: `(0,1), (0,2), .., (1,2), ..`.
    half: Vec<f64>,
    /// `s[a] = min_{b != a} half_dist(a, b)`; `+inf` when `k == 1`.
    pub s: Vec<f64>,
}

impl CentroidGeometry {
    /// Exactly `k(k-1)/2` distance evaluations.
    pub fn compute(c: &CentroidSet) -> Self {
        let k = c.k();
        let mut half = Vec::with_capacity(k * k.saturating_sub(1) / 2);
        let mut s = vec![f64::INFINITY; k];
        for a in 0..k {
            for b in a + 1..k {
                let h = 0.5 * distance(c.mean(a), c.mean(b));
                half.push(h);
                s[a] = s[a].min(h);
                s[b] = s[b].min(h);
            }
        }
        Self { k, half, s }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn half_dist(&self, a: usize, b: usize) -> f64 {
        if a == b {
            return 0.0;
        }
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        self.half[lo * self.k - lo * (lo + 1) / 2 + (hi - lo - 1)]
    }

    /// Stored entries of the strict upper triangle.
    pub fn triangle(&self) -> &[f64] {
        &self.half
    }

    pub fn resident_bytes(&self) -> usize {
        8 * (self.half.capacity() + self.s.capacity())
    }
}

/// Distance computations avoided, by the clause that avoided them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneCounts {
    /// `k` per point skipped by clause 1.
    pub clause1: u64,
    /// Candidates pruned before any candidate distance was evaluated.
    pub clause2: u64,
    /// Candidates pruned after the bound was re-tightened by an evaluation.
    pub clause3: u64,
}

impl PruneCounts {
    pub fn total(&self) -> u64 {
        self.clause1 + self.clause2 + self.clause3
    }

    pub fn add(&mut self, o: &PruneCounts) {
        self.clause1 += o.clause1;
        self.clause2 += o.clause2;
        self.clause3 += o.clause3;
    }
}

/// Outcome of the candidate scan for one point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanOutcome {
    pub id: usize,
    pub computations: u64,
    pub clause2: u64,
    pub clause3: u64,
}

/// Per-point pruning state: `O(n)` in total.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneState {
    pub assignment: Vec<u32>,
    pub upper: Vec<f64>,
    pub tight: Vec<bool>,
}

impl PruneState {
    pub fn new(n: usize) -> Self {
        Self {
            assignment: vec![0; n],
            upper: vec![f64::INFINITY; n],
            tight: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn resident_bytes(&self) -> usize {
        4 * self.assignment.capacity() + 8 * self.upper.capacity() + self.tight.capacity()
    }
}

#[inline]
pub fn clause1_skip(i: usize, st: &PruneState, geo: &CentroidGeometry) -> bool {
    st.upper[i] <= geo.s[st.assignment[i] as usize]
}

/// Replaces the bound with the exact distance to the assigned centroid.
/// Returns whether a distance had to be computed.
#[inline]
pub(crate) fn tighten(v: &[f64], c: &CentroidSet, assigned: u32, upper: &mut f64, tight: &mut bool) -> bool {
    if *tight {
        return false;
    }
    *upper = distance(v, c.mean(assigned as usize));
    *tight = true;
    true
}

pub fn tighten_bound(i: usize, v: &[f64], c: &CentroidSet, st: &mut PruneState) -> f64 {
    let a = st.assignment[i];
    tighten(v, c, a, &mut st.upper[i], &mut st.tight[i]);
    st.upper[i]
}

/// Candidate scan for a point that failed clause 1.
///
/// Tightens `u` once, then walks the other centroids in ascending id. A
/// candidate is skipped when `u <= half_dist(a, x)` for the *current* `a`;
/// otherwise its distance is computed and it takes over the assignment if
/// strictly closer.
#[inline]
pub(crate) fn scan_candidates(
    v: &[f64],
    c: &CentroidSet,
    geo: &CentroidGeometry,
    assigned: &mut u32,
    upper: &mut f64,
    tight: &mut bool,
) -> ScanOutcome {
    let mut computations = u64::from(tighten(v, c, *assigned, upper, tight));
    let start = *assigned as usize;
    let mut a = start;
    let mut evaluated = false;
    let (mut clause2, mut clause3) = (0, 0);
    for x in 0..c.k() {
        if x == start {
            continue;
        }
        if *upper <= geo.half_dist(a, x) {
            if evaluated {
                clause3 += 1;
            } else {
                clause2 += 1;
            }
            continue;
        }
        let dx = distance(v, c.mean(x));
        computations += 1;
        evaluated = true;
        if dx < *upper {
            a = x;
            *upper = dx;
        }
    }
    *assigned = a as u32;
    ScanOutcome {
        id: a,
        computations,
        clause2,
        clause3,
    }
}

pub fn assign_point_mti(
    i: usize,
    v: &[f64],
    c: &CentroidSet,
    geo: &CentroidGeometry,
    st: &mut PruneState,
) -> (usize, ScanOutcome) {
    let out = scan_candidates(
        v,
        c,
        geo,
        &mut st.assignment[i],
        &mut st.upper[i],
        &mut st.tight[i],
    );
    (out.id, out)
}

/// Loosens one bound by its centroid's drift.
#[inline]
pub(crate) fn loosen(assigned: u32, upper: &mut f64, tight: &mut bool, drift: &[f64]) {
    let f = drift[assigned as usize];
    if f != 0.0 {
        *upper += f;
        *tight = false;
    }
}

/// `u[i] += drift[a[i]]`; a bound stays tight only if its centroid did not move.
pub fn update_bounds_after_move(st: &mut PruneState, c: &CentroidSet) {
    for ((a, u), t) in st
        .assignment
        .iter()
        .zip(st.upper.iter_mut())
        .zip(st.tight.iter_mut())
    {
        loosen(*a, u, t, &c.drift);
    }
}
