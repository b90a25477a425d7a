//! Seeded centroid initialization.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::centroids::CentroidSet;
use crate::distance::squared_distance;
use crate::error::{KnorError, Result};
use crate::matrix::RowAccess;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    /// `k` distinct rows sampled without replacement.
    Forgy,
    /// Rows dealt uniformly at random to `k` groups; centroids are the group
    /// means. A group left empty takes a uniformly drawn row instead.
    RandomPartition,
    /// D^2-weighted seeding.
    KmeansPlusPlus,
    /// Caller-supplied `k x d` row-major means.
    Given(Vec<f64>),
}

impl Init {
    pub fn name(&self) -> &'static str {
        match self {
            Init::Forgy => "forgy",
            Init::RandomPartition => "random-partition",
            Init::KmeansPlusPlus => "kmeanspp",
            Init::Given(_) => "given",
        }
    }
}

pub fn init_centroids<R: RowAccess + ?Sized>(
    m: &R,
    k: usize,
    init: &Init,
    seed: u64,
) -> Result<CentroidSet> {
    let (n, d) = (m.n(), m.d());
    if k == 0 {
        return Err(KnorError::config("k must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = match init {
        Init::Forgy => {
            if k > n {
                return Err(KnorError::config(format!(
                    "forgy initialization needs k <= n (k={k}, n={n})"
                )));
            }
            let mut means = vec![0.0; k * d];
            for (c, i) in sample(&mut rng, n, k).into_iter().enumerate() {
                m.read_row(i, &mut means[c * d..(c + 1) * d])?;
            }
            means
        }
        Init::RandomPartition => {
            let mut sums = vec![0.0; k * d];
            let mut counts = vec![0usize; k];
            m.for_each_row(&mut |_, row| {
                let g = rng.random_range(0..k);
                counts[g] += 1;
                for (s, x) in sums[g * d..(g + 1) * d].iter_mut().zip(row) {
                    *s += x;
                }
            })?;
            for g in 0..k {
                if counts[g] == 0 {
                    let r = rng.random_range(0..n);
                    m.read_row(r, &mut sums[g * d..(g + 1) * d])?;
                } else {
                    let c = counts[g] as f64;
                    sums[g * d..(g + 1) * d].iter_mut().for_each(|s| *s /= c);
                }
            }
            sums
        }
        Init::KmeansPlusPlus => {
            if k > n {
                return Err(KnorError::config(format!(
                    "k-means++ initialization needs k <= n (k={k}, n={n})"
                )));
            }
            kmeanspp(m, k, &mut rng)?
        }
        Init::Given(values) => {
            if values.len() != k * d {
                return Err(KnorError::DimensionMismatch {
                    expected: k * d,
                    actual: values.len(),
                });
            }
            values.clone()
        }
    };
    CentroidSet::from_means(k, d, means)
}

fn kmeanspp<R: RowAccess + ?Sized>(m: &R, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let (n, d) = (m.n(), m.d());
    let mut means = vec![0.0; k * d];
    let first = rng.random_range(0..n);
    m.read_row(first, &mut means[..d])?;
    let mut nearest = vec![f64::INFINITY; n];
    for c in 0..k {
        if c > 0 {
            let total: f64 = nearest.iter().sum();
            let pick = if total > 0.0 {
                let target = rng.random::<f64>() * total;
                let mut acc = 0.0;
                let mut pick = n - 1;
                for (i, w) in nearest.iter().enumerate() {
                    acc += w;
                    if acc > target {
                        pick = i;
                        break;
                    }
                }
                pick
            } else {
                // every row coincides with a chosen centroid
                rng.random_range(0..n)
            };
            m.read_row(pick, &mut means[c * d..(c + 1) * d])?;
        }
        if c + 1 < k {
            let chosen = &means[c * d..(c + 1) * d];
            m.for_each_row(&mut |i, r| {
                nearest[i] = nearest[i].min(squared_distance(r, chosen));
            })?;
        }
    }
    Ok(means)
}
