//! Seeded synthetic datasets: isotropic gaussian mixtures and uniform noise.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{KnorError, Result};
use crate::matrix::RowMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum Family {
    /// `k_true` unit-variance clusters whose centers sit on a lattice with
    /// spacing `separation`; points are dealt to clusters round-robin.
    GaussianMixture { k_true: usize, separation: f64 },
    /// i.i.d. uniform over `[0, 1)^d`.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub family: Family,
    pub n: usize,
    pub d: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn gaussian(n: usize, d: usize, k_true: usize, separation: f64, seed: u64) -> Self {
        Self {
            family: Family::GaussianMixture { k_true, separation },
            n,
            d,
            seed,
        }
    }

    pub fn uniform(n: usize, d: usize, seed: u64) -> Self {
        Self {
            family: Family::Uniform,
            n,
            d,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 {
            return Err(KnorError::config("synthetic data needs n >= 1 and d >= 1"));
        }
        if let Family::GaussianMixture { k_true, separation } = self.family {
            if k_true == 0 {
                return Err(KnorError::config("gaussian mixture needs k_true >= 1"));
            }
            if !separation.is_finite() || separation < 0.0 {
                return Err(KnorError::config("separation must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// Smallest lattice base `b` with `b^d >= k`.
fn lattice_base(k: usize, d: usize) -> u32 {
    let mut b: u32 = 1;
    loop {
        let mut sites: u128 = 1;
        for _ in 0..d {
            sites = sites.saturating_mul(b as u128);
            if sites >= k as u128 {
                return b;
            }
        }
        if sites >= k as u128 {
            return b;
        }
        b += 1;
    }
}

fn draw_centers(rng: &mut ChaCha8Rng, k: usize, d: usize, separation: f64) -> Vec<f64> {
    let base = lattice_base(k, d);
    let shift = (base - 1) as f64 / 2.0;
    let mut seen = HashSet::with_capacity(k);
    let mut centers = Vec::with_capacity(k * d);
    while seen.len() < k {
        let site: Vec<u32> = (0..d).map(|_| rng.random_range(0..base)).collect();
        if seen.insert(site.clone()) {
            centers.extend(site.iter().map(|&c| (c as f64 - shift) * separation));
        }
    }
    centers
}

/// Generative centers (`k_true x d`, row-major) of a gaussian-mixture spec.
/// Returns `None` for the uniform family.
pub fn gaussian_centers(spec: &SyntheticSpec) -> Option<Vec<f64>> {
    match spec.family {
        Family::GaussianMixture { k_true, separation } => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            Some(draw_centers(&mut rng, k_true, spec.d, separation))
        }
        Family::Uniform => None,
    }
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<RowMatrix> {
    spec.validate()?;
    let SyntheticSpec { n, d, seed, .. } = *spec;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n * d);
    match spec.family {
        Family::GaussianMixture { k_true, separation } => {
            // centers are drawn first so gaussian_centers() can replay them
            let centers = draw_centers(&mut rng, k_true, d, separation);
            for i in 0..n {
                let c = &centers[(i % k_true) * d..(i % k_true + 1) * d];
                values.extend(c.iter().map(|&mu| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    mu + z
                }));
            }
        }
        Family::Uniform => {
            values.extend((0..n * d).map(|_| rng.random::<f64>()));
        }
    }
    RowMatrix::new(n, d, values)
}
