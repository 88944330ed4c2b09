//! Seedable random source shared by every stochastic component.
//!
//! The generator is ChaCha8 (`rand_chacha`) seeded from a 64-bit seed via
//! `SeedableRng::seed_from_u64`. Sub-streams for independent work items
//! (dataset sample `i`, epoch `e`, ...) are obtained with [`derive_seed`],
//! a SplitMix64 fold over the parent seed and the stream coordinates, so a
//! work item's randomness does not depend on the order items are processed.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream for the work item identified by `coords`.
    pub fn derived(seed: u64, coords: &[u64]) -> Self {
        Self::new(derive_seed(seed, coords))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn int_range(&mut self, lo: usize, hi: usize) -> usize {
        if hi <= lo {
            return lo;
        }
        self.inner.random_range(lo..=hi)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniformly random subset of size `m`, returned in the original order.
    pub fn choose_subset<T: Clone>(&mut self, set: &[T], m: usize) -> Result<Vec<T>> {
        if m > set.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot choose {m} elements from a set of {}",
                set.len()
            )));
        }
        let mut picked = index::sample(&mut self.inner, set.len(), m).into_vec();
        picked.sort_unstable();
        Ok(picked.into_iter().map(|i| set[i].clone()).collect())
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, coords: &[u64]) -> u64 {
    coords
        .iter()
        .fold(splitmix64(seed), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}
