//! Deterministic random streams.
//!
//! Every stochastic routine in the crate takes an [`RngStream`] so that
//! a run is fully determined by its seeds. The backing generator is
//! ChaCha8, which produces identical sequences on every platform.
//! Parallel work never shares a stream; it derives independent child
//! streams with [`RngStream::substream`].

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Identifier of the backing generator, recorded in reports.
pub const RNG_ALGORITHM: &str = "chacha8";

/// Seeded deterministic random stream. Single-owner mutable state:
/// clone-free by design, derive substreams instead of sharing.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn algorithm(&self) -> &'static str {
        RNG_ALGORITHM
    }

    /// Derives an independent stream keyed by `label`. Derivation mixes
    /// the parent seed and the label, so distinct labels give unrelated
    /// sequences and the result does not depend on the parent's position.
    pub fn substream(&self, label: u64) -> RngStream {
        RngStream::new(splitmix64(self.seed ^ splitmix64(label.wrapping_add(0x51ed))))
    }

    /// Vector with i.i.d. entries from {-1, +1}.
    pub fn rademacher(&mut self, d: usize) -> Result<Vec<f64>> {
        if d == 0 {
            return Err(Error::InvalidArgument(
                "rademacher needs at least one entry".into(),
            ));
        }
        Ok((0..d)
            .map(|_| if self.rng.gen::<bool>() { 1.0 } else { -1.0 })
            .collect())
    }

    /// Uniform draw from `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Uniform draw from `[lo, hi)`.
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.rng.sample(rand_distr::StandardNormal)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.gen::<u64>()
    }

    /// Uniform index in `[0, n)`.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    /// Fisher-Yates shuffle in place.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            items.swap(i, j);
        }
    }

    /// Unit vector of dimension `d` from normalized normal draws.
    pub fn unit_vector(&mut self, d: usize) -> Result<Vec<f64>> {
        if d == 0 {
            return Err(Error::InvalidArgument("unit vector of dimension 0".into()));
        }
        loop {
            let v: Vec<f64> = (0..d).map(|_| self.normal()).collect();
            let n = super::matrix::norm(&v);
            if n > 1e-12 {
                return Ok(v.into_iter().map(|x| x / n).collect());
            }
        }
    }
}
