//! Seeded random source used for every stochastic step (initialization,
//! shuffling, synthetic data).
//!
//! The generator is ChaCha8 (counter based) keyed with `seed_from_u64(seed)` and
//! selected onto an independent `stream`. Derived quantities are fixed here so
//! that other implementations can reproduce fixtures:
//! - uniform: top 53 bits of `next_u64`, scaled by 2^-53, in [0, 1)
//! - gaussian: Box-Muller cosine branch from two uniforms `u1 = 1 - uniform()`
//!   and `u2 = uniform()`; the sine branch is discarded
//! - shuffle: Fisher-Yates from the last index down, `j = next_u64 % (i + 1)`

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct SeededRng {
    inner: ChaCha8Rng,
}

/// Named streams so independent consumers of one seed never overlap.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const SYNTH: u64 = 2;
    pub const BATCHES: u64 = 3;
    pub const GRADCHECK: u64 = 4;
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        SeededRng { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn gaussian_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.gaussian()).collect()
    }

    /// Uniform integer in `0..n`; `n` must be non-zero.
    pub fn below(&mut self, n: usize) -> usize {
        (self.inner.next_u64() % n as u64) as usize
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}
