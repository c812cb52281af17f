//! Seeded randomness with labeled substreams.
//!
//! `split` derives a child stream from (parent seed, label) only, so the
//! draw order within one stream never shifts another. Every randomized
//! stage of the pipeline owns a label and stays reproducible in isolation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState { seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream keyed by label. Independent of draws made so far.
    pub fn split(&self, label: &str) -> RngState {
        let mut h: u64 = 0xcbf29ce484222325;
        for byte in self.seed.to_le_bytes().iter().chain(label.as_bytes()) {
            h ^= u64::from(*byte);
            h = h.wrapping_mul(0x100000001b3);
        }
        RngState::new(h)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        debug_assert!(lo < hi);
        self.rng.random_range(lo..hi)
    }

    /// Box-Muller; no spare caching so the draw count stays predictable.
    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        let u1: f64 = 1.0 - self.rng.random::<f64>();
        let u2: f64 = self.rng.random();
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        mean + std * z
    }

    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        self.rng.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        xs.shuffle(&mut self.rng);
    }
}
