//! Deterministic, forkable random number generation.
//!
//! Every stream is a ChaCha8 generator created from a 64-bit seed.
//! `fork(label)` derives a child stream whose seed is a stable hash of
//! (parent seed, label), so any sub-stream is reproducible from the run seed
//! and a path of labels, independent of how many draws the parent has made.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Rng {
        Rng { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// The seed this stream was created from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream reproducible from (seed, label); the parent is untouched.
    pub fn fork(&self, label: &str) -> Rng {
        Rng::new(fnv1a64(self.seed, label.as_bytes()))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n); rejection-sampled, bias-free.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index() needs a nonempty range");
        let n = n as u64;
        let limit = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < limit {
                return (v % n) as usize;
            }
        }
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.index(i + 1);
            xs.swap(i, j);
        }
    }
}

/// 0/1 tensor with each element independently 1 with probability `keep_prob`;
/// elements are drawn in row-major order.
pub fn bernoulli(rng: &mut Rng, shape: &[usize], keep_prob: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&keep_prob) {
        return Err(Error::Domain(format!("keep_prob {keep_prob} outside [0, 1]")));
    }
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| if rng.next_f64() < keep_prob { 1.0 } else { 0.0 }).collect();
    Tensor::from_vec(shape, data)
}

fn fnv1a64(seed: u64, label: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in seed.to_le_bytes().iter().chain(label) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
