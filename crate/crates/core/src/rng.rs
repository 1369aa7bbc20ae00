//! Seeded random source.
//!
//! Backed by ChaCha8, a portable stream cipher, so draws are
//! identical across platforms for a given 64-bit seed. Child
//! streams for per-sample generation are derived with [`mix_seed`]
//! (SplitMix64 finalizer over `seed ^ index·φ`).

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// SplitMix64 finalizer applied to `seed ^ (index · 0x9E37_79B9_7F4A_7C15)`.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic generator. Single owner; not shared across threads.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream for item `index`, derived from this generator's seed.
    pub fn child(&self, index: u64) -> Self {
        Self::new(mix_seed(self.seed, index))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<X>(&mut self, xs: &mut [X]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    pub fn uniform_vec<T: Scalar>(&mut self, n: usize, lo: f64, hi: f64) -> Vec<T> {
        (0..n).map(|_| T::lit(self.uniform(lo, hi))).collect()
    }

    pub fn uniform_matrix<T: Scalar>(&mut self, rows: usize, cols: usize, a: f64) -> Matrix<T> {
        Matrix::from_fn(rows, cols, |_, _| T::lit(self.uniform(-a, a)))
    }

    /// Glorot-uniform initialization, bound `sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot<T: Scalar>(&mut self, rows: usize, cols: usize) -> Matrix<T> {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        self.uniform_matrix(rows, cols, a)
    }

    pub fn normal_matrix<T: Scalar>(&mut self, rows: usize, cols: usize) -> Matrix<T> {
        Matrix::from_fn(rows, cols, |_, _| T::lit(self.normal()))
    }
}
