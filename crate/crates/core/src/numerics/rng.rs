//! Seeded randomness.
//!
//! Every random draw in the crate goes through [`SeededRng`], a ChaCha8 stream
//! keyed by a 64-bit seed. Independent consumers (embedding init, batch
//! shuffling, synthetic data, k-means restarts) take a [`SeededRng::fork`] with
//! a fixed stream id, so adding draws to one consumer never shifts another.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Matrix;

/// Stream ids used by [`SeededRng::fork`] across the crate.
pub mod streams {
    pub const EMBEDDINGS: u64 = 1;
    pub const GRAPH_CONV: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const PROBE_SAMPLE: u64 = 4;
    pub const KMEANS: u64 = 5;
    pub const SYNTHETIC: u64 = 6;
    pub const LEMMA: u64 = 7;
    pub const THEOREM: u64 = 8;
}

#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for `stream`, derived only from the seed.
    pub fn fork(&self, stream: u64) -> SeededRng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        SeededRng {
            seed: self.seed,
            inner,
        }
    }

    pub fn gaussian(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

/// Matrix with i.i.d. standard normal entries.
pub fn gaussian_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gaussian()).collect();
    Matrix::from_vec(rows, cols, data).expect("length matches by construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_matrix() {
        let a = gaussian_matrix(&mut SeededRng::new(11), 2, 2);
        let b = gaussian_matrix(&mut SeededRng::new(11), 2, 2);
        let bits = |m: &Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&gaussian_matrix(&mut SeededRng::new(12), 2, 2)));
    }

    #[test]
    fn gaussian_moments() {
        let n = 100_000;
        let m = gaussian_matrix(&mut SeededRng::new(3), n, 1);
        let mean = m.as_slice().iter().sum::<f64>() / n as f64;
        let var = m.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn forks_are_independent_of_parent_position() {
        let mut a = SeededRng::new(5);
        let before = a.fork(2).gaussian();
        a.gaussian();
        a.gaussian();
        assert_eq!(before.to_bits(), a.fork(2).gaussian().to_bits());
        assert_ne!(a.fork(2).gaussian().to_bits(), a.fork(3).gaussian().to_bits());
    }
}
