//! Seeded randomness.
//!
//! Every stream is a ChaCha8 generator (`rand_chacha::ChaCha8Rng`), whose
//! output is specified bit-for-bit and independent of platform endianness.
//! Child streams are keyed by a label path, e.g. `[STAGE, 2, epoch, task]`,
//! and derived from the root seed with SplitMix64 finalizers. A child stream
//! depends only on the root seed and its label path, never on how much of any
//! other stream has been consumed, so reordering tasks leaves the remaining
//! streams untouched.

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Matrix;

/// Labels used to key substreams.
pub mod streams {
    pub const SYNTH: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const INIT: u64 = 3;
    pub const TRAIN: u64 = 4;
    pub const HOLDOUT: u64 = 5;
    pub const GRADCHECK: u64 = 6;
}

#[derive(Clone, Debug)]
pub struct Rng {
    key: u64,
    inner: ChaCha8Rng,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            key: seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// The key this stream was created from.
    pub fn key(&self) -> u64 {
        self.key
    }

    /// Independent child stream for `labels`, derived from this stream's key.
    pub fn substream(&self, labels: &[u64]) -> Rng {
        let mut k = splitmix(self.key ^ 0x5EED_0000_0000_0001);
        for &l in labels {
            k = splitmix(k ^ splitmix(l));
        }
        Rng::new(k)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform index in `0..n`. Panics if `n == 0`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// `k` distinct indices from `0..n`, in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, n, k.min(n)).into_vec()
    }
}

/// Matrix of i.i.d. standard normal draws, filled row-major.
pub fn gaussian_sample(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.standard_normal()).collect();
    Matrix::new(rows, cols, data).expect("length matches by construction")
}
