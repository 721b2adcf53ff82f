//! Seeded, splittable randomness.
//!
//! A stream is identified by `(root_seed, stream_path)`. The path is hashed
//! together with the seed into a ChaCha20 key, so any two distinct paths
//! give unrelated sequences and the same path always replays the same
//! sequence, no matter which thread or in which order it is consumed.
//!
//! Paths used by the simulator are built from the constants in [`kind`],
//! e.g. `[kind::ROUND, round, client_id, kind::NOISE_B]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Stream-path tags. Mixing these into paths keeps unrelated draws apart.
pub mod kind {
    pub const TASK: u64 = 1;
    pub const ROUND: u64 = 2;
    pub const SAMPLE_CLIENTS: u64 = 3;
    pub const INIT: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const NOISE_B: u64 = 6;
    pub const NOISE_A: u64 = 7;
    pub const CALIBRATION: u64 = 8;
    pub const MONTE_CARLO: u64 = 9;
    pub const TRIAL: u64 = 10;
    pub const COIN: u64 = 11;
    pub const INSTANCE: u64 = 12;
}

#[derive(Clone, Debug)]
pub struct RngStream {
    root_seed: u64,
    path: Vec<u64>,
    rng: ChaCha20Rng,
}

impl RngStream {
    pub fn new(root_seed: u64, path: &[u64]) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(b"fedlora-dp/stream/v1");
        hasher.update(root_seed.to_le_bytes());
        hasher.update((path.len() as u64).to_le_bytes());
        for p in path {
            hasher.update(p.to_le_bytes());
        }
        let key: [u8; 32] = hasher.finalize().into();
        Self {
            root_seed,
            path: path.to_vec(),
            rng: ChaCha20Rng::from_seed(key),
        }
    }

    pub fn root(root_seed: u64) -> Self {
        Self::new(root_seed, &[])
    }

    /// A fresh stream whose path extends this one's. Independent of how much
    /// of `self` has been consumed.
    pub fn derive(&self, suffix: &[u64]) -> Self {
        let mut path = self.path.clone();
        path.extend_from_slice(suffix);
        Self::new(self.root_seed, &path)
    }

    pub fn root_seed(&self) -> u64 {
        self.root_seed
    }

    pub fn path(&self) -> &[u64] {
        &self.path
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn coin(&mut self) -> bool {
        self.rng.random::<bool>()
    }

    /// `k` distinct values from `0..n`, uniformly, returned ascending.
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut picked = rand::seq::index::sample(&mut self.rng, n, k).into_vec();
        picked.sort_unstable();
        picked
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.rng.random_range(0..=i);
            items.swap(i, j);
        }
    }
}

/// A `rows x cols` matrix of i.i.d. `N(0, sigma^2)` entries.
///
/// `sigma == 0` returns an exact zero matrix without consuming the stream.
pub fn sample_gaussian(rows: usize, cols: usize, sigma: f64, rng: &mut RngStream) -> Result<Matrix> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid("sigma", format!("{sigma} is not a finite value >= 0")));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("shape", format!("{rows}x{cols} has a zero dimension")));
    }
    if sigma == 0.0 {
        return Ok(Matrix::zeros(rows, cols));
    }
    let data = (0..rows * cols).map(|_| sigma * rng.standard_normal()).collect();
    Matrix::new(rows, cols, data)
}
