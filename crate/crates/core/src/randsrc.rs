//! Seed-addressable random streams.
//!
//! Every random quantity in a run is drawn from a [`GaussStream`] opened on a
//! seed derived from the run seed plus a `(label, counter)` address, so any
//! perturbation can be regenerated bit-for-bit from its address alone.
//! Streams are ChaCha8 keyed by the derived seed; normals come from the
//! ziggurat sampler in `rand_distr`.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Seed(pub u64);

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Seed {
    /// Child seed addressed by `(label, counter)`. Pure function of its inputs.
    pub fn derive(self, label: &str, counter: u64) -> Seed {
        derive_substream(self, label, counter)
    }
}

/// Deterministically derives an independent child seed.
///
/// Panics on an empty label: every call site names its substream.
pub fn derive_substream(parent: Seed, label: &str, counter: u64) -> Seed {
    assert!(!label.is_empty(), "substream label must be non-empty");
    let l = mix64(fnv1a(label.as_bytes()).wrapping_add(GOLDEN));
    let c = mix64(counter.wrapping_mul(GOLDEN) ^ l);
    Seed(mix64(parent.0.wrapping_add(GOLDEN) ^ mix64(c.rotate_left(17) ^ l)))
}

/// A single-owner stream of random draws.
#[derive(Clone, Debug)]
pub struct GaussStream {
    seed: Seed,
    rng: ChaCha8Rng,
    position: u64,
}

impl GaussStream {
    pub fn new(seed: Seed) -> Self {
        GaussStream {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed.0),
            position: 0,
        }
    }

    pub fn derived(parent: Seed, label: &str, counter: u64) -> Self {
        GaussStream::new(derive_substream(parent, label, counter))
    }

    pub fn seed(&self) -> Seed {
        self.seed
    }

    /// Number of draws consumed so far.
    pub fn position(&self) -> u64 {
        self.position
    }

    pub fn normal(&mut self) -> f64 {
        self.position += 1;
        self.rng.sample(StandardNormal)
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.rng.sample(StandardNormal);
        }
        self.position += out.len() as u64;
    }

    /// Matrix of i.i.d. N(0, 1) entries, filled row-major.
    pub fn gauss_matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        self.fill_normal(m.as_mut_slice());
        m
    }

    pub fn gauss_vec(&mut self, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        self.fill_normal(&mut v);
        v
    }

    /// Uniform draw from {-1, +1}.
    pub fn rademacher(&mut self) -> f64 {
        self.position += 1;
        if self.rng.next_u32() & 1 == 0 {
            -1.0
        } else {
            1.0
        }
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.position += 1;
        self.rng.random::<f64>()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.position += 1;
        self.rng.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Random m×r matrix with orthonormal columns.
pub fn random_orthonormal(stream: &mut GaussStream, m: usize, r: usize) -> Matrix {
    crate::linalg::orthonormalize_columns(&stream.gauss_matrix(m, r))
}
