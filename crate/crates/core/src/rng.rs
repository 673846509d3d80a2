//! Keyed PCG32 streams.
//!
//! Every stochastic choice in the toolkit draws from a stream identified by a
//! purpose tag, a scope string (normally the dataset name) and a numeric seed.
//! Two draws with the same key see the same sequence on every platform.

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg32;
use sha2::{Digest, Sha256};

pub use rand_pcg::Pcg32 as KeyedRng;

/// Purpose tags used across the crate.
pub mod purpose {
    pub const SPLIT: &str = "split";
    pub const FORGET: &str = "forget";
    pub const INIT: &str = "init";
    pub const DROPOUT: &str = "dropout";
    pub const UNLEARN: &str = "unlearn";
    pub const TEACHER: &str = "teacher";
    pub const RETAIN_BASELINE: &str = "retain-baseline";
    pub const M4_CAP: &str = "m4-cap";
    pub const SYNTHETIC: &str = "synthetic";
    pub const GRAD_CHECK: &str = "grad-check";
}

pub fn keyed_stream(purpose: &str, scope: &str, seed: u64) -> Pcg32 {
    let mut h = Sha256::new();
    h.update(purpose.as_bytes());
    h.update([0u8]);
    h.update(scope.as_bytes());
    h.update([0u8]);
    h.update(seed.to_le_bytes());
    let digest = h.finalize();
    let state = u64::from_le_bytes(digest[0..8].try_into().unwrap());
    let stream = u64::from_le_bytes(digest[8..16].try_into().unwrap());
    Pcg32::new(state, stream)
}

/// Plain seeded stream, for tests and throwaway draws.
pub fn seeded(seed: u64) -> Pcg32 {
    Pcg32::seed_from_u64(seed)
}

/// In-place Fisher–Yates shuffle.
pub fn shuffle<T, R: Rng>(rng: &mut R, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// `k` distinct positions out of `0..n`, in draw order (partial Fisher–Yates).
pub fn sample_positions<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    assert!(k <= n, "cannot draw {k} of {n} without replacement");
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Stable 64-bit fingerprint of a byte string.
pub fn fingerprint(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[0..8].try_into().unwrap())
}

pub fn fingerprint_indices(idx: &[usize]) -> u64 {
    let mut buf = Vec::with_capacity(idx.len() * 8);
    for &i in idx {
        buf.extend_from_slice(&(i as u64).to_le_bytes());
    }
    fingerprint(&buf)
}
