// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator keyed by
//! `seed_from_u64(seed)` and positioned on a 64-bit stream id. ChaCha is a
//! counter-based cipher, so stream `r` of seed `s` is the same sequence no
//! matter which thread consumes it or in what order streams are opened.
//! This is what lets bootstrap resamples run in parallel and still match a
//! serial replay bit for bit.
//!
//! Stream ids for named entities (a word, a condition) are the first eight
//! bytes, little-endian, of the SHA-256 digest of the `/`-joined names.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Generator for stream `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stable stream id for a tuple of names.
pub fn named_stream(parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    for (i, p) in parts.iter().enumerate() {
        if i > 0 {
            hasher.update(b"/");
        }
        hasher.update(p.as_bytes());
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Uniform index in `0..n`. Panics if `n == 0`.
pub fn index(rng: &mut StreamRng, n: usize) -> usize {
    rng.gen_range(0..n)
}

/// `k` distinct indices from `0..n`, returned in ascending order.
pub fn sample_sorted(rng: &mut StreamRng, n: usize, k: usize) -> Vec<usize> {
    let mut picked = rand::seq::index::sample(rng, n, k.min(n)).into_vec();
    picked.sort_unstable();
    picked
}

/// Standard normal draw (Box-Muller on two uniform draws).
pub fn normal(rng: &mut StreamRng) -> f64 {
    // u1 in (0, 1] keeps ln finite.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
