//! Stable seeded RNG streams.
//!
//! All stochastic entry points take a `u64` seed and derive independent
//! sub-streams from (seed, domain label, index). ChaCha keeps the streams
//! identical across platforms and releases, which the artifact formats and
//! golden tests rely on.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derive a deterministic RNG for (seed, domain, index).
pub fn derive_rng(seed: u64, domain: &str, index: u64) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a(domain.as_bytes()).to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    key[24..32].copy_from_slice(&0x9e3779b97f4a7c15u64.to_le_bytes());
    ChaCha12Rng::from_seed(key)
}

/// Standard-normal tensor drawn from a derived stream.
pub fn normal_tensor(shape: Vec<usize>, seed: u64, domain: &str, index: u64) -> Tensor {
    let mut rng = derive_rng(seed, domain, index);
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Tensor::new(shape, data).expect("positive extents")
}
