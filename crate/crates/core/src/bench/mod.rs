//! Benchmark generators and their shared deterministic RNG.

pub mod cholesky;
pub mod uts;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("generated matrix failed the direct factorization sanity check")]
    NotSpd,
    #[error("tree exceeded the node-count cap of {0}")]
    TreeTooLarge(u64),
    #[error("invalid benchmark config: {0}")]
    BadConfig(String),
}

/// Counter-based splitmix64 hash; the deterministic primitive behind tile
/// value generation and UTS child sampling.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Hash a small tuple of counters into one word.
pub fn mix(parts: &[u64]) -> u64 {
    let mut acc = 0x51_7c_c1_b7_27_22_0a_95u64;
    for &p in parts {
        acc = splitmix64(acc ^ p);
    }
    acc
}

/// Uniform in [0, 1).
pub fn u01(parts: &[u64]) -> f64 {
    (mix(parts) >> 11) as f64 / (1u64 << 53) as f64
}
