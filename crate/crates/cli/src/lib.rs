//! Harness library behind the `genmeter` binary: experiment configuration,
//! family training orchestration, result persistence, cross-distribution
//! evaluation, and report emission.

pub mod config;
pub mod crosseval;
pub mod experiment;
pub mod family;
pub mod report;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad command line or config file; exits with code 1.
    #[error("{0}")]
    Usage(String),

    /// Anything that failed at run time; exits with code 2.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<genmeter_core::CoreError> for CliError {
    fn from(e: genmeter_core::CoreError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(format!("i/o error: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// FNV-1a over a byte string; the stable fingerprint written into manifests.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seed for one (depth, run) job, derived so every job is independent of
/// scheduling order.
pub fn job_seed(base_seed: u64, depth: usize, run: usize) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(base_seed ^ mix(((depth as u64) << 32) | run as u64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn job_seeds_are_distinct_and_stable() {
        let a = job_seed(42, 1, 0);
        assert_eq!(a, job_seed(42, 1, 0));
        assert_ne!(a, job_seed(42, 1, 1));
        assert_ne!(a, job_seed(42, 2, 0));
        assert_ne!(a, job_seed(43, 1, 0));
    }

    #[test]
    fn fnv_is_stable() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), fnv1a64(b"a"));
        assert_ne!(fnv1a64(b"a"), fnv1a64(b"b"));
    }
}
