//! Small deterministic hashing helpers shared across modules.

use std::path::Path;

use crate::error::{CoreError, Result};

/// FNV-1a over a byte string.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Stable per-purpose rng stream id derived from a base seed and a label.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    fnv1a64(label.as_bytes()) ^ base.wrapping_mul(0x9e3779b97f4a7c15)
}

/// Content digest of a file, for read-only assertions.
pub fn file_digest(path: &Path) -> Result<u64> {
    let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    Ok(fnv1a64(&bytes))
}
