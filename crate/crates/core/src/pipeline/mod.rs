//! End-to-end pipeline driver: run configuration, stage sequencing with
//! content-hashed idempotence, artifact persistence and evaluation reports.

pub mod config;
pub mod stages;

pub use config::RunConfig;
pub use stages::{run_stage, EvalReport, Stage, StageReport};

use std::path::Path;

/// FNV-1a 64-bit, used for idempotence gating of stage inputs.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x1000_0000_01b3);
    }
    hash
}

pub fn hash_file(path: &Path) -> crate::Result<u64> {
    let bytes = std::fs::read(path).map_err(|e| crate::Error::io(path, e))?;
    Ok(fnv1a64(&bytes))
}
