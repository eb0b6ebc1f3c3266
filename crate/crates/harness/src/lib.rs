//! Experiment harness for task-vector merging: datasets, checkpoints,
//! configuration, the scenario grid and its reports.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod idx;
pub mod report;
pub mod scenario;

pub use error::{Error, Result};

/// Derives an independent stream seed from a base seed and a tag (SplitMix64 finalizer).
pub fn mix_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
