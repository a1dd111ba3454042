//! Deterministic seed derivation.
//!
//! Every random quantity is drawn from a ChaCha8 stream whose seed is
//! derived from a parent seed and an integer index with SplitMix64:
//! `derive(seed, i) = mix(seed ^ mix(i + 0x9E3779B97F4A7C15))`. Scenario
//! seeds derive from the master seed and the scenario index, replication
//! seeds from the scenario seed and the replication index, and cluster
//! streams from the replication seed and the cluster index, so results do
//! not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Stream reserved for panel-size draws of a layout.
pub const PANEL_STREAM: u64 = u64::MAX - 1;
/// Stream reserved for treatment assignment of a layout.
pub const ASSIGNMENT_STREAM: u64 = u64::MAX;

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, index: u64) -> u64 {
    mix(seed ^ mix(index.wrapping_add(GOLDEN)))
}

pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, index))
}
