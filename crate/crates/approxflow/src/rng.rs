//! Splittable deterministic random streams.
//!
//! Every sampling decision draws from a stream keyed by
//! `(seed, partition index, stage index)`, so parallel execution order never
//! changes what is sampled.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stage index for partition selection at load time.
pub const STAGE_PARTITIONS: u64 = 0;
/// Stage index for item selection at load time.
pub const STAGE_ITEMS: u64 = 1;
/// Stage index of transform op `i` within a chain.
pub const STAGE_OP_BASE: u64 = 2;
/// Stage index for pilot partition selection.
pub const STAGE_PILOT: u64 = 1 << 40;
/// Stage index for per-partition reservoir sampling.
pub const STAGE_RESERVOIR: u64 = 1 << 41;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the stream for `(seed, partition, stage)`.
pub fn stream(seed: u64, partition: u64, stage: u64) -> ChaCha8Rng {
    let key = splitmix64(seed ^ splitmix64(partition.wrapping_add(splitmix64(stage))));
    ChaCha8Rng::seed_from_u64(key)
}
