//! Reproducible RNG streams.
//!
//! Every independent unit of work (one rollout, one test prefix) owns its own
//! stream. A stream seed is `splitmix64(master ^ splitmix64(stream_id))`, so
//! results do not depend on scheduling or on how many workers run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// SplitMix64 finaliser.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stream_id: u64) -> u64 {
    splitmix64(master ^ splitmix64(stream_id))
}

pub fn stream(master: u64, stream_id: u64) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(master, stream_id))
}

/// Packs a purpose tag and up to two indices into one stream id.
pub fn stream_id(purpose: u16, major: u32, minor: u16) -> u64 {
    (u64::from(purpose) << 48) | (u64::from(major) << 16) | u64::from(minor)
}
