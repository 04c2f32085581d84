//! Seeded randomness.
//!
//! Every stochastic step draws from a ChaCha8 stream whose 64-bit seed is
//! derived from a global seed and a stream id with the SplitMix64
//! finalizer. Streams are independent of thread scheduling, so parallel
//! runs reproduce bit-for-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type BenchRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of sub-stream `stream` under the global `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream))
}

pub fn stream(seed: u64, stream: u64) -> BenchRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}
