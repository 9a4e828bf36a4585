//! Seed plumbing. Every random decision in a run flows from a named seed
//! through these helpers so that changing one seed never perturbs another
//! stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Create a deterministic generator from a seed.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for one (seed, stream) pair, e.g. a round index.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mix a base seed with a list of tags into a new 64-bit seed (splitmix64 finaliser).
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix(base);
    for &t in tags {
        h = splitmix(h ^ splitmix(t.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
