//! Seeded RNG streams. Every stochastic choice in the crate draws from a
//! stream derived from (master seed, tag, index) so runs are reproducible
//! bit-for-bit and independent of iteration order elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A deterministic RNG stream for the given master seed, purpose tag, and index.
pub fn stream(master: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(master, tag, index))
}

fn mix(master: u64, tag: &str, index: u64) -> u64 {
    // FNV-style fold of the tag into the master seed, then a splitmix64 finish.
    let mut h = master ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in tag.bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(h)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
