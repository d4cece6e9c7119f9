//! Seeded random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream keyed by a
//! 64-bit seed plus a stream selector, so results depend only on
//! `(seed, selector)` and never on call history.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Returns the stream for `selector` under `seed`.
pub fn stream(seed: u64, selector: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(selector);
    rng
}

/// Mixes two values into one seed (splitmix64 finalizer).
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
