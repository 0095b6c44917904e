//! Named, counter-addressed random streams.
//!
//! A stream is identified by a seed plus a tuple of counters such as
//! `(step, episode, timestep, factor)`, so the numbers drawn never depend on
//! how work is split between threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a 64-bit key from a seed and a path of counters.
pub fn stream_key(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(seed), |acc, &c| mix(acc ^ mix(c)))
}

/// An independent generator for the stream `(seed, path...)`.
pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_key(seed, path))
}
