//! Deterministic RNG streams keyed by (master seed, id, purpose).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// 64-bit seed of an independent stream.
pub fn stream_seed(master: u64, id: u64, label: &str) -> u64 {
    splitmix64(splitmix64(master ^ fnv1a(label)) ^ splitmix64(id.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

pub fn stream(master: u64, id: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(master, id, label))
}
