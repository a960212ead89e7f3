//! Counter-keyed random streams: one independent ChaCha stream per
//! `(master seed, replication, unit)`, so draws do not depend on the order
//! in which units or replications are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed derived from a master seed and a replication index.
pub fn replication_seed(master: u64, replication: u64) -> u64 {
    mix64(master ^ mix64(replication.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

pub fn unit_rng(master: u64, replication: u64, unit: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(replication_seed(master, replication));
    rng.set_stream(unit);
    rng
}
