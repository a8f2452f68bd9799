//! Counter-based random streams. Every consumer derives its own stream from
//! `(seed, domain, index)` so results never depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains. Distinct domains never share a stream.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Domain {
    SceneActors = 1,
    SceneFeatures = 2,
    InitialLabels = 3,
    Selection = 4,
    ModelInit = 5,
    Minibatch = 6,
}

fn mix(mut x: u64) -> u64 {
    // splitmix64 finalizer
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn stream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ mix(domain as u64)));
    rng.set_stream(index);
    rng
}
