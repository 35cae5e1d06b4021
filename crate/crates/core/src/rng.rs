//! Seedable, splittable random streams.
//!
//! Every stochastic component draws from a [`ChaCha8Rng`]. Independent
//! substreams are addressed by `(master seed, stream index)` through the
//! ChaCha stream counter, so work can be split across samples or threads
//! without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Root stream for a master seed.
pub fn root(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Substream `index` of `seed`. Distinct indices give independent streams.
pub fn substream(seed: u64, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Derives a child seed from a parent seed and a label, for nested splits
/// (e.g. one seed per experiment cell, then one substream per sample).
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    // splitmix64 finalizer over the mixed pair
    let mut z = seed ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
