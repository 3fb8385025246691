//! Seeding. Every random stream in the crate is a `ChaCha8Rng`, so results are
//! reproducible across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for restart `restart` of grid cell `grid`: `base + hash(grid, restart)`.
pub fn derive_seed(base: u64, grid: u64, restart: u64) -> u64 {
    base.wrapping_add(mix64(mix64(grid) ^ restart))
}

/// Independent sub-stream of `seed` named by a small tag.
pub fn substream(seed: u64, tag: u64) -> u64 {
    mix64(seed ^ mix64(tag.wrapping_add(0xA5A5)))
}
