//! Counter-based seeding: every random draw in training is keyed by
//! `(seed, step, stream)`, so a run resumed at step `k` sees exactly the
//! draws an uninterrupted run would.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Batch = 1,
    NoiseFirst = 2,
    NoiseSecond = 3,
    Mix = 4,
    Init = 5,
    Phantom = 6,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, step: u64, stream: Stream) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ step) ^ stream as u64)
}

pub fn stream_rng(seed: u64, step: u64, stream: Stream) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, step, stream))
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
