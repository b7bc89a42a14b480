//! Named random streams. Every source of randomness is a ChaCha stream keyed
//! by the run seed plus a tuple of tags, so results never depend on
//! scheduling or on how many draws another stream made.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) const PROMPT: u64 = 0x7072_6f6d;
pub(crate) const ENV: u64 = 0x656e_7600;
pub(crate) const POLICY: u64 = 0x706f_6c69;
pub(crate) const TRAIN: u64 = 0x7472_6169;
pub(crate) const EVAL: u64 = 0x6576_616c;
pub(crate) const CURATE: u64 = 0x6375_7261;
pub(crate) const DIAGNOSE: u64 = 0x6469_6167;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a seed and tags into a single 64-bit key.
pub fn derive_key(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_key(seed, tags))
}
