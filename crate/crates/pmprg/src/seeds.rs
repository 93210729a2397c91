//! Deterministic seed derivation.
//!
//! Every stochastic choice in the pipeline draws from a `ChaCha8Rng` seeded
//! through [`derive_rng`], which mixes the run seed with a purpose string via
//! FNV-1a. The standard library hasher is deliberately avoided: it is
//! randomized per process, which would break run-to-run reproducibility.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over a byte slice.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Mix a run seed with a purpose label into a single 64-bit seed.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let mut h = fnv1a64(purpose.as_bytes());
    for b in seed.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// RNG for one named purpose under a run seed.
pub fn derive_rng(seed: u64, purpose: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose))
}
