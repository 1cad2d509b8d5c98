//! Deterministic seed derivation.
//!
//! Every source of randomness in a run flows from one global seed. Stages,
//! epochs, and per-sample draws get independent streams by hashing a string
//! label plus integer indices into the global seed, so any stage can be
//! reproduced in isolation without replaying the stages before it.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x1000_0000_01b3;

fn fnv1a(bytes: &[u8], state: u64) -> u64 {
    let mut h = state;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent stream seed from a global seed, a stage label, and
/// positional indices (epoch, sample index, ...).
pub fn derive_seed(global: u64, label: &str, indices: &[u64]) -> u64 {
    let mut h = fnv1a(label.as_bytes(), FNV_OFFSET ^ global);
    for &ix in indices {
        h = fnv1a(&ix.to_le_bytes(), h);
    }
    splitmix64(h)
}

/// Seeded RNG for a derived stream.
pub fn stream_rng(global: u64, label: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(global, label, indices))
}

/// Stable 64-bit content hash, used for config fingerprints and artifact
/// identity checks. Not cryptographic.
pub fn content_hash(bytes: &[u8]) -> u64 {
    splitmix64(fnv1a(bytes, FNV_OFFSET))
}
