//! Seeded randomness.
//!
//! Every random draw in the crate comes from a [`SplitMix64`] generator
//! (Steele, Lea & Flood's 64-bit mixer: state += 0x9E3779B97F4A7C15, then
//! two xor-shift-multiply rounds). The generator is platform independent,
//! so checkpoints and synthetic datasets reproduce bit-for-bit.
//!
//! Subsystems never share a stream. Each one derives its own seed from the
//! run seed and a label: the first eight bytes (little endian) of
//! `SHA-256(seed.to_le_bytes() || label)`.

use rand::SeedableRng;
pub use rand_xoshiro::SplitMix64;
use sha2::{Digest, Sha256};

/// Derives an independent subsystem seed from a base seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Generator for the subsystem named `label` under run seed `seed`.
pub fn rng_for(seed: u64, label: &str) -> SplitMix64 {
    SplitMix64::seed_from_u64(derive_seed(seed, label))
}

/// Hex-encoded SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
