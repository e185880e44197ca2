//! Stable seed derivation so that adding grid axes never perturbs the
//! random streams of existing scenarios.

use sha2::{Digest, Sha256};

/// Derives a child seed from a master seed and a list of labels.
///
/// The derivation is a SHA-256 over the master seed and the labels, so it is
/// stable across platforms and releases (unlike `DefaultHasher`).
pub fn derive_seed(master: u64, labels: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    for label in labels {
        hasher.update([0xff]);
        hasher.update(label.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}
