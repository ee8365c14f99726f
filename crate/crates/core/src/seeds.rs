//! Key derivation for reproducibility: every random choice in the toolkit
//! draws from a generator seeded by `derive_seed(master, label)`, so one
//! master seed pins down every artifact.

use sha2::{Digest, Sha256};

/// First eight little-endian bytes of SHA-256(master_le || label).
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is long enough"))
}
