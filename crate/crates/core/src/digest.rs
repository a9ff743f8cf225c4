//! Stable short digests used for ids that must survive re-runs.

use sha2::{Digest, Sha256};

/// First 16 hex characters of the SHA-256 of the `\x1f`-joined parts.
pub fn short_digest<S: AsRef<str>>(parts: &[S]) -> String {
    let mut h = Sha256::new();
    for (i, p) in parts.iter().enumerate() {
        if i > 0 {
            h.update([0x1f]);
        }
        h.update(p.as_ref().as_bytes());
    }
    let out = h.finalize();
    hex::encode(&out[..8])
}

/// Full hex SHA-256 of a byte string.
pub fn full_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Deterministic 64-bit seed derived from a base seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let out = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&out[..8]);
    u64::from_le_bytes(b)
}
