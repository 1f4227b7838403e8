use sha2::{Digest, Sha256};

/// Independent stream seed for one role: the first 8 bytes (little-endian)
/// of `SHA-256(seed as u64 LE ‖ role)`.
pub fn derive_seed(seed: u64, role: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(role.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}
