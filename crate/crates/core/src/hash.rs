//! SHA-256 fingerprints used for frozen-parameter and provenance checks.

use alloc::string::String;
use sha2::{Digest, Sha256};

pub type Fingerprint = [u8; 32];

pub fn sha256(bytes: &[u8]) -> Fingerprint {
    Sha256::digest(bytes).into()
}

/// Hash of the little-endian byte image of an f32 slice.
pub fn hash_f32(values: &[f32]) -> Fingerprint {
    let mut hasher = Sha256::new();
    for v in values {
        hasher.update(v.to_le_bytes());
    }
    hasher.finalize().into()
}

pub fn to_hex(fp: &Fingerprint) -> String {
    hex::encode(fp)
}

/// FNV-1a, used only to turn purpose tags into stream selectors.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_sha256_is_standard() {
        assert_eq!(
            to_hex(&sha256(b"")),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn fnv_reference_value() {
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
    }
}
