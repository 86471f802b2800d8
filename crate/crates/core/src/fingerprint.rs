//! Content fingerprints for provenance tracking.
//!
//! Score tables, selection results, and evaluation reports record which
//! checkpoint and which corpus produced them. A 64-bit FNV-1a hash rendered
//! as 16 hex characters is plenty for that bookkeeping purpose (these are
//! integrity breadcrumbs, not a security boundary).

/// 64-bit FNV-1a over a byte slice.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hex-encoded fingerprint of a byte slice, e.g. `"a1b2c3d4e5f60718"`.
pub fn fingerprint(bytes: &[u8]) -> String {
    format!("{:016x}", fnv1a64(bytes))
}
