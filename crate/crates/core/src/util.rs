//! Small shared helpers: content digests and counter-based seed mixing.

use sha2::{Digest, Sha256};

/// SHA-256 of `bytes` as a lowercase hex string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex(&h.finalize())
}

/// SHA-256 of `bytes` as raw 32 bytes.
pub fn sha256_raw(bytes: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().into()
}

pub fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// splitmix64 finalizer. Mixes independent seed components into one stream
/// seed so per-sample generators can be derived without sharing state.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Fold a sequence of seed components into a single stream seed.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut acc = 0x51ab_c0de_u64;
    for &p in parts {
        acc = mix64(acc ^ p);
    }
    acc
}
