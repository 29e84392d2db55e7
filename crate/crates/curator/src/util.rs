//! Deterministic hashing primitives shared by every stage.
//!
//! All sampling, shuffling, and noise in the pipeline derives from 64-bit
//! FNV-1a hashes of explicit inputs instead of stateful RNG streams. A value
//! therefore depends only on (seed, item), never on visit order, shard count,
//! or worker count.

use sha2::{Digest, Sha256};
use std::fs;
use std::io;
use std::path::Path;

pub const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
pub const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Incremental FNV-1a hasher. Stable across builds and platforms, unlike
/// `DefaultHasher`.
#[derive(Clone, Copy)]
pub struct Fnv64(u64);

impl Fnv64 {
    pub fn new() -> Self {
        Fnv64(FNV_OFFSET)
    }

    pub fn with_seed(seed: u64) -> Self {
        let mut h = Fnv64::new();
        h.write_u64(seed);
        h
    }

    pub fn write(&mut self, bytes: &[u8]) {
        let mut state = self.0;
        for &b in bytes {
            state ^= u64::from(b);
            state = state.wrapping_mul(FNV_PRIME);
        }
        self.0 = state;
    }

    /// Writes a string followed by a separator byte so that adjacent fields
    /// cannot collide by concatenation ("ab","c" vs "a","bc").
    pub fn write_str(&mut self, s: &str) {
        self.write(s.as_bytes());
        self.write(&[0xff]);
    }

    pub fn write_u64(&mut self, v: u64) {
        self.write(&v.to_le_bytes());
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv64 {
    fn default() -> Self {
        Fnv64::new()
    }
}

/// Hash of a single string under a seed.
pub fn hash_str(seed: u64, s: &str) -> u64 {
    let mut h = Fnv64::with_seed(seed);
    h.write_str(s);
    h.finish()
}

/// Hash of an index under a seed.
pub fn hash_index(seed: u64, idx: u64) -> u64 {
    let mut h = Fnv64::with_seed(seed);
    h.write_u64(idx);
    h.finish()
}

/// Maps a hash to the open interval (0, 1). Uses the top 52 bits so that
/// `mantissa + 0.5` and the division are both exact in f64; with 53 bits the
/// addition would round up and the largest hash would map to exactly 1.0.
pub fn unit_f64(h: u64) -> f64 {
    let mantissa = h >> 12;
    (mantissa as f64 + 0.5) / (1u64 << 52) as f64
}

/// Standard Gumbel(0, 1) variate derived from a hash.
pub fn gumbel(h: u64) -> f64 {
    -(-unit_f64(h).ln()).ln()
}

/// Deterministic uniform shuffle: orders items by the hash of their key.
/// Keys must be unique for the order to be total.
pub fn shuffle_by_key<T, F: Fn(&T) -> String>(items: &mut [T], seed: u64, key: F) {
    items.sort_by_cached_key(|it| hash_str(seed, &key(it)));
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex::encode(hasher.finalize())
}

/// Content hash of a directory tree: relative paths and file bytes, walked in
/// sorted order. Used to compare whole run directories for determinism.
pub fn dir_tree_hash(root: &Path) -> io::Result<String> {
    let mut hasher = Sha256::new();
    let mut stack = vec![root.to_path_buf()];
    let mut entries = Vec::new();
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let entry = entry?;
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                entries.push(path);
            }
        }
    }
    entries.sort();
    for path in entries {
        let rel = path.strip_prefix(root).unwrap_or(&path);
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update([0u8]);
        hasher.update(fs::read(&path)?);
        hasher.update([1u8]);
    }
    Ok(hex::encode(hasher.finalize()))
}
