//! Content hashing over canonical JSON.
//!
//! Every cache key and provenance digest in the pipeline goes through
//! [`content_hash`]. Structured values are first rendered as key-sorted
//! compact JSON so that the digest does not depend on field declaration
//! order or on the host.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// SHA-256 of `bytes`, rendered as 64 lowercase hex digits.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Key-sorted compact JSON rendering of `value`.
///
/// `serde_json::Map` is a `BTreeMap` unless the `preserve_order` feature is
/// enabled somewhere in the dependency graph, so round-tripping through
/// `Value` sorts object keys at every depth.
pub fn canonical_json<T: Serialize + ?Sized>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("domain types serialize to JSON");
    serde_json::to_string(&v).expect("JSON values always render")
}

/// Digest of the canonical JSON form of `value`.
pub fn hash_canonical<T: Serialize + ?Sized>(value: &T) -> String {
    content_hash(canonical_json(value).as_bytes())
}

/// Digest of several labelled parts, e.g. a cache key built from stage name,
/// stage version, input, prompt and seed. Parts are length-prefixed so that
/// `["ab", "c"]` and `["a", "bc"]` never collide.
pub fn hash_parts(parts: &[&[u8]]) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    hex::encode(hasher.finalize())
}

/// First 8 bytes of a digest as an integer; used to derive per-item seeds.
pub fn hash_to_u64(parts: &[&[u8]]) -> u64 {
    let digest = hash_parts(parts);
    u64::from_str_radix(&digest[..16], 16).expect("hex digest")
}
