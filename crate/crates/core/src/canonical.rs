//! Canonical JSON: sorted object keys, UTF-8, no insignificant whitespace.
//!
//! Every golden comparison and idempotency hash goes through this module so
//! that identical values always produce identical bytes.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Serialize `value` to canonical JSON.
///
/// `serde_json::Value` keeps object keys in a `BTreeMap`, so routing through
/// it yields lexicographically sorted keys at every depth.
pub fn to_string<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<String> {
    let value = serde_json::to_value(value)?;
    serde_json::to_string(&value)
}

pub fn to_value<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<serde_json::Value> {
    serde_json::to_value(value)
}

/// Hex SHA-256 of the canonical encoding.
pub fn digest<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<String> {
    let encoded = to_string(value)?;
    Ok(hex::encode(Sha256::digest(encoded.as_bytes())))
}
