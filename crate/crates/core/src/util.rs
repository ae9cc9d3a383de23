//! Small shared helpers: content digests and wall-clock timestamps.

use chrono::Utc;
use sha2::{Digest, Sha256};

/// Hex-encoded SHA-256 of `bytes`. Used for file digests in manifests, the
/// memory journal, and submission payload fingerprints.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Current UTC time formatted to microseconds, e.g.
/// `2017-08-15T12:00:00.000000Z`. The fixed width makes string comparison
/// agree with chronological order, which the event log relies on.
pub fn now_utc_micros() -> String {
    Utc::now().format("%Y-%m-%dT%H:%M:%S%.6fZ").to_string()
}
