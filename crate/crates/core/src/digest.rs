use serde::Serialize;
use sha2::{Digest, Sha256};

/// Hex SHA-256 over the canonical JSON encoding of `value`.
///
/// All maps serialized through here are `BTreeMap`s, so the encoding (and the
/// digest) is stable across processes.
pub fn content_digest<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable value");
    sha256_hex(&bytes)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// 64-bit seed mixing (splitmix64 finalizer), used to derive independent RNG
/// streams from a base seed and a stream index.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
