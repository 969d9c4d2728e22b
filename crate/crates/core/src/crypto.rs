//! Byte-level primitives shared by every phase of the protocol.
//!
//! All protocol values are built from SHA-256, XOR and concatenation of
//! fixed-width fields. Every call to [`hash`] is tallied per thread so that
//! callers can account for the number of protocol-level hash evaluations a
//! phase performs; keystream expansion is tallied separately.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::fmt;
use std::ops::BitXor;

use rand::RngCore;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DIGEST_LEN: usize = 32;
pub const NONCE_LEN: usize = 16;
pub const FIELD_LEN: usize = 16;
pub const TIMESTAMP_LEN: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("xor operands differ in length ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },
    #[error("field is {len} bytes, at most {FIELD_LEN} allowed")]
    FieldTooLong { len: usize },
    #[error("field contains a NUL byte")]
    FieldContainsNul,
    #[error("field bytes are not valid zero-padded UTF-8")]
    FieldEncoding,
    #[error("expected {expected} bytes, got {actual}")]
    BadWidth { expected: usize, actual: usize },
    #[error("invalid hex: {0}")]
    Hex(String),
}

thread_local! {
    static PROTOCOL_HASHES: Cell<u64> = const { Cell::new(0) };
    static KEYSTREAM_HASHES: Cell<u64> = const { Cell::new(0) };
}

/// Hash evaluations observed on the current thread.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashTally {
    /// Protocol-level `h(·)` calls.
    pub protocol: u64,
    /// Block expansions inside [`keystream_mask`]; not protocol operations.
    pub keystream: u64,
}

impl HashTally {
    /// Cumulative tally for the calling thread.
    pub fn current() -> Self {
        HashTally {
            protocol: PROTOCOL_HASHES.with(Cell::get),
            keystream: KEYSTREAM_HASHES.with(Cell::get),
        }
    }

    fn since(self, start: HashTally) -> HashTally {
        HashTally {
            protocol: self.protocol - start.protocol,
            keystream: self.keystream - start.keystream,
        }
    }
}

impl std::ops::Add for HashTally {
    type Output = HashTally;
    fn add(self, rhs: HashTally) -> HashTally {
        HashTally {
            protocol: self.protocol + rhs.protocol,
            keystream: self.keystream + rhs.keystream,
        }
    }
}

impl std::ops::AddAssign for HashTally {
    fn add_assign(&mut self, rhs: HashTally) {
        *self = *self + rhs;
    }
}

/// Runs `f` and returns the hashes it evaluated on this thread.
pub fn count_hashes<R>(f: impl FnOnce() -> R) -> (R, HashTally) {
    let start = HashTally::current();
    let out = f();
    (out, HashTally::current().since(start))
}

/// Per-phase hash accounting.
///
/// Counts are accumulated per thread and merged here when a phase closure
/// returns, so one counter can be fed from several worker threads as long as
/// the merges are serialized by the owner.
#[derive(Debug, Default, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashCounter {
    phases: BTreeMap<String, HashTally>,
}

impl HashCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record<R>(&mut self, phase: &str, f: impl FnOnce() -> R) -> R {
        let (out, tally) = count_hashes(f);
        self.merge(phase, tally);
        out
    }

    pub fn merge(&mut self, phase: &str, tally: HashTally) {
        *self.phases.entry(phase.to_owned()).or_default() += tally;
    }

    pub fn phase(&self, phase: &str) -> HashTally {
        self.phases.get(phase).copied().unwrap_or_default()
    }

    pub fn phases(&self) -> impl Iterator<Item = (&str, HashTally)> {
        self.phases.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn total(&self) -> HashTally {
        self.phases.values().fold(HashTally::default(), |a, b| a + *b)
    }
}

fn sha256(data: &[u8]) -> [u8; DIGEST_LEN] {
    Sha256::digest(data).into()
}

/// SHA-256 of `data`, counted as one protocol-level hash.
pub fn hash(data: &[u8]) -> Digest256 {
    PROTOCOL_HASHES.with(|c| c.set(c.get() + 1));
    Digest256(sha256(data))
}

/// `h(f1 || f2 || ...)` over canonical field encodings.
pub fn hash_fields(fields: &[&dyn Encode]) -> Digest256 {
    hash(&concat(fields))
}

/// Short display fingerprint; not counted as a protocol hash.
pub fn fingerprint(d: &Digest256) -> String {
    hex::encode(&sha256(d.as_bytes())[..8])
}

/// Elementwise XOR of two equal-length byte strings.
pub fn xor(a: &[u8], b: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if a.len() != b.len() {
        return Err(CryptoError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| x ^ y).collect())
}

fn xor_in_place(dst: &mut [u8], src: &[u8]) {
    debug_assert_eq!(dst.len(), src.len());
    dst.iter_mut().zip(src).for_each(|(d, s)| *d ^= s);
}

/// XORs `payload` with the keystream `h(key||0) || h(key||1) || ...`,
/// counters being 4-byte big-endian. Applying it twice restores the input.
pub fn keystream_mask(key: &Digest256, payload: &[u8]) -> Vec<u8> {
    let mut out = payload.to_vec();
    let mut block_input = [0u8; DIGEST_LEN + 4];
    block_input[..DIGEST_LEN].copy_from_slice(key.as_bytes());
    for (ctr, chunk) in out.chunks_mut(DIGEST_LEN).enumerate() {
        block_input[DIGEST_LEN..].copy_from_slice(&(ctr as u32).to_be_bytes());
        KEYSTREAM_HASHES.with(|c| c.set(c.get() + 1));
        let block = sha256(&block_input);
        xor_in_place(chunk, &block[..chunk.len()]);
    }
    out
}

/// A value with a canonical fixed-width byte encoding.
pub trait Encode {
    fn encode_into(&self, out: &mut Vec<u8>);
}

/// Plain juxtaposition of canonical encodings.
pub fn concat(fields: &[&dyn Encode]) -> Vec<u8> {
    let mut out = Vec::with_capacity(fields.len() * DIGEST_LEN);
    for f in fields {
        f.encode_into(&mut out);
    }
    out
}

fn fixed<const N: usize>(bytes: &[u8]) -> Result<[u8; N], CryptoError> {
    bytes.try_into().map_err(|_| CryptoError::BadWidth {
        expected: N,
        actual: bytes.len(),
    })
}

fn from_hex<const N: usize>(s: &str) -> Result<[u8; N], CryptoError> {
    let bytes = hex::decode(s).map_err(|e| CryptoError::Hex(e.to_string()))?;
    fixed(&bytes)
}

macro_rules! byte_array_type {
    ($(#[$meta:meta])* $name:ident, $len:expr) => {
        $(#[$meta])*
        #[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub struct $name(pub [u8; $len]);

        impl $name {
            pub const LEN: usize = $len;

            pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
                fixed(bytes).map(Self)
            }

            pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
                from_hex(s).map(Self)
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }

            pub fn as_bytes(&self) -> &[u8; $len] {
                &self.0
            }

            pub fn random(rng: &mut impl RngCore) -> Self {
                let mut b = [0u8; $len];
                rng.fill_bytes(&mut b);
                Self(b)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), self.to_hex())
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.to_hex())
            }
        }

        impl Encode for $name {
            fn encode_into(&self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.0);
            }
        }

        impl BitXor for $name {
            type Output = $name;
            fn bitxor(mut self, rhs: $name) -> $name {
                xor_in_place(&mut self.0, &rhs.0);
                self
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_hex())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                Self::from_hex(&s).map_err(serde::de::Error::custom)
            }
        }
    };
}

byte_array_type!(
    /// 32-byte SHA-256 output.
    Digest256,
    DIGEST_LEN
);
byte_array_type!(
    /// 128-bit random nonce.
    Nonce128,
    NONCE_LEN
);
byte_array_type!(
    /// 256-bit secret key held by the registration center.
    RcKey,
    DIGEST_LEN
);

impl Digest256 {
    /// `a || b` of two nonces, the only 32-byte value built from nonces.
    pub fn from_nonces(a: &Nonce128, b: &Nonce128) -> Self {
        let mut out = [0u8; DIGEST_LEN];
        out[..NONCE_LEN].copy_from_slice(&a.0);
        out[NONCE_LEN..].copy_from_slice(&b.0);
        Digest256(out)
    }

    pub fn split_nonces(&self) -> (Nonce128, Nonce128) {
        let mut a = [0u8; NONCE_LEN];
        let mut b = [0u8; NONCE_LEN];
        a.copy_from_slice(&self.0[..NONCE_LEN]);
        b.copy_from_slice(&self.0[NONCE_LEN..]);
        (Nonce128(a), Nonce128(b))
    }
}

/// XOR of two 16-byte encodings, e.g. `r2 ⊕ ID`.
pub struct Xor16(pub [u8; 16]);

impl Xor16 {
    pub fn of(a: &[u8; 16], b: &[u8; 16]) -> Self {
        let mut out = *a;
        xor_in_place(&mut out, b);
        Xor16(out)
    }
}

impl Encode for Xor16 {
    fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.0);
    }
}

macro_rules! text_field {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub struct $name([u8; FIELD_LEN]);

        impl $name {
            pub fn new(s: &str) -> Result<Self, CryptoError> {
                encode_text(s).map(Self)
            }

            pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
                let arr: [u8; FIELD_LEN] = fixed(bytes)?;
                decode_text(&arr)?;
                Ok(Self(arr))
            }

            pub fn as_str(&self) -> &str {
                decode_text(&self.0).expect("validated at construction")
            }

            pub fn as_bytes(&self) -> &[u8; FIELD_LEN] {
                &self.0
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({:?})", stringify!($name), self.as_str())
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl Encode for $name {
            fn encode_into(&self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.0);
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(self.as_str())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                Self::new(&s).map_err(serde::de::Error::custom)
            }
        }
    };
}

text_field!(
    /// Identity of a user or server, zero-padded to 16 bytes.
    IdField
);
text_field!(
    /// Password, zero-padded to 16 bytes.
    PwField
);
text_field!(
    /// Server location, zero-padded to 16 bytes.
    LocField
);

fn encode_text(s: &str) -> Result<[u8; FIELD_LEN], CryptoError> {
    let raw = s.as_bytes();
    if raw.len() > FIELD_LEN {
        return Err(CryptoError::FieldTooLong { len: raw.len() });
    }
    if raw.contains(&0) {
        return Err(CryptoError::FieldContainsNul);
    }
    let mut out = [0u8; FIELD_LEN];
    out[..raw.len()].copy_from_slice(raw);
    Ok(out)
}

fn decode_text(bytes: &[u8; FIELD_LEN]) -> Result<&str, CryptoError> {
    let end = bytes.iter().rposition(|&b| b != 0).map_or(0, |i| i + 1);
    let body = &bytes[..end];
    if body.contains(&0) {
        return Err(CryptoError::FieldEncoding);
    }
    std::str::from_utf8(body).map_err(|_| CryptoError::FieldEncoding)
}

/// Seconds since the Unix epoch, encoded as 4 bytes big-endian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp32(pub u32);

impl Timestamp32 {
    pub fn to_bytes(self) -> [u8; TIMESTAMP_LEN] {
        self.0.to_be_bytes()
    }

    pub fn from_bytes(b: [u8; TIMESTAMP_LEN]) -> Self {
        Timestamp32(u32::from_be_bytes(b))
    }

    pub fn plus(self, secs: u32) -> Self {
        Timestamp32(self.0.saturating_add(secs))
    }

    /// True when `0 <= self - sent <= window`.
    pub fn is_fresh_after(self, sent: Timestamp32, window: u32) -> bool {
        self.0 >= sent.0 && self.0 - sent.0 <= window
    }

    pub fn now() -> Self {
        let secs = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Timestamp32(secs as u32)
    }
}

impl Encode for Timestamp32 {
    fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_bytes());
    }
}

/// Raw bytes already in canonical form (e.g. an encoded validity window).
impl<const N: usize> Encode for [u8; N] {
    fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(self);
    }
}
