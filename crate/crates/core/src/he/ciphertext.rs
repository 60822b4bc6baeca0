//! Packed ciphertexts and their binary wire format.
//!
//! Layout, all integers big-endian:
//!
//! ```text
//! "SEFL"  version:u8  backend:u8  slot_count:u32
//! weight_num:u64  weight_den_bits:u8  bias_bits:u8  slot_bound:u128
//! key_id:u64  block_count:u32
//! block_count x ( len:u32  bytes[len] )
//! ```
//!
//! Paillier blocks are fixed-width encodings of elements of `Z_{n^2}`; mock
//! blocks carry raw `f64` bit patterns.

use alloc::vec::Vec;

use num_bigint::BigUint;

use super::config::HEADER_BYTES;
use super::{HeError, KeyConfig};

pub const MAGIC: [u8; 4] = *b"SEFL";
pub const WIRE_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum BackendId {
    Paillier = 1,
    Mock = 2,
}

impl BackendId {
    fn from_u8(v: u8) -> Result<Self, HeError> {
        match v {
            1 => Ok(BackendId::Paillier),
            2 => Ok(BackendId::Mock),
            other => Err(HeError::Malformed(WireFault::UnknownBackend(other))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BackendId::Paillier => "paillier",
            BackendId::Mock => "mock",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WireFault {
    BadMagic,
    Version(u8),
    UnknownBackend(u8),
    Truncated,
    TrailingBytes,
    BlockLength { index: usize, len: usize },
    BlockCount { expected: usize, got: usize },
    ConfigMismatch,
}

impl core::fmt::Display for WireFault {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            WireFault::BadMagic => f.write_str("bad magic"),
            WireFault::Version(v) => write!(f, "unsupported version {v}"),
            WireFault::UnknownBackend(b) => write!(f, "unknown backend tag {b}"),
            WireFault::Truncated => f.write_str("truncated payload"),
            WireFault::TrailingBytes => f.write_str("trailing bytes"),
            WireFault::BlockLength { index, len } => write!(f, "block {index} has bad length {len}"),
            WireFault::BlockCount { expected, got } => {
                write!(f, "expected {expected} blocks, found {got}")
            }
            WireFault::ConfigMismatch => f.write_str("header does not match key config"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Payload {
    Paillier(Vec<BigUint>),
    Mock(Vec<f64>),
}

/// Plaintext weights applied to a ciphertext so far.
///
/// The decrypted slot equals `numerator * bias + sum_i w_i * encode(v_i)`
/// where the `w_i` are integer weights with `2^denominator_bits` as their
/// fixed-point unit. `numerator` is the exact sum of those integer weights,
/// which is what signed-encoding bias removal needs at decryption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WeightScale {
    pub numerator: u64,
    pub denominator_bits: u8,
}

impl WeightScale {
    pub(crate) const FRESH: WeightScale = WeightScale { numerator: 1, denominator_bits: 0 };

    pub fn is_scaled(&self) -> bool {
        self.denominator_bits != 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ciphertext {
    pub(crate) backend: BackendId,
    pub(crate) key_id: u64,
    pub(crate) slot_count: u32,
    pub(crate) weight: WeightScale,
    pub(crate) bias_bits: u8,
    /// Upper bound on every slot's integer value; must stay below
    /// `2^slot_width`.
    pub(crate) slot_bound: u128,
    pub(crate) payload: Payload,
}

impl Ciphertext {
    pub fn backend(&self) -> BackendId {
        self.backend
    }

    pub fn key_id(&self) -> u64 {
        self.key_id
    }

    pub fn slot_count(&self) -> usize {
        self.slot_count as usize
    }

    pub fn weight_scale(&self) -> WeightScale {
        self.weight
    }

    pub fn slot_bound(&self) -> u128 {
        self.slot_bound
    }

    /// Copy of the metadata with an empty payload.
    pub(crate) fn header_only(&self) -> Ciphertext {
        Ciphertext {
            backend: self.backend,
            key_id: self.key_id,
            slot_count: self.slot_count,
            weight: self.weight,
            bias_bits: self.bias_bits,
            slot_bound: self.slot_bound,
            payload: Payload::Mock(Vec::new()),
        }
    }

    pub fn block_count(&self) -> usize {
        match &self.payload {
            Payload::Paillier(blocks) => blocks.len(),
            Payload::Mock(_) => 0,
        }
    }

    /// Serialize; `cfg` fixes the block width and mock block size.
    pub fn to_bytes(&self, cfg: &KeyConfig) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES as usize);
        out.extend_from_slice(&MAGIC);
        out.push(WIRE_VERSION);
        out.push(self.backend as u8);
        out.extend_from_slice(&self.slot_count.to_be_bytes());
        out.extend_from_slice(&self.weight.numerator.to_be_bytes());
        out.push(self.weight.denominator_bits);
        out.push(self.bias_bits);
        out.extend_from_slice(&self.slot_bound.to_be_bytes());
        out.extend_from_slice(&self.key_id.to_be_bytes());
        match &self.payload {
            Payload::Paillier(blocks) => {
                let width = cfg.paillier_block_bytes();
                out.extend_from_slice(&(blocks.len() as u32).to_be_bytes());
                for block in blocks {
                    let bytes = block.to_bytes_be();
                    out.extend_from_slice(&(width as u32).to_be_bytes());
                    out.resize(out.len() + width - bytes.len(), 0);
                    out.extend_from_slice(&bytes);
                }
            }
            Payload::Mock(values) => {
                let chunks = values.chunks(cfg.pack_batch as usize);
                out.extend_from_slice(&(chunks.len() as u32).to_be_bytes());
                for chunk in chunks {
                    out.extend_from_slice(&((chunk.len() * 8) as u32).to_be_bytes());
                    for v in chunk {
                        out.extend_from_slice(&v.to_bits().to_be_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], cfg: &KeyConfig) -> Result<Self, HeError> {
        let mut r = Reader { bytes };
        if r.take(4)? != MAGIC {
            return Err(HeError::Malformed(WireFault::BadMagic));
        }
        let version = r.u8()?;
        if version != WIRE_VERSION {
            return Err(HeError::Malformed(WireFault::Version(version)));
        }
        let backend = BackendId::from_u8(r.u8()?)?;
        let slot_count = r.u32()?;
        let numerator = r.u64()?;
        let denominator_bits = r.u8()?;
        let bias_bits = r.u8()?;
        let slot_bound = u128::from_be_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let key_id = r.u64()?;
        let block_count = r.u32()? as usize;
        if u32::from(bias_bits) != cfg.bias_bits()
            || (denominator_bits != 0 && u32::from(denominator_bits) != cfg.weight_frac_bits)
            || slot_bound >> cfg.slot_width() != 0
        {
            return Err(HeError::Malformed(WireFault::ConfigMismatch));
        }
        let payload = match backend {
            BackendId::Paillier => {
                let expected = (slot_count as usize).div_ceil(cfg.paillier_slots_per_block());
                if block_count != expected {
                    return Err(HeError::Malformed(WireFault::BlockCount { expected, got: block_count }));
                }
                let width = cfg.paillier_block_bytes();
                let mut blocks = Vec::with_capacity(block_count);
                for index in 0..block_count {
                    let len = r.u32()? as usize;
                    if len != width {
                        return Err(HeError::Malformed(WireFault::BlockLength { index, len }));
                    }
                    blocks.push(BigUint::from_bytes_be(r.take(len)?));
                }
                Payload::Paillier(blocks)
            }
            BackendId::Mock => {
                let expected = (slot_count as usize).div_ceil(cfg.pack_batch as usize);
                if block_count != expected {
                    return Err(HeError::Malformed(WireFault::BlockCount { expected, got: block_count }));
                }
                let mut values = Vec::with_capacity(slot_count as usize);
                for index in 0..block_count {
                    let len = r.u32()? as usize;
                    let remaining = slot_count as usize - values.len();
                    if !len.is_multiple_of(8) || len / 8 != remaining.min(cfg.pack_batch as usize) {
                        return Err(HeError::Malformed(WireFault::BlockLength { index, len }));
                    }
                    for chunk in r.take(len)?.chunks_exact(8) {
                        values.push(f64::from_bits(u64::from_be_bytes(chunk.try_into().expect("8 bytes"))));
                    }
                }
                Payload::Mock(values)
            }
        };
        if !r.bytes.is_empty() {
            return Err(HeError::Malformed(WireFault::TrailingBytes));
        }
        Ok(Ciphertext {
            backend,
            key_id,
            slot_count,
            weight: WeightScale { numerator, denominator_bits },
            bias_bits,
            slot_bound,
            payload,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], HeError> {
        if self.bytes.len() < n {
            return Err(HeError::Malformed(WireFault::Truncated));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, HeError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, HeError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, HeError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
