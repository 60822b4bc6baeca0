//! Encryption masks: which parameter indices travel encrypted.

use alloc::vec;
use alloc::vec::Vec;

use crate::model::ModelShape;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MaskError {
    #[error("mask covers {mask} parameters but the vector has {values}")]
    LengthMismatch { mask: usize, values: usize },
    #[error("ratio {0} is outside [0, 1]")]
    RatioOutOfRange(f64),
    #[error("index {index} out of range for {len} parameters")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("partition indices overlap or leave gaps")]
    BadPartition,
    #[error("malformed mask file: {0}")]
    Malformed(&'static str),
}

/// Number of parameters selected by ratio `p` over `n` parameters:
/// `ceil(p * n)`, with products within 1e-9 of an integer snapped to it so
/// that e.g. `0.1 * 30` selects 3 and not 4.
pub fn selection_count(p: f64, n: usize) -> usize {
    let x = p * n as f64;
    let nearest = libm::round(x);
    let count = if libm::fabs(x - nearest) <= 1e-9 * (1.0 + x) { nearest } else { libm::ceil(x) };
    (count as usize).min(n)
}

/// Bitset over parameter indices; a set bit means "encrypt".
#[derive(Debug, Clone, PartialEq)]
pub struct EncryptionMask {
    words: Vec<u64>,
    len: usize,
    count: usize,
    p: f64,
}

impl EncryptionMask {
    pub fn empty(len: usize) -> Self {
        EncryptionMask { words: vec![0; len.div_ceil(64)], len, count: 0, p: 0.0 }
    }

    pub fn full(len: usize) -> Self {
        let mut m = Self::empty(len);
        for i in 0..len {
            m.set(i);
        }
        m.p = 1.0;
        m
    }

    /// Mask from explicit indices; `p` records the ratio that produced it.
    pub fn from_indices(len: usize, indices: &[usize], p: f64) -> Result<Self, MaskError> {
        if !(0.0..=1.0).contains(&p) {
            return Err(MaskError::RatioOutOfRange(p));
        }
        let mut m = Self::empty(len);
        for &i in indices {
            if i >= len {
                return Err(MaskError::IndexOutOfRange { index: i, len });
            }
            m.set(i);
        }
        m.p = p;
        Ok(m)
    }

    fn set(&mut self, i: usize) {
        let (w, b) = (i / 64, i % 64);
        if self.words[w] & (1 << b) == 0 {
            self.words[w] |= 1 << b;
            self.count += 1;
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn contains(&self, i: usize) -> bool {
        i < self.len && self.words[i / 64] & (1 << (i % 64)) != 0
    }

    pub fn encrypted_count(&self) -> usize {
        self.count
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(move |&i| self.contains(i))
    }

    pub fn complement_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(move |&i| !self.contains(i))
    }

    pub fn is_subset_of(&self, other: &EncryptionMask) -> bool {
        self.len == other.len && self.words.iter().zip(&other.words).all(|(a, b)| a & !b == 0)
    }

    /// Union; the resulting `p` is the realized fraction.
    pub fn union(&self, other: &EncryptionMask) -> Result<EncryptionMask, MaskError> {
        if self.len != other.len {
            return Err(MaskError::LengthMismatch { mask: other.len, values: self.len });
        }
        let words: Vec<u64> = self.words.iter().zip(&other.words).map(|(a, b)| a | b).collect();
        let count = words.iter().map(|w| w.count_ones() as usize).sum();
        let p = if self.len == 0 { 0.0 } else { count as f64 / self.len as f64 };
        Ok(EncryptionMask { words, len: self.len, count, p })
    }

    /// `"MASK" version:u8 n:u32le p:f64le` then the bitset, bit `i` at byte
    /// `i / 8`, position `i % 8`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(17 + self.len.div_ceil(8));
        out.extend_from_slice(MASK_MAGIC);
        out.push(MASK_VERSION);
        out.extend_from_slice(&(self.len as u32).to_le_bytes());
        out.extend_from_slice(&self.p.to_le_bytes());
        for byte in 0..self.len.div_ceil(8) {
            out.push((self.words[byte / 8] >> ((byte % 8) * 8)) as u8);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, MaskError> {
        if bytes.len() < 17 || &bytes[..4] != MASK_MAGIC {
            return Err(MaskError::Malformed("bad magic or short header"));
        }
        if bytes[4] != MASK_VERSION {
            return Err(MaskError::Malformed("unsupported version"));
        }
        let len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let p = f64::from_le_bytes(bytes[9..17].try_into().expect("8 bytes"));
        if !(0.0..=1.0).contains(&p) {
            return Err(MaskError::Malformed("ratio outside [0, 1]"));
        }
        let body = &bytes[17..];
        if body.len() != len.div_ceil(8) {
            return Err(MaskError::Malformed("bitset length does not match N"));
        }
        let mut m = Self::empty(len);
        for i in 0..len {
            if body[i / 8] & (1 << (i % 8)) != 0 {
                m.set(i);
            }
        }
        if !len.is_multiple_of(8) && body[len / 8] >> (len % 8) != 0 {
            return Err(MaskError::Malformed("bits set past N"));
        }
        m.p = p;
        Ok(m)
    }
}

pub const MASK_MAGIC: &[u8; 4] = b"MASK";
pub const MASK_VERSION: u8 = 2;

/// Top `selection_count(p, N)` indices by score; ties go to the lower index.
pub fn select_mask(scores: &[f64], p: f64) -> Result<EncryptionMask, MaskError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(MaskError::RatioOutOfRange(p));
    }
    let count = selection_count(p, scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let by_rank = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if count > 0 && count < order.len() {
        order.select_nth_unstable_by(count - 1, by_rank);
    }
    EncryptionMask::from_indices(scores.len(), &order[..count], p)
}

/// Values at a set of indices, in increasing index order.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexedPart {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

/// Split `w` into (encrypted part, clear part).
pub fn apply_mask(w: &[f64], mask: &EncryptionMask) -> Result<(IndexedPart, IndexedPart), MaskError> {
    if w.len() != mask.len() {
        return Err(MaskError::LengthMismatch { mask: mask.len(), values: w.len() });
    }
    let mut masked = IndexedPart { indices: Vec::with_capacity(mask.count), values: Vec::with_capacity(mask.count) };
    let mut clear = IndexedPart {
        indices: Vec::with_capacity(w.len() - mask.count),
        values: Vec::with_capacity(w.len() - mask.count),
    };
    for (i, &v) in w.iter().enumerate() {
        let part = if mask.contains(i) { &mut masked } else { &mut clear };
        part.indices.push(i);
        part.values.push(v);
    }
    Ok((masked, clear))
}

/// Inverse of [`apply_mask`].
pub fn merge(masked: &IndexedPart, clear: &IndexedPart, len: usize) -> Result<Vec<f64>, MaskError> {
    if masked.indices.len() != masked.values.len()
        || clear.indices.len() != clear.values.len()
        || masked.indices.len() + clear.indices.len() != len
    {
        return Err(MaskError::BadPartition);
    }
    let mut out = vec![0.0; len];
    let mut filled = vec![false; len];
    for part in [masked, clear] {
        for (&i, &v) in part.indices.iter().zip(&part.values) {
            if i >= len || filled[i] {
                return Err(MaskError::BadPartition);
            }
            filled[i] = true;
            out[i] = v;
        }
    }
    Ok(out)
}

/// `base` plus every parameter of the first and last layers.
pub fn layer_recipe_mask(shape: &ModelShape, base: &EncryptionMask) -> Result<EncryptionMask, MaskError> {
    if base.len() != shape.total_params() {
        return Err(MaskError::LengthMismatch { mask: base.len(), values: shape.total_params() });
    }
    let last = shape.layers().len() - 1;
    let mut edge = EncryptionMask::empty(base.len());
    for i in shape.layer_range(0).chain(shape.layer_range(last)) {
        edge.set(i);
    }
    base.union(&edge)
}
