//! k-of-n Shamir sharing of byte strings over GF(2^64 - 59).
//!
//! The secret is laid out as field elements
//! `[byte length, data chunks..., checksum]`, each data chunk being 8 bytes
//! big-endian (the last one zero-padded). The checksum is derived from a
//! SHA-256 of the secret, so reconstructing from shares of two different
//! splits is caught instead of silently yielding garbage.

use alloc::vec::Vec;

use rand_core::RngCore;
use sha2::{Digest, Sha256};

use crate::rng;

/// Largest prime below 2^64.
pub const FIELD_PRIME: u64 = u64::MAX - 58;

pub const MAX_SHARES: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ShareError {
    #[error("invalid share config: need 1 <= k <= n <= 64 (got n={n}, k={k})")]
    InvalidConfig { n: usize, k: usize },
    #[error("secret is empty")]
    EmptySecret,
    #[error("need at least {needed} shares, got {got}")]
    NotEnoughShares { needed: usize, got: usize },
    #[error("duplicate share index {0}")]
    DuplicateIndex(u8),
    #[error("share index {0} is outside 1..=n")]
    BadIndex(u8),
    #[error("shares disagree on chunk count")]
    ChunkCountMismatch,
    #[error("reconstructed secret fails its checksum (shares from different sets?)")]
    ChecksumMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShareConfig {
    pub n: usize,
    pub k: usize,
}

impl ShareConfig {
    pub fn new(n: usize, k: usize) -> Result<Self, ShareError> {
        if k == 0 || k > n || n > MAX_SHARES {
            return Err(ShareError::InvalidConfig { n, k });
        }
        Ok(ShareConfig { n, k })
    }

    pub fn field_prime(&self) -> u64 {
        FIELD_PRIME
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyShare {
    /// Evaluation point, in `1..=n`.
    pub index: u8,
    pub chunks: Vec<u64>,
}

pub(crate) fn add(a: u64, b: u64) -> u64 {
    ((a as u128 + b as u128) % FIELD_PRIME as u128) as u64
}

pub(crate) fn sub(a: u64, b: u64) -> u64 {
    ((a as u128 + FIELD_PRIME as u128 - b as u128) % FIELD_PRIME as u128) as u64
}

pub(crate) fn mul(a: u64, b: u64) -> u64 {
    ((a as u128 * b as u128) % FIELD_PRIME as u128) as u64
}

fn pow(mut base: u64, mut exp: u64) -> u64 {
    let mut acc = 1;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mul(acc, base);
        }
        base = mul(base, base);
        exp >>= 1;
    }
    acc
}

pub(crate) fn inv(a: u64) -> u64 {
    debug_assert!(!a.is_multiple_of(FIELD_PRIME));
    pow(a, FIELD_PRIME - 2)
}

fn checksum(secret: &[u8]) -> u64 {
    let digest = Sha256::new_with_prefix(b"selenc/shamir-checksum/v1").chain_update(secret).finalize();
    u64::from_be_bytes(digest[..8].try_into().expect("8 bytes")) % FIELD_PRIME
}

// 7-byte chunks always sit below the prime, whatever the key bytes are.
const CHUNK: usize = 7;

fn secret_to_chunks(secret: &[u8]) -> Vec<u64> {
    let mut chunks = Vec::with_capacity(secret.len() / CHUNK + 3);
    chunks.push(secret.len() as u64);
    for piece in secret.chunks(CHUNK) {
        let mut word = [0u8; 8];
        word[1..1 + piece.len()].copy_from_slice(piece);
        chunks.push(u64::from_be_bytes(word));
    }
    chunks.push(checksum(secret));
    chunks
}

/// Split `secret` into `cfg.n` shares, any `cfg.k` of which reconstruct it.
pub fn split_secret(secret: &[u8], cfg: ShareConfig, seed: u64) -> Result<Vec<KeyShare>, ShareError> {
    let cfg = ShareConfig::new(cfg.n, cfg.k)?;
    if secret.is_empty() {
        return Err(ShareError::EmptySecret);
    }
    let chunks = secret_to_chunks(secret);
    let mut stream = rng::derive(seed, "shamir", cfg.n as u64, cfg.k as u64);
    let mut shares: Vec<KeyShare> = (1..=cfg.n)
        .map(|i| KeyShare { index: i as u8, chunks: Vec::with_capacity(chunks.len()) })
        .collect();
    let mut coeffs = Vec::with_capacity(cfg.k);
    for &constant in &chunks {
        coeffs.clear();
        coeffs.push(constant);
        coeffs.extend((1..cfg.k).map(|_| random_element(&mut stream)));
        for share in shares.iter_mut() {
            share.chunks.push(eval_poly(&coeffs, u64::from(share.index)));
        }
    }
    Ok(shares)
}

fn random_element<R: RngCore + ?Sized>(rng: &mut R) -> u64 {
    loop {
        let v = rng.next_u64();
        if v < FIELD_PRIME {
            return v;
        }
    }
}

fn eval_poly(coeffs: &[u64], x: u64) -> u64 {
    coeffs.iter().rev().fold(0, |acc, &c| add(mul(acc, x), c))
}

/// Lagrange interpolation at zero over the given points.
pub fn interpolate_at_zero(points: &[(u64, u64)]) -> u64 {
    let mut acc = 0;
    for (i, &(xi, yi)) in points.iter().enumerate() {
        let mut num = 1;
        let mut den = 1;
        for (j, &(xj, _)) in points.iter().enumerate() {
            if i != j {
                num = mul(num, xj);
                den = mul(den, sub(xj, xi));
            }
        }
        acc = add(acc, mul(yi, mul(num, inv(den))));
    }
    acc
}

/// Rebuild the secret from at least `cfg.k` distinct shares.
pub fn reconstruct_secret(shares: &[KeyShare], cfg: ShareConfig) -> Result<Vec<u8>, ShareError> {
    let cfg = ShareConfig::new(cfg.n, cfg.k)?;
    if shares.len() < cfg.k {
        return Err(ShareError::NotEnoughShares { needed: cfg.k, got: shares.len() });
    }
    let mut seen = 0u128;
    for s in shares {
        if s.index == 0 || usize::from(s.index) > cfg.n {
            return Err(ShareError::BadIndex(s.index));
        }
        if seen & (1 << s.index) != 0 {
            return Err(ShareError::DuplicateIndex(s.index));
        }
        seen |= 1 << s.index;
    }
    let width = shares[0].chunks.len();
    if width < 2 || shares.iter().any(|s| s.chunks.len() != width) {
        return Err(ShareError::ChunkCountMismatch);
    }
    let used = &shares[..cfg.k];
    let chunks: Vec<u64> = (0..width)
        .map(|c| {
            let points: Vec<(u64, u64)> = used.iter().map(|s| (u64::from(s.index), s.chunks[c])).collect();
            interpolate_at_zero(&points)
        })
        .collect();

    let len = chunks[0] as usize;
    let data = &chunks[1..width - 1];
    if len.div_ceil(CHUNK) != data.len() || data.iter().any(|c| *c >> (8 * CHUNK) != 0) {
        return Err(ShareError::ChecksumMismatch);
    }
    let mut secret: Vec<u8> = data.iter().flat_map(|c| c.to_be_bytes()[1..].to_vec()).collect();
    if secret[len..].iter().any(|b| *b != 0) {
        return Err(ShareError::ChecksumMismatch);
    }
    secret.truncate(len);
    if checksum(&secret) != chunks[width - 1] {
        return Err(ShareError::ChecksumMismatch);
    }
    Ok(secret)
}
