//! Key contexts: the public half encrypts and evaluates, only the secret half
//! decrypts. An aggregation server is handed a [`PublicContext`] and nothing
//! else.

use alloc::vec::Vec;

use num_bigint::BigUint;
use num_traits::{ToPrimitive, Zero};
use rand_core::RngCore;
use sha2::{Digest, Sha256};

use super::ciphertext::{BackendId, Ciphertext, Payload, WeightScale};
use super::paillier::{KeyPair, PublicKey, SecretKey};
use super::{HeError, KeyConfig};

#[derive(Debug, Clone)]
enum PublicBackend {
    Paillier(PublicKey),
    Mock { expansion: f64 },
}

#[derive(Debug, Clone)]
pub struct PublicContext {
    cfg: KeyConfig,
    backend: PublicBackend,
    key_id: u64,
}

impl PublicContext {
    pub fn paillier(cfg: KeyConfig, pk: PublicKey) -> Result<Self, HeError> {
        cfg.validate()?;
        if pk.bits() != u64::from(cfg.security_bits) {
            return Err(HeError::InvalidKey("modulus size does not match security_bits"));
        }
        let key_id = key_fingerprint(&cfg, BackendId::Paillier, &pk.n().to_bytes_be());
        Ok(PublicContext { cfg, backend: PublicBackend::Paillier(pk), key_id })
    }

    fn mock(cfg: KeyConfig, expansion: f64) -> Result<Self, HeError> {
        cfg.validate()?;
        if !(expansion >= 1.0 && expansion.is_finite()) {
            return Err(HeError::ExpansionRatio(expansion));
        }
        let key_id = key_fingerprint(&cfg, BackendId::Mock, &expansion.to_bits().to_be_bytes());
        Ok(PublicContext { cfg, backend: PublicBackend::Mock { expansion }, key_id })
    }

    pub fn cfg(&self) -> &KeyConfig {
        &self.cfg
    }

    pub fn backend_id(&self) -> BackendId {
        match self.backend {
            PublicBackend::Paillier(_) => BackendId::Paillier,
            PublicBackend::Mock { .. } => BackendId::Mock,
        }
    }

    pub fn key_id(&self) -> u64 {
        self.key_id
    }

    pub fn paillier_key(&self) -> Option<&PublicKey> {
        match &self.backend {
            PublicBackend::Paillier(pk) => Some(pk),
            PublicBackend::Mock { .. } => None,
        }
    }

    pub fn expansion_ratio(&self) -> Option<f64> {
        match self.backend {
            PublicBackend::Mock { expansion } => Some(expansion),
            PublicBackend::Paillier(_) => None,
        }
    }

    pub fn slots_per_block(&self) -> usize {
        match self.backend {
            PublicBackend::Paillier(_) => self.cfg.paillier_slots_per_block(),
            PublicBackend::Mock { .. } => self.cfg.pack_batch as usize,
        }
    }

    pub fn blocks_for(&self, slot_count: usize) -> usize {
        slot_count.div_ceil(self.slots_per_block())
    }

    /// Bytes accounted for a ciphertext of `slot_count` values.
    ///
    /// Paillier: the exact serialized length. Mock: the emulated size,
    /// `8 * slot_count * expansion` rounded to the nearest byte.
    pub fn ciphertext_bytes(&self, slot_count: usize) -> u64 {
        match self.backend {
            PublicBackend::Paillier(_) => self.cfg.paillier_ciphertext_bytes(slot_count),
            PublicBackend::Mock { expansion } => libm::round(8.0 * slot_count as f64 * expansion) as u64,
        }
    }

    pub fn reported_bytes(&self, c: &Ciphertext) -> u64 {
        self.ciphertext_bytes(c.slot_count())
    }

    /// Encode `values` as biased fixed-point slots and encrypt them packed.
    pub fn encrypt_vector<R: RngCore + ?Sized>(
        &self,
        values: &[f64],
        rng: &mut R,
    ) -> Result<Ciphertext, HeError> {
        if values.is_empty() {
            return Err(HeError::EmptyVector);
        }
        if values.len() > u32::MAX as usize {
            return Err(HeError::InvalidConfig("vector longer than u32::MAX slots"));
        }
        let slots = encode(&self.cfg, values)?;
        let payload = match &self.backend {
            PublicBackend::Paillier(pk) => {
                let sw = self.cfg.slot_width() as usize;
                let mut blocks = Vec::with_capacity(self.blocks_for(slots.len()));
                for chunk in slots.chunks(self.slots_per_block()) {
                    let mut m = BigUint::zero();
                    for s in chunk.iter().rev() {
                        m = (m << sw) + BigUint::from(*s);
                    }
                    blocks.push(pk.encrypt(&m, rng)?);
                }
                Payload::Paillier(blocks)
            }
            PublicBackend::Mock { .. } => Payload::Mock(values.to_vec()),
        };
        Ok(Ciphertext {
            backend: self.backend_id(),
            key_id: self.key_id,
            slot_count: values.len() as u32,
            weight: WeightScale::FRESH,
            bias_bits: self.cfg.bias_bits() as u8,
            slot_bound: (1u128 << self.cfg.encoded_bits()) - 1,
            payload,
        })
    }

    fn check_owned(&self, c: &Ciphertext) -> Result<(), HeError> {
        if c.backend != self.backend_id() {
            return Err(HeError::BackendMismatch);
        }
        if c.key_id != self.key_id {
            return Err(HeError::KeyMismatch);
        }
        Ok(())
    }

    /// Slot-wise sum.
    pub fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, HeError> {
        self.check_owned(a)?;
        self.check_owned(b)?;
        if a.slot_count != b.slot_count {
            return Err(HeError::SlotCountMismatch { left: a.slot_count(), right: b.slot_count() });
        }
        if a.weight.denominator_bits != b.weight.denominator_bits {
            return Err(HeError::WeightScaleMismatch);
        }
        let slot_bound = a
            .slot_bound
            .checked_add(b.slot_bound)
            .filter(|bound| bound >> self.cfg.slot_width() == 0)
            .ok_or(HeError::GuardOverflow)?;
        let numerator = a.weight.numerator.checked_add(b.weight.numerator).ok_or(HeError::GuardOverflow)?;
        let payload = match (&self.backend, &a.payload, &b.payload) {
            (PublicBackend::Paillier(pk), Payload::Paillier(x), Payload::Paillier(y)) => {
                Payload::Paillier(x.iter().zip(y).map(|(cx, cy)| pk.add(cx, cy)).collect())
            }
            (PublicBackend::Mock { .. }, Payload::Mock(x), Payload::Mock(y)) => {
                Payload::Mock(x.iter().zip(y).map(|(vx, vy)| vx + vy).collect())
            }
            _ => return Err(HeError::BackendMismatch),
        };
        Ok(Ciphertext {
            weight: WeightScale { numerator, denominator_bits: a.weight.denominator_bits },
            slot_bound,
            payload,
            ..a.header_only()
        })
    }

    /// Multiply every slot by the plaintext weight `alpha` in `[0, 1]`.
    ///
    /// `alpha` is quantized to `weight_frac_bits` fractional bits (the mock
    /// backend multiplies exactly). Only one level of scaling is supported.
    pub fn scale(&self, c: &Ciphertext, alpha: f64) -> Result<Ciphertext, HeError> {
        self.check_owned(c)?;
        if !(0.0..=1.0).contains(&alpha) {
            return Err(HeError::AlphaOutOfRange(alpha));
        }
        if c.weight.is_scaled() {
            return Err(HeError::DepthExceeded);
        }
        let weight = quantize_weight(&self.cfg, alpha);
        let slot_bound = c
            .slot_bound
            .checked_mul(u128::from(weight))
            .filter(|bound| bound >> self.cfg.slot_width() == 0)
            .ok_or(HeError::WeightOverflow)?;
        let numerator = c.weight.numerator.checked_mul(weight).ok_or(HeError::WeightOverflow)?;
        let payload = match (&self.backend, &c.payload) {
            (PublicBackend::Paillier(pk), Payload::Paillier(blocks)) => {
                Payload::Paillier(blocks.iter().map(|b| pk.mul_plain(b, weight)).collect())
            }
            (PublicBackend::Mock { .. }, Payload::Mock(values)) => {
                Payload::Mock(values.iter().map(|v| v * alpha).collect())
            }
            _ => return Err(HeError::BackendMismatch),
        };
        Ok(Ciphertext {
            weight: WeightScale { numerator, denominator_bits: self.cfg.weight_frac_bits as u8 },
            slot_bound,
            payload,
            ..c.header_only()
        })
    }

    /// `sum_i alpha_i * c_i`, scaling each input once.
    pub fn weighted_sum(&self, cts: &[&Ciphertext], weights: &[f64]) -> Result<Ciphertext, HeError> {
        if cts.is_empty() || cts.len() != weights.len() {
            return Err(HeError::EmptyVector);
        }
        let mut acc = self.scale(cts[0], weights[0])?;
        for (c, w) in cts.iter().zip(weights).skip(1) {
            acc = self.add(&acc, &self.scale(c, *w)?)?;
        }
        Ok(acc)
    }

    pub fn serialize(&self, c: &Ciphertext) -> Vec<u8> {
        c.to_bytes(&self.cfg)
    }

    /// Parse and check that the ciphertext belongs to this context.
    pub fn deserialize(&self, bytes: &[u8]) -> Result<Ciphertext, HeError> {
        let c = Ciphertext::from_bytes(bytes, &self.cfg)?;
        self.check_owned(&c)?;
        Ok(c)
    }
}

#[derive(Clone)]
enum SecretBackend {
    Paillier(SecretKey),
    Mock,
}

/// Full key material. Held by clients, never by the aggregation server.
#[derive(Clone)]
pub struct SecretContext {
    public: PublicContext,
    secret: SecretBackend,
}

impl core::fmt::Debug for SecretContext {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("SecretContext").field("public", &self.public).finish_non_exhaustive()
    }
}

impl SecretContext {
    pub fn paillier(cfg: KeyConfig, keys: KeyPair) -> Result<Self, HeError> {
        let public = PublicContext::paillier(cfg, keys.public)?;
        Ok(SecretContext { public, secret: SecretBackend::Paillier(keys.secret) })
    }

    pub fn from_secret_key(cfg: KeyConfig, sk: SecretKey) -> Result<Self, HeError> {
        let public = PublicContext::paillier(cfg, sk.public_key())?;
        Ok(SecretContext { public, secret: SecretBackend::Paillier(sk) })
    }

    /// Plaintext-backed backend that reports ciphertext sizes as
    /// `expansion_ratio` times the plaintext size.
    pub fn mock(cfg: KeyConfig, expansion_ratio: f64) -> Result<Self, HeError> {
        Ok(SecretContext { public: PublicContext::mock(cfg, expansion_ratio)?, secret: SecretBackend::Mock })
    }

    pub fn public(&self) -> &PublicContext {
        &self.public
    }

    pub fn secret_key(&self) -> Option<&SecretKey> {
        match &self.secret {
            SecretBackend::Paillier(sk) => Some(sk),
            SecretBackend::Mock => None,
        }
    }

    pub fn decrypt_vector(&self, c: &Ciphertext) -> Result<Vec<f64>, HeError> {
        self.public.check_owned(c)?;
        let cfg = &self.public.cfg;
        match (&self.secret, &c.payload) {
            (SecretBackend::Paillier(sk), Payload::Paillier(blocks)) => {
                let per_block = self.public.slots_per_block();
                let sw = cfg.slot_width() as usize;
                let mask = (BigUint::from(1u8) << sw) - 1u8;
                let unit = cfg.frac_bits as i32 + i32::from(c.weight.denominator_bits);
                let bias = i128::from(c.weight.numerator) << cfg.bias_bits();
                let mut out = Vec::with_capacity(c.slot_count());
                for (index, block) in blocks.iter().enumerate() {
                    let m = sk.decrypt(block)?;
                    let in_block = (c.slot_count() - index * per_block).min(per_block);
                    if m.bits() > (in_block * sw) as u64 {
                        return Err(HeError::DecodeRange { block: index });
                    }
                    for j in 0..in_block {
                        let slot = ((&m >> (j * sw)) & &mask)
                            .to_u128()
                            .filter(|s| *s <= c.slot_bound)
                            .ok_or(HeError::DecodeRange { block: index })?;
                        out.push(libm::ldexp((slot as i128 - bias) as f64, -unit));
                    }
                }
                Ok(out)
            }
            (SecretBackend::Mock, Payload::Mock(values)) => Ok(values.clone()),
            _ => Err(HeError::BackendMismatch),
        }
    }
}

/// Generate Paillier keys for `cfg`, deterministically from `seed`.
pub fn keygen(cfg: &KeyConfig, seed: u64) -> Result<KeyPair, HeError> {
    cfg.validate()?;
    let mut rng = crate::rng::derive(seed, "keygen", 0, 0);
    super::paillier::keygen(cfg.security_bits, &mut rng)
}

/// Integer weight `round(alpha * 2^weight_frac_bits)`.
pub fn quantize_weight(cfg: &KeyConfig, alpha: f64) -> u64 {
    libm::round(libm::ldexp(alpha, cfg.weight_frac_bits as i32)) as u64
}

/// Quantize aggregation weights together so the integer weights sum to
/// exactly `round(sum(alphas) * 2^weight_frac_bits)` (largest remainder,
/// ties to the lower index). Returns the dyadic weights `a_i / 2^f`, which
/// `scale` then applies without further rounding.
pub fn quantize_weights(cfg: &KeyConfig, alphas: &[f64]) -> Result<Vec<f64>, HeError> {
    if let Some(&a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(HeError::AlphaOutOfRange(a));
    }
    let f = cfg.weight_frac_bits as i32;
    let scaled: Vec<f64> = alphas.iter().map(|a| libm::ldexp(*a, f)).collect();
    let mut ints: Vec<u64> = scaled.iter().map(|s| libm::floor(*s) as u64).collect();
    let target = libm::round(scaled.iter().sum::<f64>()) as u64;
    let mut order: Vec<usize> = (0..alphas.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = scaled[a] - libm::floor(scaled[a]);
        let rb = scaled[b] - libm::floor(scaled[b]);
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let short = target.saturating_sub(ints.iter().sum());
    for &i in order.iter().take(short as usize) {
        ints[i] += 1;
    }
    Ok(ints.into_iter().map(|w| libm::ldexp(w as f64, -f)).collect())
}

fn encode(cfg: &KeyConfig, values: &[f64]) -> Result<Vec<u128>, HeError> {
    let limit = 1i128 << cfg.encoded_bits();
    let bias = 1i128 << cfg.bias_bits();
    values
        .iter()
        .enumerate()
        .map(|(index, &value)| {
            if !value.is_finite() || libm::fabs(value) >= cfg.max_abs_value() {
                return Err(HeError::Overflow { index, value });
            }
            let shifted = libm::round(libm::ldexp(value, cfg.frac_bits as i32)) as i128 + bias;
            if !(0..limit).contains(&shifted) {
                return Err(HeError::Overflow { index, value });
            }
            Ok(shifted as u128)
        })
        .collect()
}

fn key_fingerprint(cfg: &KeyConfig, backend: BackendId, material: &[u8]) -> u64 {
    let mut h = Sha256::new();
    h.update(b"selenc/key-id/v1");
    h.update([backend as u8]);
    for field in [
        cfg.security_bits,
        cfg.pack_batch,
        cfg.frac_bits,
        cfg.value_bits,
        cfg.guard_bits,
        cfg.weight_frac_bits,
    ] {
        h.update(field.to_be_bytes());
    }
    h.update(material);
    let digest = h.finalize();
    u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"))
}
