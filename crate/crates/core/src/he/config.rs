use super::HeError;

/// Parameters shared by every party holding the crypto context.
///
/// Each packed slot is `value_bits + frac_bits + guard_bits` wide. A fresh
/// slot uses the low `value_bits + frac_bits` bits; the guard bits absorb
/// carries from homomorphic sums and plaintext-weight scaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct KeyConfig {
    /// Paillier modulus bit length.
    pub security_bits: u32,
    /// Upper bound on slots per ciphertext block.
    pub pack_batch: u32,
    /// Fixed-point fractional bits of encoded values.
    pub frac_bits: u32,
    /// Integer bits of encoded values, sign included.
    pub value_bits: u32,
    pub guard_bits: u32,
    /// Fractional bits of quantized aggregation weights.
    pub weight_frac_bits: u32,
}

impl Default for KeyConfig {
    fn default() -> Self {
        KeyConfig {
            security_bits: 2048,
            pack_batch: 4096,
            frac_bits: 40,
            value_bits: 16,
            guard_bits: 24,
            weight_frac_bits: 20,
        }
    }
}

/// Fixed header size of the ciphertext wire format.
pub const HEADER_BYTES: u64 = 48;

/// Slot bounds are tracked in a `u128`.
const MAX_SLOT_WIDTH: u32 = 120;

impl KeyConfig {
    /// Default parameters at a 1024-bit modulus. Insecure; for tests and demos.
    pub fn insecure_test() -> Self {
        KeyConfig { security_bits: 1024, ..Self::default() }
    }

    pub fn with_security_bits(self, security_bits: u32) -> Self {
        KeyConfig { security_bits, ..self }
    }

    pub fn validate(&self) -> Result<(), HeError> {
        if !matches!(self.security_bits, 1024 | 2048 | 3072) {
            return Err(HeError::InvalidConfig("security_bits must be 1024, 2048 or 3072"));
        }
        if self.pack_batch == 0 {
            return Err(HeError::InvalidConfig("pack_batch must be at least 1"));
        }
        if self.value_bits < 2 {
            return Err(HeError::InvalidConfig("value_bits must be at least 2"));
        }
        if self.frac_bits > 62 {
            return Err(HeError::InvalidConfig("frac_bits must be at most 62"));
        }
        if self.weight_frac_bits == 0 || self.weight_frac_bits > 32 {
            return Err(HeError::InvalidConfig("weight_frac_bits must be in 1..=32"));
        }
        if self.weight_frac_bits >= self.guard_bits {
            return Err(HeError::InvalidConfig("guard_bits must exceed weight_frac_bits"));
        }
        if self.slot_width() > MAX_SLOT_WIDTH {
            return Err(HeError::InvalidConfig("slot width above 120 bits is unsupported"));
        }
        if self.slot_width() >= self.security_bits {
            return Err(HeError::InvalidConfig("slot width does not fit the modulus"));
        }
        Ok(())
    }

    pub fn is_insecure(&self) -> bool {
        self.security_bits < 2048
    }

    pub fn slot_width(&self) -> u32 {
        self.value_bits + self.frac_bits + self.guard_bits
    }

    /// Bits occupied by a freshly encoded slot.
    pub fn encoded_bits(&self) -> u32 {
        self.value_bits + self.frac_bits
    }

    /// log2 of the per-slot bias added by signed encoding, in fixed-point units.
    pub fn bias_bits(&self) -> u32 {
        self.value_bits - 1 + self.frac_bits
    }

    /// Slots per Paillier block: whole slots below the top bit of the modulus.
    pub fn paillier_slots_per_block(&self) -> usize {
        (((self.security_bits - 1) / self.slot_width()) as usize).min(self.pack_batch as usize)
    }

    /// Paillier ciphertexts live in `Z_{n^2}`, serialized at fixed width.
    pub fn paillier_block_bytes(&self) -> usize {
        (2 * self.security_bits as usize).div_ceil(8)
    }

    /// Exact serialized size of a Paillier ciphertext holding `slot_count`
    /// values.
    pub fn paillier_ciphertext_bytes(&self, slot_count: usize) -> u64 {
        let blocks = slot_count.div_ceil(self.paillier_slots_per_block()) as u64;
        HEADER_BYTES + blocks * (4 + self.paillier_block_bytes() as u64)
    }

    /// Largest magnitude accepted by the encoder (exclusive).
    pub fn max_abs_value(&self) -> f64 {
        libm::ldexp(1.0, (self.value_bits - 1) as i32)
    }
}
