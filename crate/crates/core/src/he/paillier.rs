//! Paillier over `Z_{n^2}` with `g = n + 1` and CRT decryption.

use alloc::vec;
use alloc::vec::Vec;

use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::{One, Zero};
use rand_core::RngCore;

use super::HeError;

/// Candidates tried per prime before keygen gives up.
const PRIME_ATTEMPTS: usize = 100_000;
const MILLER_RABIN_ROUNDS: usize = 40;

const SMALL_PRIMES: [u32; 53] = [
    3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97,
    101, 103, 107, 109, 113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191,
    193, 197, 199, 211, 223, 227, 229, 233, 239, 241, 251,
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublicKey {
    n: BigUint,
    n_squared: BigUint,
}

impl PublicKey {
    pub fn from_modulus(n: BigUint) -> Result<Self, HeError> {
        if n.is_even() || n.bits() < 16 {
            return Err(HeError::InvalidKey("modulus must be odd and nontrivial"));
        }
        let n_squared = &n * &n;
        Ok(PublicKey { n, n_squared })
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn n_squared(&self) -> &BigUint {
        &self.n_squared
    }

    /// The generator, always `n + 1`.
    pub fn g(&self) -> BigUint {
        &self.n + 1u32
    }

    pub fn bits(&self) -> u64 {
        self.n.bits()
    }

    /// The modulus, big-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.n.to_bytes_be()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, HeError> {
        Self::from_modulus(BigUint::from_bytes_be(bytes))
    }

    /// `(1 + m n) r^n mod n^2` for `m < n`.
    pub fn encrypt<R: RngCore + ?Sized>(&self, m: &BigUint, rng: &mut R) -> Result<BigUint, HeError> {
        if m >= &self.n {
            return Err(HeError::PlaintextTooLarge);
        }
        let r = self.random_unit(rng);
        let gm = (BigUint::one() + m * &self.n) % &self.n_squared;
        let rn = r.modpow(&self.n, &self.n_squared);
        Ok(gm * rn % &self.n_squared)
    }

    /// Homomorphic addition of plaintexts.
    pub fn add(&self, a: &BigUint, b: &BigUint) -> BigUint {
        a * b % &self.n_squared
    }

    /// Homomorphic multiplication of the plaintext by `k`.
    pub fn mul_plain(&self, c: &BigUint, k: u64) -> BigUint {
        c.modpow(&BigUint::from(k), &self.n_squared)
    }

    fn random_unit<R: RngCore + ?Sized>(&self, rng: &mut R) -> BigUint {
        let len = self.n.bits().div_ceil(8) as usize + 8;
        let mut buf = vec![0u8; len];
        loop {
            rng.fill_bytes(&mut buf);
            let r = BigUint::from_bytes_be(&buf) % &self.n;
            if !r.is_zero() && r.gcd(&self.n).is_one() {
                return r;
            }
        }
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct SecretKey {
    p: BigUint,
    q: BigUint,
    p_squared: BigUint,
    q_squared: BigUint,
    hp: BigUint,
    hq: BigUint,
    p_inv_q: BigUint,
}

impl core::fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

impl SecretKey {
    pub fn from_primes(p: BigUint, q: BigUint) -> Result<Self, HeError> {
        if p == q || p.is_even() || q.is_even() || p <= BigUint::from(2u32) || q <= BigUint::from(2u32) {
            return Err(HeError::InvalidKey("primes must be distinct odd primes"));
        }
        let n = &p * &q;
        let g = &n + 1u32;
        let p_squared = &p * &p;
        let q_squared = &q * &q;
        let hp = h_factor(&g, &p, &p_squared)?;
        let hq = h_factor(&g, &q, &q_squared)?;
        let p_inv_q = (&p % &q)
            .modinv(&q)
            .ok_or(HeError::InvalidKey("p is not invertible modulo q"))?;
        Ok(SecretKey { p, q, p_squared, q_squared, hp, hq, p_inv_q })
    }

    pub fn p(&self) -> &BigUint {
        &self.p
    }

    pub fn q(&self) -> &BigUint {
        &self.q
    }

    pub fn public_key(&self) -> PublicKey {
        let n = &self.p * &self.q;
        let n_squared = &n * &n;
        PublicKey { n, n_squared }
    }

    pub fn decrypt(&self, c: &BigUint) -> Result<BigUint, HeError> {
        let n = &self.p * &self.q;
        if c.is_zero() || c >= &(&n * &n) {
            return Err(HeError::CorruptBlock);
        }
        let mp = l_function(&c.modpow(&(&self.p - 1u32), &self.p_squared), &self.p) * &self.hp % &self.p;
        let mq = l_function(&c.modpow(&(&self.q - 1u32), &self.q_squared), &self.q) * &self.hq % &self.q;
        // m = mp + p * ((mq - mp) * p^-1 mod q)
        let diff = (&mq + &self.q - (&mp % &self.q)) % &self.q;
        Ok(&mp + &self.p * (diff * &self.p_inv_q % &self.q))
    }

    /// `len(p) || p || len(q) || q`, lengths as big-endian u32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for part in [&self.p, &self.q] {
            let bytes = part.to_bytes_be();
            out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
            out.extend_from_slice(&bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, HeError> {
        let mut rest = bytes;
        let mut parts = [BigUint::zero(), BigUint::zero()];
        for part in parts.iter_mut() {
            if rest.len() < 4 {
                return Err(HeError::InvalidKey("truncated secret key"));
            }
            let len = u32::from_be_bytes([rest[0], rest[1], rest[2], rest[3]]) as usize;
            rest = &rest[4..];
            if rest.len() < len {
                return Err(HeError::InvalidKey("truncated secret key"));
            }
            *part = BigUint::from_bytes_be(&rest[..len]);
            rest = &rest[len..];
        }
        if !rest.is_empty() {
            return Err(HeError::InvalidKey("trailing bytes after secret key"));
        }
        let [p, q] = parts;
        Self::from_primes(p, q)
    }
}

fn l_function(x: &BigUint, d: &BigUint) -> BigUint {
    (x - 1u32) / d
}

fn h_factor(g: &BigUint, p: &BigUint, p_squared: &BigUint) -> Result<BigUint, HeError> {
    let lp = l_function(&g.modpow(&(p - 1u32), p_squared), p) % p;
    lp.modinv(p).ok_or(HeError::InvalidKey("generator is degenerate for this prime"))
}

#[derive(Debug, Clone)]
pub struct KeyPair {
    pub public: PublicKey,
    pub secret: SecretKey,
}

/// Generate a key pair whose modulus has exactly `bits` bits.
pub fn keygen<R: RngCore + ?Sized>(bits: u32, rng: &mut R) -> Result<KeyPair, HeError> {
    if bits < 64 || !bits.is_multiple_of(2) {
        return Err(HeError::InvalidConfig("modulus bits must be even and at least 64"));
    }
    let half = bits as u64 / 2;
    let p = random_prime(half, rng)?;
    let q = loop {
        let q = random_prime(half, rng)?;
        if q != p {
            break q;
        }
    };
    let secret = SecretKey::from_primes(p, q)?;
    let public = secret.public_key();
    debug_assert_eq!(public.bits(), bits as u64);
    Ok(KeyPair { public, secret })
}

fn random_odd_with_top_bits<R: RngCore + ?Sized>(bits: u64, rng: &mut R) -> BigUint {
    let bytes = bits.div_ceil(8) as usize;
    let mut buf = vec![0u8; bytes];
    rng.fill_bytes(&mut buf);
    let excess = (bytes as u64 * 8 - bits) as u32;
    buf[0] &= 0xff >> excess;
    let mut x = BigUint::from_bytes_be(&buf);
    // top two bits set so a product of two such primes has exactly 2*bits bits
    x.set_bit(bits - 1, true);
    x.set_bit(bits - 2, true);
    x.set_bit(0, true);
    x
}

fn random_prime<R: RngCore + ?Sized>(bits: u64, rng: &mut R) -> Result<BigUint, HeError> {
    for _ in 0..PRIME_ATTEMPTS {
        let candidate = random_odd_with_top_bits(bits, rng);
        if is_probable_prime(&candidate, MILLER_RABIN_ROUNDS, rng) {
            return Ok(candidate);
        }
    }
    Err(HeError::PrimeGenerationFailed)
}

/// Trial division by small primes followed by Miller-Rabin with random bases.
pub fn is_probable_prime<R: RngCore + ?Sized>(n: &BigUint, rounds: usize, rng: &mut R) -> bool {
    let two = BigUint::from(2u32);
    if n < &two {
        return false;
    }
    if n.is_even() {
        return n == &two;
    }
    for sp in SMALL_PRIMES {
        let sp_big = BigUint::from(sp);
        if n == &sp_big {
            return true;
        }
        if (n % &sp_big).is_zero() {
            return false;
        }
    }
    let n_minus_one = n - 1u32;
    let s = n_minus_one.trailing_zeros().unwrap_or(0);
    let d = &n_minus_one >> s;
    let byte_len = n.bits().div_ceil(8) as usize + 8;
    let mut buf = vec![0u8; byte_len];
    'witness: for _ in 0..rounds {
        rng.fill_bytes(&mut buf);
        // base in [2, n - 2]
        let a = BigUint::from_bytes_be(&buf) % (n - 3u32) + 2u32;
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n_minus_one {
            continue;
        }
        for _ in 1..s {
            x = &x * &x % n;
            if x == n_minus_one {
                continue 'witness;
            }
        }
        return false;
    }
    true
}
