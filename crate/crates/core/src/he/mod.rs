//! Additively homomorphic encryption of packed fixed-point vectors.
//!
//! Values are encoded as `round(v * 2^frac_bits) + 2^(value_bits - 1 + frac_bits)`
//! so every slot is a nonnegative integer, then packed side by side into one
//! plaintext per block. Two backends share this layout: Paillier, and a mock
//! that keeps plaintext values and only emulates ciphertext size.
//!
//! Supported evaluation is exactly what weighted averaging needs: slot-wise
//! addition and one level of plaintext-weight scaling.

mod backend;
mod ciphertext;
mod config;
pub mod paillier;

pub use backend::{keygen, quantize_weight, quantize_weights, PublicContext, SecretContext};
pub use ciphertext::{BackendId, Ciphertext, WeightScale, WireFault, MAGIC, WIRE_VERSION};
pub use config::{KeyConfig, HEADER_BYTES};
pub use paillier::{KeyPair, PublicKey, SecretKey};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HeError {
    #[error("invalid key config: {0}")]
    InvalidConfig(&'static str),
    #[error("invalid key: {0}")]
    InvalidKey(&'static str),
    #[error("prime generation failed after bounded retries")]
    PrimeGenerationFailed,
    #[error("plaintext does not fit below the modulus")]
    PlaintextTooLarge,
    #[error("cannot encrypt an empty vector")]
    EmptyVector,
    #[error("value {value} at index {index} is outside the encodable range")]
    Overflow { index: usize, value: f64 },
    #[error("ciphertexts come from different backends")]
    BackendMismatch,
    #[error("ciphertext was produced under a different key")]
    KeyMismatch,
    #[error("slot counts differ ({left} vs {right})")]
    SlotCountMismatch { left: usize, right: usize },
    #[error("cannot add ciphertexts carrying different weight scales")]
    WeightScaleMismatch,
    #[error("guard-bit budget exhausted: too many summands for the slot width")]
    GuardOverflow,
    #[error("ciphertext is already weight-scaled; only one multiplicative level is supported")]
    DepthExceeded,
    #[error("weight scaling would overflow the slot width")]
    WeightOverflow,
    #[error("aggregation weight {0} is outside [0, 1]")]
    AlphaOutOfRange(f64),
    #[error("decrypted block {block} fails the slot range check (wrong key or corrupted data)")]
    DecodeRange { block: usize },
    #[error("ciphertext block is not an element of Z_(n^2)")]
    CorruptBlock,
    #[error("malformed ciphertext: {0}")]
    Malformed(WireFault),
    #[error("expansion ratio {0} must be a finite value >= 1")]
    ExpansionRatio(f64),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use alloc::vec;
    use alloc::vec::Vec;
    use std::sync::OnceLock;

    fn test_keys() -> &'static SecretContext {
        static KEYS: OnceLock<SecretContext> = OnceLock::new();
        KEYS.get_or_init(|| {
            let cfg = KeyConfig::insecure_test();
            SecretContext::paillier(cfg, keygen(&cfg, 7).unwrap()).unwrap()
        })
    }

    #[test]
    fn joint_weights_sum_exactly() {
        let cfg = KeyConfig::insecure_test();
        let alphas = [0.1, 0.2, 0.3, 0.15, 0.25];
        let q = quantize_weights(&cfg, &alphas).unwrap();
        let total: u64 = q.iter().map(|w| quantize_weight(&cfg, *w)).sum();
        assert_eq!(total, 1 << cfg.weight_frac_bits);
        for (a, w) in alphas.iter().zip(&q) {
            assert!((a - w).abs() <= 2f64.powi(-(cfg.weight_frac_bits as i32)));
        }
        // thirds: two floors and one round-up
        let q = quantize_weights(&cfg, &[1.0 / 3.0; 3]).unwrap();
        let ints: Vec<u64> = q.iter().map(|w| quantize_weight(&cfg, *w)).collect();
        assert_eq!(ints.iter().sum::<u64>(), 1 << cfg.weight_frac_bits);
        assert_eq!(ints[0], ints[1] + 1);
        assert!(quantize_weights(&cfg, &[1.5]).is_err());
    }

    #[test]
    fn roundtrip_small_integer() {
        let sk = test_keys();
        let c = sk.public().encrypt_vector(&[42.0], &mut seeded(1)).unwrap();
        assert_eq!(sk.decrypt_vector(&c).unwrap(), vec![42.0]);
    }

    #[test]
    fn keygen_is_deterministic() {
        let cfg = KeyConfig::insecure_test();
        let a = keygen(&cfg, 7).unwrap();
        assert_eq!(a.public.n(), test_keys().public().paillier_key().unwrap().n());
        assert_ne!(keygen(&cfg, 8).unwrap().public.n(), a.public.n());
    }

    #[test]
    fn keygen_rejects_512_bits() {
        let cfg = KeyConfig::default().with_security_bits(512);
        assert!(matches!(keygen(&cfg, 1), Err(HeError::InvalidConfig(_))));
    }

    #[test]
    fn dyadic_values_are_exact() {
        let sk = test_keys();
        let c = sk.public().encrypt_vector(&[0.5, -0.25], &mut seeded(2)).unwrap();
        assert_eq!(sk.decrypt_vector(&c).unwrap(), vec![0.5, -0.25]);
        let z = sk.public().encrypt_vector(&[0.0; 3], &mut seeded(3)).unwrap();
        assert_eq!(sk.decrypt_vector(&z).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn overflow_and_empty_are_rejected() {
        let pk = test_keys().public();
        let mut rng = seeded(4);
        assert!(matches!(
            pk.encrypt_vector(&[1.0, 1048576.0], &mut rng),
            Err(HeError::Overflow { index: 1, .. })
        ));
        assert!(matches!(pk.encrypt_vector(&[f64::NAN], &mut rng), Err(HeError::Overflow { .. })));
        assert_eq!(pk.encrypt_vector(&[], &mut rng), Err(HeError::EmptyVector));
    }

    #[test]
    fn add_and_scale() {
        let sk = test_keys();
        let pk = sk.public();
        let mut rng = seeded(5);
        let a = pk.encrypt_vector(&[3.0], &mut rng).unwrap();
        let b = pk.encrypt_vector(&[4.0], &mut rng).unwrap();
        assert_eq!(sk.decrypt_vector(&pk.add(&a, &b).unwrap()).unwrap(), vec![7.0]);

        let v = [1.5, -2.0, 0.125];
        let cv = pk.encrypt_vector(&v, &mut rng).unwrap();
        let zeros = pk.encrypt_vector(&[0.0; 3], &mut rng).unwrap();
        assert_eq!(sk.decrypt_vector(&pk.add(&cv, &zeros).unwrap()).unwrap(), v.to_vec());

        let two = pk.encrypt_vector(&[2.0], &mut rng).unwrap();
        let half = sk.decrypt_vector(&pk.scale(&two, 0.5).unwrap()).unwrap();
        assert!((half[0] - 1.0).abs() <= 2f64.powi(-20));
        let same = sk.decrypt_vector(&pk.scale(&two, 1.0).unwrap()).unwrap();
        assert!((same[0] - 2.0).abs() <= 2f64.powi(-20));
    }

    #[test]
    fn second_scale_is_rejected() {
        let pk = test_keys().public();
        let c = pk.encrypt_vector(&[1.0], &mut seeded(6)).unwrap();
        let once = pk.scale(&c, 0.5).unwrap();
        assert_eq!(pk.scale(&once, 0.5), Err(HeError::DepthExceeded));
        assert!(matches!(pk.scale(&c, 1.5), Err(HeError::AlphaOutOfRange(_))));
        assert!(matches!(pk.scale(&c, f64::NAN), Err(HeError::AlphaOutOfRange(_))));
    }

    #[test]
    fn scaled_and_unscaled_do_not_mix() {
        let pk = test_keys().public();
        let mut rng = seeded(7);
        let c = pk.encrypt_vector(&[1.0], &mut rng).unwrap();
        let s = pk.scale(&c, 0.5).unwrap();
        assert_eq!(pk.add(&c, &s), Err(HeError::WeightScaleMismatch));
    }

    #[test]
    fn guard_budget_allows_exactly_2_pow_24_summands() {
        // Doubling reaches 2^24 summands in 24 additions; one more fresh
        // summand must trip the budget.
        let pk = test_keys().public();
        let mut rng = seeded(8);
        let fresh = pk.encrypt_vector(&[0.0], &mut rng).unwrap();
        let mut acc = fresh.clone();
        for _ in 0..24 {
            acc = pk.add(&acc, &acc).unwrap();
        }
        assert_eq!(acc.weight_scale().numerator, 1 << 24);
        assert_eq!(pk.add(&acc, &fresh), Err(HeError::GuardOverflow));
    }

    #[test]
    fn weighted_mean_of_three() {
        let sk = test_keys();
        let pk = sk.public();
        let mut rng = seeded(9);
        let vs: [[f64; 2]; 3] = [[1.0, -3.0], [0.7, 2.5], [-4.2, 0.01]];
        let cts: Vec<Ciphertext> = vs.iter().map(|v| pk.encrypt_vector(v, &mut rng).unwrap()).collect();
        let refs: Vec<&Ciphertext> = cts.iter().collect();
        let out = sk.decrypt_vector(&pk.weighted_sum(&refs, &[1.0 / 3.0; 3]).unwrap()).unwrap();
        for j in 0..2 {
            let mean = (vs[0][j] + vs[1][j] + vs[2][j]) / 3.0;
            assert!((out[j] - mean).abs() <= 3.0 * 2f64.powi(-20) + 2f64.powi(-40), "{j}");
        }
    }

    #[test]
    fn wrong_key_is_detected() {
        let cfg = KeyConfig::insecure_test();
        let other = SecretContext::paillier(cfg, keygen(&cfg, 99).unwrap()).unwrap();
        let c = test_keys().public().encrypt_vector(&[1.0], &mut seeded(10)).unwrap();
        assert_eq!(other.decrypt_vector(&c), Err(HeError::KeyMismatch));
    }

    #[test]
    fn backends_never_combine() {
        let cfg = KeyConfig::insecure_test();
        let mock = SecretContext::mock(cfg, 16.66).unwrap();
        let mut rng = seeded(11);
        let m = mock.public().encrypt_vector(&[1.0], &mut rng).unwrap();
        let p = test_keys().public().encrypt_vector(&[1.0], &mut rng).unwrap();
        assert_eq!(test_keys().public().add(&p, &m), Err(HeError::BackendMismatch));
        assert_eq!(mock.public().add(&m, &p), Err(HeError::BackendMismatch));
    }

    #[test]
    fn mock_is_exact_and_sized_by_ratio() {
        let cfg = KeyConfig::default();
        let mock = SecretContext::mock(cfg, 16.66).unwrap();
        let pk = mock.public();
        let mut rng = seeded(12);
        let a = pk.encrypt_vector(&[0.1, 0.2], &mut rng).unwrap();
        let b = pk.encrypt_vector(&[0.3, 0.7], &mut rng).unwrap();
        let agg = pk.weighted_sum(&[&a, &b], &[0.3, 0.7]).unwrap();
        assert_eq!(mock.decrypt_vector(&agg).unwrap(), vec![0.3 * 0.1 + 0.7 * 0.3, 0.3 * 0.2 + 0.7 * 0.7]);
        // 1 MB of f64 plaintext reports as 16.66 MB
        assert_eq!(pk.ciphertext_bytes(125_000), 16_660_000);
        let unit = SecretContext::mock(cfg, 1.0).unwrap();
        assert_eq!(unit.public().ciphertext_bytes(1000), 8000);
        assert!(SecretContext::mock(cfg, 0.5).is_err());
    }

    #[test]
    fn mock_blocks_follow_pack_batch() {
        let mock = SecretContext::mock(KeyConfig::default(), 2.0).unwrap();
        assert_eq!(mock.public().blocks_for(10_000), 3);
    }

    #[test]
    fn serialization_roundtrip_and_size_formula() {
        let sk = test_keys();
        let pk = sk.public();
        let cfg = *pk.cfg();
        let values: Vec<f64> = (0..30).map(|i| i as f64 * 0.37 - 5.0).collect();
        let c = pk.encrypt_vector(&values, &mut seeded(13)).unwrap();
        let bytes = pk.serialize(&c);
        assert_eq!(bytes.len() as u64, cfg.paillier_ciphertext_bytes(30));
        assert_eq!(bytes.len() as u64, pk.reported_bytes(&c));
        assert_eq!(pk.deserialize(&bytes).unwrap(), c);
        assert!(matches!(
            pk.deserialize(&bytes[..bytes.len() - 1]),
            Err(HeError::Malformed(WireFault::Truncated))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(pk.deserialize(&bad), Err(HeError::Malformed(WireFault::BadMagic))));
        let mut bad = bytes;
        bad[4] = 9;
        assert!(matches!(pk.deserialize(&bad), Err(HeError::Malformed(WireFault::Version(9)))));
    }

    #[test]
    fn corrupted_block_fails_decryption() {
        let sk = test_keys();
        let pk = sk.public();
        let c = pk.encrypt_vector(&[1.0, 2.0], &mut seeded(14)).unwrap();
        let mut bytes = pk.serialize(&c);
        let last = bytes.len() - 1;
        bytes[last] ^= 0x5a;
        let corrupted = pk.deserialize(&bytes).unwrap();
        assert!(matches!(
            sk.decrypt_vector(&corrupted),
            Err(HeError::DecodeRange { .. }) | Err(HeError::CorruptBlock)
        ));
    }
}
