//! Laplace mechanism and privacy budgets of masking policies.
//!
//! A Laplace-noised coordinate with sensitivity `df` and scale `b` costs
//! `df / b`; an encrypted coordinate costs nothing; releases compose by
//! summation. The budget of a masking policy is therefore the sum of
//! `df_i / b` over the coordinates left in the clear.

use alloc::vec::Vec;

use rand_core::RngCore;

use crate::mask::{select_mask, EncryptionMask, MaskError};
use crate::rng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DpError {
    #[error("Laplace scale must be positive and finite, got {0}")]
    BadScale(f64),
    #[error("sensitivity must be finite and nonnegative, got {value} at index {index}")]
    BadSensitivity { index: usize, value: f64 },
    #[error("mask covers {mask} parameters but {delta_f} sensitivities were given")]
    LengthMismatch { mask: usize, delta_f: usize },
    #[error("ratio {0} is outside [0, 1]")]
    BadRatio(f64),
    #[error("need at least one parameter and one trial")]
    EmptyExperiment,
    #[error(transparent)]
    Mask(#[from] MaskError),
}

fn check_scale(b: f64) -> Result<(), DpError> {
    if b > 0.0 && b.is_finite() {
        Ok(())
    } else {
        Err(DpError::BadScale(b))
    }
}

/// One `Lap(0, b)` draw by inverse CDF.
pub fn laplace_sample<R: RngCore + ?Sized>(rng: &mut R, b: f64) -> f64 {
    loop {
        let u = rng::unit_f64(rng) - 0.5;
        if u > -0.5 {
            let sign = if u < 0.0 { -1.0 } else { 1.0 };
            return -b * sign * libm::log(1.0 - 2.0 * libm::fabs(u));
        }
    }
}

/// `n` independent `Lap(0, b)` draws, reproducible from `seed`.
pub fn laplace_noise(b: f64, n: usize, seed: u64) -> Result<Vec<f64>, DpError> {
    check_scale(b)?;
    let mut stream = rng::derive(seed, "laplace", 0, 0);
    Ok((0..n).map(|_| laplace_sample(&mut stream, b)).collect())
}

/// Budget spent by a Laplace release with sensitivity `delta_f` at scale `b`.
pub fn epsilon_of(delta_f: f64, b: f64) -> Result<f64, DpError> {
    check_scale(b)?;
    if !(delta_f >= 0.0 && delta_f.is_finite()) {
        return Err(DpError::BadSensitivity { index: 0, value: delta_f });
    }
    Ok(delta_f / b)
}

/// Sequential composition.
pub fn compose(budgets: &[f64]) -> f64 {
    debug_assert!(budgets.iter().all(|e| *e >= 0.0));
    // fold from +0.0: an empty float sum is -0.0
    budgets.iter().fold(0.0, |a, b| a + b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpConfig {
    b: f64,
    per_param_delta_f: Vec<f64>,
}

impl DpConfig {
    pub fn new(b: f64, per_param_delta_f: Vec<f64>) -> Result<Self, DpError> {
        check_scale(b)?;
        if let Some((index, &value)) =
            per_param_delta_f.iter().enumerate().find(|(_, v)| !(**v >= 0.0 && v.is_finite()))
        {
            return Err(DpError::BadSensitivity { index, value });
        }
        Ok(DpConfig { b, per_param_delta_f })
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn delta_f(&self) -> &[f64] {
        &self.per_param_delta_f
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Policy {
    AllNoise,
    RandomP,
    SelectiveP,
    FullEncryption,
}

impl Policy {
    pub fn name(self) -> &'static str {
        match self {
            Policy::AllNoise => "all_noise",
            Policy::RandomP => "random_p",
            Policy::SelectiveP => "selective_p",
            Policy::FullEncryption => "full_encryption",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    /// `(parameter index, delta_f / b)` for every clear coordinate.
    pub terms: Vec<(usize, f64)>,
    pub policy: Policy,
}

/// Budget of releasing the clear coordinates of `mask` with Laplace noise.
///
/// The recorded policy is `policy`, except that an all-encrypting mask is
/// always `FullEncryption` and an empty one `AllNoise`.
pub fn budget_for_policy(cfg: &DpConfig, mask: &EncryptionMask, policy: Policy) -> Result<PrivacyBudget, DpError> {
    if mask.len() != cfg.per_param_delta_f.len() {
        return Err(DpError::LengthMismatch { mask: mask.len(), delta_f: cfg.per_param_delta_f.len() });
    }
    let terms: Vec<(usize, f64)> =
        mask.complement_indices().map(|i| (i, cfg.per_param_delta_f[i] / cfg.b)).collect();
    let epsilon = terms.iter().fold(0.0, |acc, (_, e)| acc + e);
    let policy = if mask.encrypted_count() == mask.len() {
        Policy::FullEncryption
    } else if mask.encrypted_count() == 0 {
        Policy::AllNoise
    } else {
        policy
    };
    Ok(PrivacyBudget { epsilon, terms, policy })
}

/// Monte Carlo estimate of the three policy budgets under `df ~ U(0,1)^N`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedBudgets {
    /// Mean budget of noising every coordinate.
    pub j: f64,
    pub random_mean: f64,
    pub selective_mean: f64,
    /// Per-trial ratios to `J`: mean and standard error.
    pub random_ratio: RatioStats,
    pub selective_ratio: RatioStats,
    pub trials: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioStats {
    pub mean: f64,
    pub std_err: f64,
}

impl RatioStats {
    fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        RatioStats { mean, std_err: libm::sqrt(var / n) }
    }
}

/// One Monte Carlo trial: `(J, random-policy budget, selective budget)`.
pub fn budget_trial(n: usize, b: f64, p: f64, seed: u64, trial: u64) -> Result<(f64, f64, f64), DpError> {
    let mut stream = rng::derive(seed, "budget-trial", trial, 0);
    let delta_f: Vec<f64> = (0..n).map(|_| rng::unit_f64(&mut stream)).collect();
    let j = delta_f.iter().sum::<f64>() / b;
    // random: each coordinate encrypted independently with probability p
    let random = delta_f.iter().filter(|_| rng::unit_f64(&mut stream) >= p).fold(0.0, |a, d| a + d) / b;
    let cfg = DpConfig::new(b, delta_f)?;
    let selective = budget_for_policy(&cfg, &select_mask(cfg.delta_f(), p)?, Policy::SelectiveP)?.epsilon;
    Ok((j, random, selective))
}

pub fn expected_budgets(n: usize, b: f64, p: f64, trials: usize, seed: u64) -> Result<ExpectedBudgets, DpError> {
    check_scale(b)?;
    if !(0.0..=1.0).contains(&p) {
        return Err(DpError::BadRatio(p));
    }
    if n == 0 || trials == 0 {
        return Err(DpError::EmptyExperiment);
    }
    let mut js = Vec::with_capacity(trials);
    let mut randoms = Vec::with_capacity(trials);
    let mut selectives = Vec::with_capacity(trials);
    for t in 0..trials {
        let (j, r, s) = budget_trial(n, b, p, seed, t as u64)?;
        js.push(j);
        randoms.push(r);
        selectives.push(s);
    }
    Ok(summarize(&js, &randoms, &selectives))
}

/// Aggregate per-trial results (e.g. computed in parallel by the caller).
pub fn summarize(js: &[f64], randoms: &[f64], selectives: &[f64]) -> ExpectedBudgets {
    let mean = |xs: &[f64]| xs.iter().fold(0.0, |a, x| a + x) / xs.len() as f64;
    let ratios = |xs: &[f64]| -> Vec<f64> {
        xs.iter().zip(js).map(|(x, j)| if *j > 0.0 { x / j } else { 0.0 }).collect()
    };
    ExpectedBudgets {
        j: mean(js),
        random_mean: mean(randoms),
        selective_mean: mean(selectives),
        random_ratio: RatioStats::from_samples(&ratios(randoms)),
        selective_ratio: RatioStats::from_samples(&ratios(selectives)),
        trials: js.len(),
    }
}
