//! Per-parameter sensitivity: how strongly each gradient coordinate reacts to
//! the training target.
//!
//! For every sample `k` and target coordinate `j` the mixed partial
//! `d/dy_kj (dl_k/dw_m)` is estimated by a central difference over the
//! analytic per-sample gradient. The score of parameter `m` is the mean of
//! its absolute mixed partials over all `K * target_dim` coordinates.
//!
//! The per-sample loss `l_k` is differentiated rather than the batch mean,
//! so duplicating a sample leaves the map unchanged.

use alloc::vec;
use alloc::vec::Vec;

use crate::he::{Ciphertext, HeError, PublicContext};
use crate::model::{self, Dataset, LossKind, ModelError, ModelShape};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SensitivityError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    He(#[from] HeError),
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
    #[error("sensitivity of parameter {index} is not finite")]
    NonFinite { index: usize },
    #[error("aggregation weights must be nonnegative and sum to 1")]
    BadWeights,
    #[error("no maps to aggregate")]
    NoMaps,
}

/// Step rule for the central difference in the target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FdStep {
    /// `h = c * max(1, |y|)`.
    Relative(f64),
    Absolute(f64),
}

impl Default for FdStep {
    fn default() -> Self {
        FdStep::Relative(1e-3)
    }
}

impl FdStep {
    fn at(self, y: f64) -> f64 {
        match self {
            FdStep::Relative(c) => c * libm::fmax(1.0, libm::fabs(y)),
            FdStep::Absolute(h) => h,
        }
    }

    fn check(self) -> Result<(), SensitivityError> {
        let raw = match self {
            FdStep::Relative(c) | FdStep::Absolute(c) => c,
        };
        if raw > 0.0 && raw.is_finite() {
            Ok(())
        } else {
            Err(SensitivityError::BadStep(raw))
        }
    }
}

/// `(f(x + h) - f(x - h)) / 2h`.
pub fn central_difference<F: FnMut(f64) -> f64>(mut f: F, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMap {
    pub scores: Vec<f64>,
    pub dataset_size: usize,
}

impl SensitivityMap {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// `index,score` lines with a header row.
    pub fn to_csv(&self) -> alloc::string::String {
        use core::fmt::Write;
        let mut out = alloc::string::String::from("index,score\n");
        for (i, s) in self.scores.iter().enumerate() {
            let _ = writeln!(out, "{i},{s:e}");
        }
        out
    }
}

pub fn sensitivity(
    params: &[f64],
    shape: &ModelShape,
    data: &Dataset,
    loss: LossKind,
    step: FdStep,
) -> Result<SensitivityMap, SensitivityError> {
    step.check()?;
    // validates shapes once
    model::loss_and_grad(params, shape, data, loss)?;

    let n = params.len();
    let mut totals = vec![0.0; n];
    let mut g_plus = vec![0.0; n];
    let mut g_minus = vec![0.0; n];
    let mut y = vec![0.0; data.target_dim()];
    for k in 0..data.len() {
        let x = data.input(k);
        y.copy_from_slice(data.target(k));
        for j in 0..y.len() {
            let y0 = y[j];
            let h = step.at(y0);
            g_plus.iter_mut().for_each(|g| *g = 0.0);
            g_minus.iter_mut().for_each(|g| *g = 0.0);
            y[j] = y0 + h;
            model::sample_loss_and_grad(params, shape, x, &y, loss, &mut g_plus);
            y[j] = y0 - h;
            model::sample_loss_and_grad(params, shape, x, &y, loss, &mut g_minus);
            y[j] = y0;
            for ((t, gp), gm) in totals.iter_mut().zip(&g_plus).zip(&g_minus) {
                *t += libm::fabs((gp - gm) / (2.0 * h));
            }
        }
    }
    let denom = (data.len() * data.target_dim()) as f64;
    let scores: Vec<f64> = totals.into_iter().map(|t| t / denom).collect();
    if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
        return Err(SensitivityError::NonFinite { index });
    }
    Ok(SensitivityMap { scores, dataset_size: data.len() })
}

/// Homomorphic weighted sum of encrypted local maps. Never decrypts.
pub fn aggregate_maps(
    pk: &PublicContext,
    encrypted_maps: &[Ciphertext],
    weights: &[f64],
) -> Result<Ciphertext, SensitivityError> {
    if encrypted_maps.is_empty() {
        return Err(SensitivityError::NoMaps);
    }
    if weights.len() != encrypted_maps.len()
        || weights.iter().any(|w| w.is_nan() || *w < 0.0)
        || libm::fabs(weights.iter().sum::<f64>() - 1.0) > 1e-9
    {
        return Err(SensitivityError::BadWeights);
    }
    let refs: Vec<&Ciphertext> = encrypted_maps.iter().collect();
    Ok(pk.weighted_sum(&refs, weights)?)
}
