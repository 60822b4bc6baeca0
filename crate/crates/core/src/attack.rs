//! Gradient-matching inversion (DLG-style) against the clear part of a
//! gradient, and defense curves over encryption ratios.
//!
//! The attacker knows the model and sees the gradient coordinates that are
//! not encrypted. It searches for an input `x` and target `y` whose gradient
//! matches the visible coordinates, minimizing
//! `L(x, y) = sum_{m visible} (grad_m(x, y) - g_m)^2` by gradient descent with
//! central finite differences in `(x, y)`.

use alloc::vec;
use alloc::vec::Vec;

use crate::mask::{select_mask, selection_count, EncryptionMask, MaskError};
use crate::model::{self, LossKind, ModelError, ModelShape};
use crate::rng;

pub const MAX_ATTACK_PARAMS: usize = 64;
pub const MAX_ATTACK_INPUT_DIM: usize = 16;
/// Match losses within this of the minimum count as tied.
pub const LOSS_TIE: f64 = 1e-12;
/// Random-policy points average this many mask draws.
pub const RANDOM_MASK_DRAWS: usize = 5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AttackError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("attack is desk-scale only: at most 64 parameters and 16 inputs")]
    TooLarge,
    #[error("observed gradient has {got} entries, model has {expected}")]
    GradientLength { expected: usize, got: usize },
    #[error("invalid attack config: {0}")]
    InvalidConfig(&'static str),
    #[error("match loss became non-finite in restart {restart}")]
    NonFinite { restart: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    pub iters: usize,
    pub lr: f64,
    pub restarts: usize,
    pub fd_step: f64,
    pub seed: u64,
    pub loss: LossKind,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig { iters: 300, lr: 0.1, restarts: 10, fd_step: 1e-4, seed: 0, loss: LossKind::SquaredError }
    }
}

impl AttackConfig {
    fn validate(&self) -> Result<(), AttackError> {
        if self.iters == 0 {
            return Err(AttackError::InvalidConfig("iters must be at least 1"));
        }
        if self.restarts == 0 {
            return Err(AttackError::InvalidConfig("restarts must be at least 1"));
        }
        if !(self.fd_step > 0.0 && self.fd_step.is_finite()) {
            return Err(AttackError::InvalidConfig("fd_step must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(AttackError::InvalidConfig("lr must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    /// Lowest MSE over all restarts.
    pub best_mse: f64,
    /// Restart the attacker would pick without ground truth: lowest match
    /// loss, earliest restart on (near-)ties. Its candidate is `recovered_*`.
    pub selected_restart: usize,
    pub per_restart_mse: Vec<f64>,
    pub per_restart_loss: Vec<f64>,
    pub recovered_input: Vec<f64>,
    pub recovered_target: Vec<f64>,
    /// No gradient coordinate was visible; every candidate matches.
    pub unconstrained: bool,
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

struct Matcher<'a> {
    params: &'a [f64],
    shape: &'a ModelShape,
    observed: &'a [f64],
    visible: Vec<usize>,
    loss: LossKind,
    grad: Vec<f64>,
}

impl Matcher<'_> {
    fn loss_at(&mut self, z: &[f64]) -> f64 {
        let d = self.shape.input_dim();
        self.grad.iter_mut().for_each(|g| *g = 0.0);
        model::sample_loss_and_grad(self.params, self.shape, &z[..d], &z[d..], self.loss, &mut self.grad);
        self.visible
            .iter()
            .map(|&m| {
                let diff = self.grad[m] - self.observed[m];
                diff * diff
            })
            .sum()
    }

    fn fd_gradient(&mut self, z: &mut [f64], h: f64, out: &mut [f64]) {
        for i in 0..z.len() {
            let z0 = z[i];
            z[i] = z0 + h;
            let up = self.loss_at(z);
            z[i] = z0 - h;
            let down = self.loss_at(z);
            z[i] = z0;
            out[i] = (up - down) / (2.0 * h);
        }
    }
}

/// Fixed-step gradient descent. A step that would increase the match loss
/// is rejected and the step size halved for the rest of the restart.
fn descend(matcher: &mut Matcher<'_>, z: &mut [f64], current: &mut f64, cfg: &AttackConfig) -> Result<(), ()> {
    let mut grad = vec![0.0; z.len()];
    let mut trial = vec![0.0; z.len()];
    let mut lr = cfg.lr;
    for _ in 0..cfg.iters {
        matcher.fd_gradient(z, cfg.fd_step, &mut grad);
        loop {
            for ((t, zi), gi) in trial.iter_mut().zip(z.iter()).zip(&grad) {
                *t = zi - lr * gi;
            }
            let next = matcher.loss_at(&trial);
            if next <= *current {
                z.copy_from_slice(&trial);
                *current = next;
                break;
            }
            lr *= 0.5;
            if lr < cfg.lr * 1e-9 {
                return if current.is_finite() { Ok(()) } else { Err(()) };
            }
        }
        if !current.is_finite() {
            return Err(());
        }
    }
    Ok(())
}

/// Reconstruct the input behind `observed_grad`, with the coordinates in
/// `hidden` unavailable to the attacker.
pub fn invert(
    params: &[f64],
    shape: &ModelShape,
    observed_grad: &[f64],
    hidden: &EncryptionMask,
    true_input: &[f64],
    cfg: &AttackConfig,
) -> Result<AttackResult, AttackError> {
    cfg.validate()?;
    if params.len() > MAX_ATTACK_PARAMS || shape.input_dim() > MAX_ATTACK_INPUT_DIM {
        return Err(AttackError::TooLarge);
    }
    if params.len() != shape.total_params() {
        return Err(ModelError::ShapeMismatch { expected: shape.total_params(), got: params.len() }.into());
    }
    if observed_grad.len() != params.len() {
        return Err(AttackError::GradientLength { expected: params.len(), got: observed_grad.len() });
    }
    if hidden.len() != params.len() {
        return Err(MaskError::LengthMismatch { mask: hidden.len(), values: params.len() }.into());
    }
    if true_input.len() != shape.input_dim() {
        return Err(ModelError::ShapeMismatch { expected: shape.input_dim(), got: true_input.len() }.into());
    }

    let d = shape.input_dim();
    let dim = d + shape.output_dim();
    let mut matcher = Matcher {
        params,
        shape,
        observed: observed_grad,
        visible: hidden.complement_indices().collect(),
        loss: cfg.loss,
        grad: vec![0.0; params.len()],
    };
    let unconstrained = matcher.visible.is_empty();

    let mut per_restart_mse = Vec::with_capacity(cfg.restarts);
    let mut per_restart_loss = Vec::with_capacity(cfg.restarts);
    let mut candidates = Vec::with_capacity(cfg.restarts);
    for restart in 0..cfg.restarts {
        let mut stream = rng::derive(cfg.seed, "attack-init", restart as u64, 0);
        let mut z: Vec<f64> = (0..dim).map(|_| rng::uniform(&mut stream, -1.0, 1.0)).collect();
        let mut current = matcher.loss_at(&z);
        if !unconstrained {
            descend(&mut matcher, &mut z, &mut current, cfg).map_err(|()| AttackError::NonFinite { restart })?;
        }
        per_restart_mse.push(mse(&z[..d], true_input));
        per_restart_loss.push(current);
        candidates.push(z);
    }

    // Losses this close are indistinguishable rounding residue; the earliest
    // such restart wins.
    let floor = per_restart_loss.iter().copied().fold(f64::INFINITY, f64::min);
    let selected_restart = per_restart_loss.iter().position(|l| *l <= floor + LOSS_TIE).unwrap_or(0);
    let best = &candidates[selected_restart];
    Ok(AttackResult {
        best_mse: per_restart_mse.iter().copied().fold(f64::INFINITY, f64::min),
        selected_restart,
        recovered_input: best[..d].to_vec(),
        recovered_target: best[d..].to_vec(),
        per_restart_mse,
        per_restart_loss,
        unconstrained,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskPolicy {
    /// Hide the most sensitive parameters.
    Selective,
    /// Hide a uniformly random subset of the same size.
    Random,
}

impl MaskPolicy {
    pub fn name(self) -> &'static str {
        match self {
            MaskPolicy::Selective => "selective",
            MaskPolicy::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub p: f64,
    pub best_mse: f64,
    /// One entry per attacked mask (several for the random policy).
    pub runs: Vec<AttackResult>,
}

/// Uniformly random mask with exactly `selection_count(p, n)` entries.
pub fn random_mask(n: usize, p: f64, seed: u64, draw: u64) -> Result<EncryptionMask, MaskError> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut stream = rng::derive(seed, "random-mask", draw, (p * 1e6) as u64);
    rng::shuffle(&mut stream, &mut order);
    EncryptionMask::from_indices(n, &order[..selection_count(p, n)], p)
}

/// Attack the gradient of one sample `(x, y)` under masks of increasing ratio.
#[allow(clippy::too_many_arguments)]
pub fn defense_curve(
    params: &[f64],
    shape: &ModelShape,
    x: &[f64],
    y: &[f64],
    sensitivity: &[f64],
    p_grid: &[f64],
    policy: MaskPolicy,
    cfg: &AttackConfig,
) -> Result<Vec<CurvePoint>, AttackError> {
    if let Some(&p) = p_grid.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(MaskError::RatioOutOfRange(p).into());
    }
    if sensitivity.len() != params.len() {
        return Err(MaskError::LengthMismatch { mask: sensitivity.len(), values: params.len() }.into());
    }
    let mut observed = vec![0.0; params.len()];
    model::sample_loss_and_grad(params, shape, x, y, cfg.loss, &mut observed);

    p_grid
        .iter()
        .map(|&p| {
            let masks = match policy {
                MaskPolicy::Selective => vec![select_mask(sensitivity, p)?],
                MaskPolicy::Random => (0..RANDOM_MASK_DRAWS as u64)
                    .map(|draw| random_mask(params.len(), p, cfg.seed, draw))
                    .collect::<Result<Vec<_>, _>>()?,
            };
            let runs = masks
                .iter()
                .map(|mask| invert(params, shape, &observed, mask, x, cfg))
                .collect::<Result<Vec<_>, _>>()?;
            let best_mse = runs.iter().map(|r| r.best_mse).sum::<f64>() / runs.len() as f64;
            Ok(CurvePoint { p, best_mse, runs })
        })
        .collect()
}

/// Privacy threshold: the `quantile` of the MSE an attacker with no signal
/// achieves, i.e. the best of `restarts` uniform(-1, 1) guesses, over
/// `samples` draws.
pub fn random_guess_threshold(true_input: &[f64], samples: usize, restarts: usize, quantile: f64, seed: u64) -> f64 {
    let mut stream = rng::derive(seed, "random-guess", 0, 0);
    let mut mses: Vec<f64> = (0..samples.max(1))
        .map(|_| {
            (0..restarts.max(1))
                .map(|_| {
                    let guess: Vec<f64> = true_input.iter().map(|_| rng::uniform(&mut stream, -1.0, 1.0)).collect();
                    mse(&guess, true_input)
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    mses.sort_by(f64::total_cmp);
    let rank = libm::floor(quantile.clamp(0.0, 1.0) * (mses.len() - 1) as f64) as usize;
    mses[rank]
}

/// Smallest ratio whose MSE exceeds `tau`, if any.
pub fn defeat_ratio(curve: &[CurvePoint], tau: f64) -> Option<f64> {
    curve.iter().filter(|pt| pt.best_mse > tau).map(|pt| pt.p).reduce(f64::min)
}

/// Seeded toy regression task for defense experiments: a linear model with
/// 8 inputs and 6 outputs (48 parameters) and one client sample drawn from
/// uniform(-1, 1). The sensitivity map is computed on that sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTask {
    pub shape: ModelShape,
    pub params: Vec<f64>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

pub const TOY_INPUTS: usize = 8;
pub const TOY_OUTPUTS: usize = 6;

impl ToyTask {
    pub fn new(seed: u64) -> Self {
        let shape = ModelShape::linear(TOY_INPUTS, TOY_OUTPUTS).expect("nonzero dims");
        let params = shape.init(seed).to_vec();
        let mut stream = rng::derive(seed, "toy-sample", 0, 0);
        let x = (0..TOY_INPUTS).map(|_| rng::uniform(&mut stream, -1.0, 1.0)).collect();
        let y = (0..TOY_OUTPUTS).map(|_| rng::uniform(&mut stream, -1.0, 1.0)).collect();
        ToyTask { shape, params, x, y }
    }

    pub fn sensitivity(&self) -> Vec<f64> {
        let data = crate::model::Dataset::single(&self.x, &self.y).expect("consistent dims");
        crate::sensitivity::sensitivity(
            &self.params,
            &self.shape,
            &data,
            LossKind::SquaredError,
            crate::sensitivity::FdStep::default(),
        )
        .expect("finite toy model")
        .scores
    }

    pub fn curve(&self, p_grid: &[f64], policy: MaskPolicy, cfg: &AttackConfig) -> Result<Vec<CurvePoint>, AttackError> {
        let cfg = AttackConfig { loss: LossKind::SquaredError, ..*cfg };
        defense_curve(&self.params, &self.shape, &self.x, &self.y, &self.sensitivity(), p_grid, policy, &cfg)
    }
}
