#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use selenc_core::he::{keygen, KeyConfig, SecretContext};
use selenc_core::model::{loss_and_grad, Dataset, LossKind, ModelShape};

/// 1024-bit Paillier keys, generated once per test binary.
pub fn paillier_keys() -> &'static SecretContext {
    static KEYS: OnceLock<SecretContext> = OnceLock::new();
    KEYS.get_or_init(|| {
        let cfg = KeyConfig::insecure_test();
        SecretContext::paillier(cfg, keygen(&cfg, 11).unwrap()).unwrap()
    })
}

pub fn mock_keys() -> SecretContext {
    SecretContext::mock(KeyConfig::default(), 16.66).unwrap()
}

/// Plaintext FedAvg written out longhand: full-batch gradient steps, then
/// `alpha_0 w_0 + alpha_1 w_1 + ...` over the clients present each round,
/// weights renormalized when someone is missing.
#[allow(clippy::too_many_arguments)]
pub fn oracle_fedavg(
    shape: &ModelShape,
    datasets: &[Dataset],
    weights: &[f64],
    rounds: usize,
    steps: usize,
    lr: f64,
    seed: u64,
    dropout: &BTreeMap<usize, BTreeSet<usize>>,
) -> Vec<f64> {
    let mut global = shape.init(seed).into_vec();
    for round in 1..=rounds {
        let present: Vec<usize> =
            (0..datasets.len()).filter(|c| dropout.get(&round).is_none_or(|a| !a.contains(c))).collect();
        let alphas: Vec<f64> = if present.len() == datasets.len() {
            weights.to_vec()
        } else {
            let total: f64 = present.iter().map(|&c| weights[c]).sum();
            present.iter().map(|&c| weights[c] / total).collect()
        };
        let mut next: Option<Vec<f64>> = None;
        for (&c, &a) in present.iter().zip(&alphas) {
            let mut w = global.clone();
            for _ in 0..steps {
                let (_, g) = loss_and_grad(&w, shape, &datasets[c], LossKind::SquaredError).unwrap();
                for (wi, gi) in w.iter_mut().zip(&g) {
                    *wi -= lr * gi;
                }
            }
            match next.as_mut() {
                None => next = Some(w.iter().map(|v| a * v).collect()),
                Some(acc) => {
                    for (x, v) in acc.iter_mut().zip(&w) {
                        *x += a * v;
                    }
                }
            }
        }
        global = next.unwrap();
    }
    global
}

/// Random weights on the simplex, summing to 1 within rounding.
pub fn simplex(n: usize, draw: impl FnMut() -> f64) -> Vec<f64> {
    let raw: Vec<f64> = std::iter::repeat_with(draw).take(n).map(|u| u + 0.05).collect();
    let total: f64 = raw.iter().sum();
    let mut w: Vec<f64> = raw.iter().map(|r| r / total).collect();
    let head: f64 = w[..n - 1].iter().sum();
    w[n - 1] = 1.0 - head;
    w
}
