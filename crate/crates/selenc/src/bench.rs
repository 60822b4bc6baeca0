//! Encryption, aggregation and decryption cost against model size and
//! encryption ratio.

use std::time::Instant;

use selenc_core::he::SecretContext;
use selenc_core::mask;
use selenc_core::rng;

use crate::protocol::{open, seal, server_aggregate, ProtocolError};

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub params: Vec<usize>,
    pub ratios: Vec<f64>,
    pub repeat: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub params: usize,
    pub ratio: f64,
    pub encrypted: usize,
    /// Upload size of one partially encrypted model.
    pub bytes: u64,
    pub ciphertext_bytes: u64,
    pub enc_ms: Summary,
    pub agg_ms: Summary,
    pub dec_ms: Summary,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub median: f64,
    pub iqr: f64,
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn summarize(samples: &[f64]) -> Summary {
    assert!(!samples.is_empty());
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    Summary { median: quantile(&s, 0.5), iqr: quantile(&s, 0.75) - quantile(&s, 0.25) }
}

/// Least-squares line through `(x, y)`: `(slope, intercept, r_squared)`.
pub fn fit_affine(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, my - slope * mx, r2)
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Time one client's sealing, a two-client aggregation and one opening,
/// `repeat` times per grid point. A ratio of zero times the clear path only.
pub fn run(keys: &SecretContext, cfg: &BenchConfig) -> Result<Vec<BenchRow>, ProtocolError> {
    let pk = keys.public();
    let mut rows = Vec::new();
    for &n in &cfg.params {
        let mut stream = rng::derive(cfg.seed, "bench", n as u64, 0);
        let values: Vec<f64> = (0..n).map(|_| rng::uniform(&mut stream, -1.0, 1.0)).collect();
        let scores: Vec<f64> = (0..n).map(|_| rng::unit_f64(&mut stream)).collect();
        for &ratio in &cfg.ratios {
            let m = mask::select_mask(&scores, ratio)?;
            let (mut enc, mut agg, mut dec) = (Vec::new(), Vec::new(), Vec::new());
            let mut bytes = 0;
            let mut ct_bytes = 0;
            for r in 0..cfg.repeat.max(1) {
                let mut erng = rng::derive(cfg.seed, "bench-encrypt", n as u64, r as u64);
                let t = Instant::now();
                let a = seal(pk, &values, &m, 1, &mut erng)?;
                let b = seal(pk, &values, &m, 1, &mut erng)?;
                enc.push(ms(t) / 2.0);

                let t = Instant::now();
                let sum = server_aggregate(pk, &[&a, &b], &[0.5, 0.5], 1)?;
                agg.push(ms(t));

                let t = Instant::now();
                open(keys, &sum, &m)?;
                dec.push(ms(t));

                bytes = a.reported_bytes(pk);
                ct_bytes = a.encrypted.as_ref().map_or(0, |c| pk.reported_bytes(c));
            }
            rows.push(BenchRow {
                params: n,
                ratio,
                encrypted: m.encrypted_count(),
                bytes,
                ciphertext_bytes: ct_bytes,
                enc_ms: summarize(&enc),
                agg_ms: summarize(&agg),
                dec_ms: summarize(&dec),
            });
        }
    }
    Ok(rows)
}
