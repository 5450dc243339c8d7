//! Split-conformal calibration and inference on top of the APS score:
//! seeded randomized scoring, the finite-sample threshold rule, coverage
//! and set-size metrics, and threshold-sweep curves.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aps::{self, ApsError, ApsSet};
use crate::simplex::ProbDist;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConformalError {
    #[error("distributions and labels disagree on length")]
    LengthMismatch,
    #[error("alpha {0} outside (0, 1)")]
    AlphaOutOfRange(f64),
    #[error("threshold grid needs n >= 2 and lo < hi")]
    BadGrid,
    #[error(transparent)]
    Aps(#[from] ApsError),
}

/// Calibration outcome: the scores, the miscoverage target, and the
/// threshold `tau_hat` equal to the k-th smallest score with
/// `k = ceil((1 - alpha) (n_c + 1))`, clamped to 1 when `k > n_c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub scores: Vec<f64>,
    pub alpha: f64,
    pub tau_hat: f64,
    pub rng_seed: u64,
}

/// Coverage and prediction-set-size summary for one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpMetrics {
    pub coverage: f64,
    pub pss: f64,
    pub npss: f64,
}

/// One point of a threshold-sweep curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub scale: f64,
    pub coverage: f64,
    pub pss: f64,
}

/// Coverage/size pairs swept over scalings of the calibrated threshold.
/// The randomization draw is fixed per sample across the sweep, so both
/// columns are non-decreasing in the scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpCurve {
    pub points: Vec<CurvePoint>,
}

/// Uniform draws in index order from a dedicated seeded stream.
pub fn uniform_stream(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random::<f64>()).collect()
}

/// SplitMix64-style derivation of independent sub-seeds from one master
/// seed.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Scores the calibration samples with seeded randomization and picks the
/// split-conformal threshold.
///
/// # Errors
///
/// [`ConformalError::LengthMismatch`] and
/// [`ConformalError::AlphaOutOfRange`] on malformed inputs; APS errors
/// propagate.
pub fn calibrate(
    dists: &[ProbDist],
    labels: &[usize],
    alpha: f64,
    seed: u64,
) -> Result<CalibrationResult, ConformalError> {
    if dists.is_empty() || dists.len() != labels.len() {
        return Err(ConformalError::LengthMismatch);
    }
    if !alpha.is_finite() || alpha <= 0.0 || alpha >= 1.0 {
        return Err(ConformalError::AlphaOutOfRange(alpha));
    }
    let us = uniform_stream(seed, dists.len());
    let mut scores = Vec::with_capacity(dists.len());
    for ((d, &y), &u) in dists.iter().zip(labels).zip(&us) {
        scores.push(aps::conformity_score(d, y, u)?);
    }
    let tau_hat = threshold_from_scores(&scores, alpha);
    Ok(CalibrationResult {
        scores,
        alpha,
        tau_hat,
        rng_seed: seed,
    })
}

/// The k-th smallest score with `k = ceil((1 - alpha) (n + 1))`, or 1.0
/// when `k` exceeds `n`.
pub fn threshold_from_scores(scores: &[f64], alpha: f64) -> f64 {
    let n = scores.len();
    let k = conformal_rank(n, alpha);
    if k > n {
        return 1.0;
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("scores are finite"));
    sorted[k - 1]
}

/// `ceil((1 - alpha) (n + 1))` guarded against float round-up at exact
/// integers.
fn conformal_rank(n: usize, alpha: f64) -> usize {
    let target = (1.0 - alpha) * (n as f64 + 1.0);
    ((target - 1e-9).ceil().max(1.0)) as usize
}

/// Prediction sets at the calibrated threshold with fresh per-sample
/// randomization from `seed`.
pub fn predict_sets(
    dists: &[ProbDist],
    cal: &CalibrationResult,
    seed: u64,
) -> Result<Vec<ApsSet>, ConformalError> {
    let us = uniform_stream(seed, dists.len());
    dists
        .iter()
        .zip(&us)
        .map(|(d, &u)| aps::prediction_set(d, u, cal.tau_hat).map_err(Into::into))
        .collect()
}

/// Empirical coverage, mean set size, and size normalized by the class
/// count.
pub fn evaluate(sets: &[ApsSet], labels: &[usize], k: usize) -> Result<CpMetrics, ConformalError> {
    if sets.is_empty() || sets.len() != labels.len() {
        return Err(ConformalError::LengthMismatch);
    }
    let n = sets.len() as f64;
    let covered = sets
        .iter()
        .zip(labels)
        .filter(|(s, &y)| s.contains(y))
        .count() as f64;
    let total_size: usize = sets.iter().map(ApsSet::size).sum();
    let pss = total_size as f64 / n;
    Ok(CpMetrics {
        coverage: covered / n,
        pss,
        npss: pss / k as f64,
    })
}

/// Sweeps `scale * tau_hat` over an even grid, reusing one randomization
/// draw per sample across every scale.
pub fn cp_curve(
    dists: &[ProbDist],
    labels: &[usize],
    cal: &CalibrationResult,
    lo: f64,
    hi: f64,
    n: usize,
    seed: u64,
) -> Result<CpCurve, ConformalError> {
    if n < 2 || !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(ConformalError::BadGrid);
    }
    if dists.is_empty() || dists.len() != labels.len() {
        return Err(ConformalError::LengthMismatch);
    }
    let k = dists[0].num_classes();
    let us = uniform_stream(seed, dists.len());
    let mut points = Vec::with_capacity(n);
    for step in 0..n {
        let scale = lo + (hi - lo) * step as f64 / (n - 1) as f64;
        let tau = (scale * cal.tau_hat).clamp(0.0, 1.0);
        let mut sets = Vec::with_capacity(dists.len());
        for (d, &u) in dists.iter().zip(&us) {
            sets.push(aps::prediction_set(d, u, tau)?);
        }
        let metrics = evaluate(&sets, labels, k)?;
        points.push(CurvePoint {
            scale,
            coverage: metrics.coverage,
            pss: metrics.pss,
        });
    }
    Ok(CpCurve { points })
}

/// Default sweep matching the 200-point grid over [0.9, 1.1].
pub fn cp_curve_default(
    dists: &[ProbDist],
    labels: &[usize],
    cal: &CalibrationResult,
    seed: u64,
) -> Result<CpCurve, ConformalError> {
    cp_curve(dists, labels, cal, 0.9, 1.1, 200, seed)
}
