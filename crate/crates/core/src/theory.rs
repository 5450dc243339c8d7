//! Monte-Carlo verifier for the Beta-weighted upper bound on expected
//! prediction-set size.
//!
//! The chain being checked, with `tau` the calibrated threshold standing
//! in for the population quantile:
//!
//! 1. `E[|C(X)|] <= K (1 - alpha) + sum_{k <= K*} k p_k`, where
//!    `K* = max{ k : H(k) >= 1 - alpha }` and
//!    `H(k) = P[ prefix(k) <= tau | rank >= k ]`, valid when `H` is
//!    monotone non-increasing.
//! 2. `sum_{k <= K*} k p_k <= sum_k sigma_k lbar_k = L_Beta`, with
//!    `sigma_k = 3/5 gamma xi p_Beta(k/(K+1); a, b)` under the fitted
//!    assumptions `lbar_k >= k / gamma` and
//!    `p_k <= xi (1 - k/(K+1))^(b-1)` for `k <= K*`.
//!
//! Every quantity is estimated empirically and reported; the flags say
//! which inequalities were actually eligible for checking.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aps;
use crate::conformal::{mix_seed, uniform_stream, CalibrationResult};
use crate::simplex::ProbDist;
use crate::weighting::{beta_pdf, log_gamma, BetaParams, WeightingError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("input vectors disagree on length")]
    LengthMismatch,
    #[error("tau {0} outside [0, 1]")]
    TauOutOfRange(f64),
    #[error("rank {rank} has mass but zero conditional loss; gamma is unbounded")]
    ZeroLoss { rank: usize },
    #[error(transparent)]
    Weighting(#[from] WeightingError),
    #[error(transparent)]
    Aps(#[from] aps::ApsError),
}

/// Minimum per-rank denominator for a rank to participate in the
/// monotonicity check of H.
pub const MONOTONE_MIN_SAMPLES: usize = 30;

/// Empirical rank distribution and conditional mean loss per rank.
#[derive(Debug, Clone, PartialEq)]
pub struct RankStats {
    /// `p_k`, indexed by rank - 1; sums to one.
    pub p: Vec<f64>,
    /// `lbar_k`, indexed by rank - 1; zero where no samples landed.
    pub lbar: Vec<f64>,
    /// Raw per-rank sample counts; zero flags an undefined `lbar`.
    pub counts: Vec<usize>,
}

/// Empirical conditional prefix-coverage per rank.
#[derive(Debug, Clone, PartialEq)]
pub struct HEstimate {
    /// `H(k)`, indexed by rank - 1; `None` where no sample has rank >= k.
    pub h: Vec<Option<f64>>,
    /// Denominators `#{ rank >= k }`.
    pub counts: Vec<usize>,
}

/// Everything the bound chain needs, with pass/fail flags. Flags that
/// could not be evaluated (prerequisite failed) stay `null` in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    #[serde(rename = "K")]
    pub num_classes: usize,
    pub alpha: f64,
    pub tau: f64,
    /// Calibration size behind `tau`, recorded so the quantile
    /// approximation error stays visible.
    pub n_cal: usize,
    pub n_eval: usize,
    pub p_k: Vec<f64>,
    pub lbar_k: Vec<f64>,
    #[serde(rename = "H_k")]
    pub h_k: Vec<Option<f64>>,
    #[serde(rename = "K_star")]
    pub k_star: usize,
    pub gamma: f64,
    pub xi: f64,
    pub sigma_k: Vec<f64>,
    #[serde(rename = "L_beta")]
    pub l_beta: f64,
    /// `K (1 - alpha) + sum_{k <= K*} k p_k`; the constant is kept so the
    /// first inequality is literally checkable.
    pub partial_rank_sum: f64,
    pub partial_rank_sum_no_const: f64,
    pub expected_pss: f64,
    #[serde(rename = "monotone_H")]
    pub monotone_h: bool,
    pub assumptions_hold: bool,
    pub bound_holds: Option<bool>,
    pub gamma_ratio: f64,
}

/// Per-sample cross-entropy from predicted distributions.
pub fn ce_losses(dists: &[ProbDist], labels: &[usize]) -> Result<Vec<f64>, TheoryError> {
    if dists.len() != labels.len() {
        return Err(TheoryError::LengthMismatch);
    }
    dists
        .iter()
        .zip(labels)
        .map(|(d, &y)| {
            if y >= d.num_classes() {
                return Err(TheoryError::Aps(aps::ApsError::Simplex(
                    crate::simplex::SimplexError::LabelOutOfRange {
                        label: y,
                        classes: d.num_classes(),
                    },
                )));
            }
            Ok(-d.prob(y).max(f64::MIN_POSITIVE).ln())
        })
        .collect()
}

/// Histogram of TCPR and the conditional mean loss per rank.
pub fn estimate_rank_stats(
    dists: &[ProbDist],
    labels: &[usize],
    losses: &[f64],
) -> Result<RankStats, TheoryError> {
    if dists.is_empty() || dists.len() != labels.len() || dists.len() != losses.len() {
        return Err(TheoryError::LengthMismatch);
    }
    let k = dists[0].num_classes();
    let mut counts = vec![0usize; k];
    let mut loss_sum = vec![0.0; k];
    for ((d, &y), &loss) in dists.iter().zip(labels).zip(losses) {
        let rank = d.tcpr(y).map_err(aps::ApsError::from)?.rank;
        counts[rank - 1] += 1;
        loss_sum[rank - 1] += loss;
    }
    let n = dists.len() as f64;
    let p = counts.iter().map(|&c| c as f64 / n).collect();
    let lbar = counts
        .iter()
        .zip(&loss_sum)
        .map(|(&c, &s)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    Ok(RankStats { p, lbar, counts })
}

/// `H(k) = #{ rank >= k and prefix(k) <= tau } / #{ rank >= k }`, absent
/// where the denominator is zero.
pub fn estimate_h(
    dists: &[ProbDist],
    labels: &[usize],
    tau: f64,
) -> Result<HEstimate, TheoryError> {
    if dists.is_empty() || dists.len() != labels.len() {
        return Err(TheoryError::LengthMismatch);
    }
    if !tau.is_finite() || !(0.0..=1.0).contains(&tau) {
        return Err(TheoryError::TauOutOfRange(tau));
    }
    let k = dists[0].num_classes();
    let mut denom = vec![0usize; k];
    let mut numer = vec![0usize; k];
    for (d, &y) in dists.iter().zip(labels) {
        let rank = d.tcpr(y).map_err(aps::ApsError::from)?.rank;
        let prefix = d.sorted_prefix_sums();
        for j in 0..rank {
            denom[j] += 1;
            if prefix[j] <= tau {
                numer[j] += 1;
            }
        }
    }
    let h = denom
        .iter()
        .zip(&numer)
        .map(|(&d, &n)| (d > 0).then(|| n as f64 / d as f64))
        .collect();
    Ok(HEstimate { h, counts: denom })
}

/// Largest defined rank with `H(k) >= 1 - alpha`; zero when none
/// qualifies.
pub fn k_star(h: &[Option<f64>], alpha: f64) -> usize {
    let target = 1.0 - alpha;
    h.iter()
        .enumerate()
        .filter_map(|(j, v)| v.and_then(|hv| (hv >= target).then_some(j + 1)))
        .max()
        .unwrap_or(0)
}

/// Tightest constants making the two proof assumptions true on ranks up
/// to `k_star`: `gamma = max k / lbar_k` and
/// `xi = max p_k / (1 - k/(K+1))^(b-1)`.
pub fn fit_assumption_constants(
    p: &[f64],
    lbar: &[f64],
    k_star: usize,
    beta: &BetaParams,
) -> Result<(f64, f64, bool), TheoryError> {
    if p.len() != lbar.len() {
        return Err(TheoryError::LengthMismatch);
    }
    let big_k = p.len() as f64;
    let mut gamma = 0.0_f64;
    let mut xi = 0.0_f64;
    for (j, (&pk, &lk)) in p.iter().zip(lbar).enumerate().take(k_star) {
        let rank = (j + 1) as f64;
        if pk <= 0.0 {
            continue;
        }
        if lk <= 0.0 {
            return Err(TheoryError::ZeroLoss { rank: j + 1 });
        }
        gamma = gamma.max(rank / lk);
        let envelope = (1.0 - rank / (big_k + 1.0)).powf(beta.b - 1.0);
        xi = xi.max(pk / envelope);
    }
    let holds = gamma.is_finite() && xi.is_finite();
    Ok((gamma, xi, holds))
}

/// `sigma_k = 3/5 gamma xi p_Beta(k/(K+1); a, b)` with the unshifted
/// density.
pub fn sigma_weights(
    num_classes: usize,
    gamma: f64,
    xi: f64,
    beta: &BetaParams,
) -> Result<Vec<f64>, TheoryError> {
    let unshifted = BetaParams {
        shifted: false,
        ..*beta
    };
    (1..=num_classes)
        .map(|k| {
            let z = k as f64 / (num_classes as f64 + 1.0);
            Ok(0.6 * gamma * xi * beta_pdf(z, &unshifted)?)
        })
        .collect()
}

/// Runs the whole chain at the calibrated threshold and reports every
/// estimated quantity together with the eligibility flags.
pub fn check_bound(
    dists: &[ProbDist],
    labels: &[usize],
    losses: &[f64],
    cal: &CalibrationResult,
    beta: &BetaParams,
) -> Result<BoundReport, TheoryError> {
    if dists.is_empty() || dists.len() != labels.len() || dists.len() != losses.len() {
        return Err(TheoryError::LengthMismatch);
    }
    let num_classes = dists[0].num_classes();
    let alpha = cal.alpha;
    let tau = cal.tau_hat;

    // Randomized set sizes at tau, on a dedicated sub-stream of the
    // calibration seed.
    let us = uniform_stream(mix_seed(cal.rng_seed, 0xB0BD), dists.len());
    let mut size_total = 0usize;
    for (d, &u) in dists.iter().zip(&us) {
        size_total += aps::prediction_set(d, u, tau)?.size();
    }
    let expected_pss = size_total as f64 / dists.len() as f64;

    let stats = estimate_rank_stats(dists, labels, losses)?;
    let h_est = estimate_h(dists, labels, tau)?;
    let k_star_val = k_star(&h_est.h, alpha);

    let monotone_h = check_monotone(&h_est);
    let (gamma, xi, assumptions_hold) =
        fit_assumption_constants(&stats.p, &stats.lbar, k_star_val, beta)?;

    let sigma_k = sigma_weights(num_classes, gamma, xi, beta)?;
    let l_beta: f64 = sigma_k.iter().zip(&stats.lbar).map(|(s, l)| s * l).sum();
    // `+ 0.0` normalizes the negative zero an empty sum produces.
    let partial_no_const: f64 = stats
        .p
        .iter()
        .enumerate()
        .take(k_star_val)
        .map(|(j, &pk)| (j + 1) as f64 * pk)
        .sum::<f64>()
        + 0.0;
    let partial_rank_sum = num_classes as f64 * (1.0 - alpha) + partial_no_const;

    let bound_holds = (monotone_h && assumptions_hold)
        .then(|| expected_pss <= partial_rank_sum && partial_no_const <= l_beta);

    let gamma_ratio =
        (log_gamma(beta.a + beta.b)? - log_gamma(beta.a)? - log_gamma(beta.b)?).exp();

    Ok(BoundReport {
        num_classes,
        alpha,
        tau,
        n_cal: cal.scores.len(),
        n_eval: dists.len(),
        p_k: stats.p,
        lbar_k: stats.lbar,
        h_k: h_est.h,
        k_star: k_star_val,
        gamma,
        xi,
        sigma_k,
        l_beta,
        partial_rank_sum,
        partial_rank_sum_no_const: partial_no_const,
        expected_pss,
        monotone_h,
        assumptions_hold,
        bound_holds,
        gamma_ratio,
    })
}

/// Weak monotone decrease of H over ranks with at least
/// [`MONOTONE_MIN_SAMPLES`] behind them; sparser ranks are noise and stay
/// out of the verdict.
fn check_monotone(h_est: &HEstimate) -> bool {
    let eligible: Vec<f64> = h_est
        .h
        .iter()
        .zip(&h_est.counts)
        .filter(|(v, &c)| v.is_some() && c >= MONOTONE_MIN_SAMPLES)
        .map(|(v, _)| v.unwrap())
        .collect();
    eligible.windows(2).all(|w| w[1] <= w[0] + 1e-12)
}
