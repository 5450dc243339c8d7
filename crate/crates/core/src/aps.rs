//! Adaptive prediction sets: generalized conditional quantile, randomized
//! set function, generalized inverse quantile conformity score, and scalar
//! temperature scaling.
//!
//! For a prediction `pi` sorted descending, the quantile `Q` is the
//! smallest prefix length whose cumulative probability reaches `tau`; the
//! randomized set keeps the top `Q-1` classes when `u <= V` and the top `Q`
//! otherwise, where `V` rescales the overshoot of the prefix sum past
//! `tau`. The conformity score is the smallest `tau` at which a label
//! enters the set, which has the closed form `prefix(r) - u * pi_(r)` at
//! rank `r`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simplex::{self, ProbDist, SimplexError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ApsError {
    #[error("tau {0} outside [0, 1]")]
    TauOutOfRange(f64),
    #[error("top-probability at the quantile is zero")]
    DegenerateTopProb,
    #[error("logits contain a non-finite value")]
    NonFiniteLogits,
    #[error("labels and logits disagree on sample count")]
    LengthMismatch,
    #[error(transparent)]
    Simplex(#[from] SimplexError),
}

/// A randomized APS prediction set. `members` is always a prefix of the
/// source distribution's descending order and may be empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApsSet {
    members: Vec<usize>,
    pub tau: f64,
    pub u: f64,
}

impl ApsSet {
    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.members.contains(&class)
    }
}

/// Smallest prefix length whose sorted cumulative probability reaches
/// `tau`; in [1, K].
pub fn gen_quantile(dist: &ProbDist, tau: f64) -> Result<usize, ApsError> {
    check_tau(tau)?;
    let prefix = dist.sorted_prefix_sums();
    for (j, &p) in prefix.iter().enumerate() {
        if p >= tau {
            return Ok(j + 1);
        }
    }
    Ok(dist.num_classes())
}

/// The randomization term `V = (prefix(Q) - tau) / pi_(Q)`, in [0, 1).
pub fn randomization_term(dist: &ProbDist, tau: f64) -> Result<f64, ApsError> {
    let q = gen_quantile(dist, tau)?;
    let top = dist.sorted_prob(q - 1);
    if top <= 0.0 {
        return Err(ApsError::DegenerateTopProb);
    }
    let prefix_q = dist.sorted_prefix_sums()[q - 1];
    Ok((prefix_q - tau) / top)
}

/// Randomized prediction set at threshold `tau`: keeps the top `Q-1`
/// classes when `u <= V`, the top `Q` otherwise. `Q - 1 = 0` yields the
/// empty set.
pub fn prediction_set(dist: &ProbDist, u: f64, tau: f64) -> Result<ApsSet, ApsError> {
    let q = gen_quantile(dist, tau)?;
    let v = randomization_term(dist, tau)?;
    let keep = if u <= v { q - 1 } else { q };
    Ok(ApsSet {
        members: dist.order()[..keep].to_vec(),
        tau,
        u,
    })
}

/// Generalized inverse quantile conformity score
/// `E = prefix(r) - u * pi_(r)` at the label's rank `r`; in [0, 1].
///
/// This is the infimum of the thresholds admitting the label: the label is
/// in the set for every `tau > E` and outside it for every `tau < E` (and
/// at `tau = E` exactly, the `u <= V` branch drops it).
pub fn conformity_score(dist: &ProbDist, label: usize, u: f64) -> Result<f64, ApsError> {
    let rank = dist.tcpr(label)?.rank;
    let prefix_r = dist.sorted_prefix_sums()[rank - 1];
    let score = prefix_r - u * dist.sorted_prob(rank - 1);
    Ok(score.clamp(0.0, 1.0))
}

fn check_tau(tau: f64) -> Result<(), ApsError> {
    if !tau.is_finite() || !(0.0..=1.0).contains(&tau) {
        return Err(ApsError::TauOutOfRange(tau));
    }
    Ok(())
}

/// Platt-style scalar temperature for logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperature {
    t: f64,
}

impl Temperature {
    pub fn new(t: f64) -> Result<Self, ApsError> {
        if !t.is_finite() || t <= 0.0 {
            return Err(ApsError::NonFiniteLogits);
        }
        Ok(Self { t })
    }

    pub fn identity() -> Self {
        Self { t: 1.0 }
    }

    pub fn value(&self) -> f64 {
        self.t
    }

    /// Softmax of `logits / t`.
    pub fn apply(&self, logits: &[f64]) -> ProbDist {
        let scaled: Vec<f64> = logits.iter().map(|&z| z / self.t).collect();
        ProbDist::from_raw(&simplex::softmax(&scaled)).expect("softmax output is a valid simplex point")
    }

    pub fn apply_matrix(&self, logits: &Array2<f64>) -> Vec<ProbDist> {
        logits
            .rows()
            .into_iter()
            .map(|row| self.apply(row.as_slice().expect("row-major layout")))
            .collect()
    }
}

const LOG_T_LO: f64 = -2.995732273553991; // ln 0.05
const LOG_T_HI: f64 = 2.995732273553991; // ln 20
const LOG_T_TOL: f64 = 1e-4;

/// Fits the temperature minimizing mean NLL of `softmax(logits / t)` by
/// golden-section search on `ln t` over [ln 0.05, ln 20]. A flat objective
/// resolves to `t = 1`.
pub fn fit_temperature(logits: &Array2<f64>, labels: &[usize]) -> Result<Temperature, ApsError> {
    if logits.nrows() == 0 || logits.nrows() != labels.len() {
        return Err(ApsError::LengthMismatch);
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(ApsError::NonFiniteLogits);
    }
    let k = logits.ncols();
    if labels.iter().any(|&y| y >= k) {
        return Err(ApsError::Simplex(SimplexError::LabelOutOfRange {
            label: *labels.iter().find(|&&y| y >= k).unwrap(),
            classes: k,
        }));
    }

    let nll = |t: f64| mean_nll(logits, labels, t);

    let inv_phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (LOG_T_LO, LOG_T_HI);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = nll(c.exp());
    let mut fd = nll(d.exp());
    // Ties shrink towards the smaller temperature so numerically flat
    // stretches (saturated NLL) resolve deterministically.
    while b - a > LOG_T_TOL {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = nll(c.exp());
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = nll(d.exp());
        }
    }
    let mut t = ((a + b) / 2.0).exp();
    if nll(1.0) <= nll(t) + 1e-12 {
        t = 1.0;
    }
    Temperature::new(t)
}

fn mean_nll(logits: &Array2<f64>, labels: &[usize], t: f64) -> f64 {
    let mut total = simplex::KahanSum::new();
    for (row, &y) in logits.rows().into_iter().zip(labels) {
        let scaled: Vec<f64> = row.iter().map(|&z| z / t).collect();
        let logp = simplex::log_softmax(&scaled);
        total.add(-logp[y]);
    }
    total.value() / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn dist(raw: &[f64]) -> ProbDist {
        ProbDist::from_raw(raw).unwrap()
    }

    #[test]
    fn gen_quantile_known_cases() {
        let d = dist(&[0.5, 0.3, 0.2]);
        assert_eq!(gen_quantile(&d, 0.7).unwrap(), 2);
        assert_eq!(gen_quantile(&d, 0.5).unwrap(), 1);
        assert_eq!(gen_quantile(&d, 0.0).unwrap(), 1);
        assert_eq!(gen_quantile(&d, 1.0).unwrap(), 3);
        assert!(matches!(
            gen_quantile(&d, 1.5),
            Err(ApsError::TauOutOfRange(_))
        ));
    }

    #[test]
    fn randomization_term_known_cases() {
        let d = dist(&[0.5, 0.3, 0.2]);
        assert!((randomization_term(&d, 0.7).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(randomization_term(&d, 0.5).unwrap(), 0.0);

        let e = dist(&[0.6, 0.4]);
        assert!((randomization_term(&e, 0.9).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn prediction_set_branches() {
        let d = dist(&[0.5, 0.3, 0.2]);
        // u below V drops to the top Q-1 classes.
        let s = prediction_set(&d, 0.2, 0.7).unwrap();
        assert_eq!(s.members(), &[0]);
        // u above V keeps Q classes.
        let s = prediction_set(&d, 0.5, 0.7).unwrap();
        assert_eq!(s.members(), &[0, 1]);
        // Boundary: u = V = 0 takes the drop branch, giving the empty set.
        let s = prediction_set(&d, 0.0, 0.5).unwrap();
        assert!(s.members().is_empty());
    }

    #[test]
    fn conformity_score_closed_form() {
        let d = dist(&[0.5, 0.3, 0.2]);
        assert!((conformity_score(&d, 0, 0.0).unwrap() - 0.5).abs() < 1e-12);
        assert!((conformity_score(&d, 1, 1.0).unwrap() - 0.5).abs() < 1e-12);
        assert!((conformity_score(&d, 2, 0.5).unwrap() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn score_with_u_one_is_previous_prefix() {
        let d = dist(&[0.4, 0.35, 0.15, 0.1]);
        let prefix = d.sorted_prefix_sums();
        for label in 0..4 {
            let r = d.tcpr(label).unwrap().rank;
            let expected = if r == 1 { 0.0 } else { prefix[r - 2] };
            assert!((conformity_score(&d, label, 1.0).unwrap() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn fit_temperature_confident_sample_pushes_low() {
        let logits = array![[10.0, 0.0]];
        let t = fit_temperature(&logits, &[0]).unwrap();
        assert!(t.value() < 0.06, "t = {}", t.value());
    }

    #[test]
    fn fit_temperature_flat_objective_returns_one() {
        let logits = array![[0.0, 0.0], [0.0, 0.0]];
        let t = fit_temperature(&logits, &[0, 1]).unwrap();
        assert_eq!(t.value(), 1.0);
    }

    #[test]
    fn fit_temperature_matches_dense_grid() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let logits = Array2::from_shape_fn((100, 5), |_| 2.0 * rng.random::<f64>() - 1.0);
        let labels: Vec<usize> = (0..100).map(|_| rng.random_range(0..5)).collect();

        let fitted = fit_temperature(&logits, &labels).unwrap();

        // Dense-grid oracle over the same log-range.
        let n = 10_000;
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..=n {
            let x = LOG_T_LO + (LOG_T_HI - LOG_T_LO) * i as f64 / n as f64;
            let v = mean_nll(&logits, &labels, x.exp());
            if v < best.0 {
                best = (v, x);
            }
        }
        assert!(
            (fitted.value().ln() - best.1).abs() < 1e-3,
            "golden {} vs grid {}",
            fitted.value(),
            best.1.exp()
        );
    }

    #[test]
    fn rejects_bad_logits() {
        let logits = array![[f64::NAN, 0.0]];
        assert!(matches!(
            fit_temperature(&logits, &[0]),
            Err(ApsError::NonFiniteLogits)
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn random_dist() -> impl Strategy<Value = ProbDist> {
            proptest::collection::vec(1e-4f64..1.0, 2..10)
                .prop_map(|raw| ProbDist::from_raw(&raw).unwrap())
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(1000))]

            // Duality between the score and set membership: the label joins
            // the set exactly when tau exceeds its conformity score.
            #[test]
            fn score_set_duality(
                d in random_dist(),
                label_pick in 0usize..10,
                u in 0.0f64..=1.0,
            ) {
                let label = label_pick % d.num_classes();
                let e = conformity_score(&d, label, u).unwrap();
                let hi = e + 1e-9;
                if hi <= 1.0 {
                    prop_assert!(prediction_set(&d, u, hi).unwrap().contains(label));
                }
                let lo = e - 1e-9;
                if lo >= 0.0 {
                    prop_assert!(!prediction_set(&d, u, lo).unwrap().contains(label));
                }
            }

            // Sets grow with tau for a fixed randomization draw.
            #[test]
            fn sets_monotone_in_tau(
                d in random_dist(),
                u in 0.0f64..=1.0,
                t1 in 0.0f64..=1.0,
                t2 in 0.0f64..=1.0,
            ) {
                let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
                let small = prediction_set(&d, u, lo).unwrap();
                let large = prediction_set(&d, u, hi).unwrap();
                prop_assert!(small.size() <= large.size());
                // Prefix structure: the smaller set is a prefix of the larger.
                prop_assert_eq!(small.members(), &large.members()[..small.size()]);
            }

            // With u = 1 the drop branch is unreachable and Q classes stay.
            #[test]
            fn u_one_keeps_q(d in random_dist(), tau in 0.0f64..=1.0) {
                let q = gen_quantile(&d, tau).unwrap();
                prop_assert_eq!(prediction_set(&d, 1.0, tau).unwrap().size(), q);
            }

            #[test]
            fn score_in_unit_interval(
                d in random_dist(),
                label_pick in 0usize..10,
                u in 0.0f64..=1.0,
            ) {
                let label = label_pick % d.num_classes();
                let e = conformity_score(&d, label, u).unwrap();
                prop_assert!((0.0..=1.0).contains(&e));
            }
        }
    }
}
