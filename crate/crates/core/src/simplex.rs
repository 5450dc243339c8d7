//! Probability-vector primitives: validated points on the K-simplex with a
//! cached descending-order permutation, Shannon entropy, and the
//! true-class-probability rank (TCPR).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimplexError {
    #[error("probability vector contains a non-finite entry")]
    NonFinite,
    #[error("probability vector needs at least two entries")]
    EmptyVector,
    #[error("probability vector sums to zero")]
    AllZero,
    #[error("probability vector contains a negative entry")]
    NegativeEntry,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

/// Absolute tolerance on the simplex sum invariant.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A point on the K-simplex with its descending-order permutation cached.
///
/// Immutable after construction. `order[0]` is the index of the largest
/// probability; ties are broken towards the lower original index so that
/// ranks and prediction sets are deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbDist {
    probs: Vec<f64>,
    order: Vec<usize>,
}

impl ProbDist {
    /// Normalizes a raw non-negative vector onto the simplex and computes
    /// the descending sort order.
    ///
    /// # Errors
    ///
    /// - [`SimplexError::EmptyVector`] for fewer than two entries
    /// - [`SimplexError::NonFinite`] for NaN or infinite entries
    /// - [`SimplexError::NegativeEntry`] for entries below zero
    /// - [`SimplexError::AllZero`] when the entries sum to zero
    pub fn from_raw(raw: &[f64]) -> Result<Self, SimplexError> {
        if raw.len() < 2 {
            return Err(SimplexError::EmptyVector);
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(SimplexError::NonFinite);
        }
        if raw.iter().any(|&v| v < 0.0) {
            return Err(SimplexError::NegativeEntry);
        }
        let sum: f64 = kahan_sum(raw.iter().copied());
        if sum <= 0.0 {
            return Err(SimplexError::AllZero);
        }
        let probs: Vec<f64> = raw.iter().map(|&v| v / sum).collect();
        let order = descending_order(&probs);
        Ok(Self { probs, order })
    }

    /// Number of classes K.
    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    /// Probability of a class in original index order.
    pub fn prob(&self, class: usize) -> f64 {
        self.probs[class]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Descending-order permutation; `order()[0]` is the top class.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// `j`-th largest probability, 0-indexed.
    pub fn sorted_prob(&self, j: usize) -> f64 {
        self.probs[self.order[j]]
    }

    /// Prefix sums of the sorted probabilities, compensated and clamped so
    /// that every prefix stays within [0, 1] and the full sum is exactly 1.
    pub fn sorted_prefix_sums(&self) -> Vec<f64> {
        let k = self.probs.len();
        let mut out = Vec::with_capacity(k);
        let mut acc = KahanSum::new();
        for j in 0..k {
            acc.add(self.sorted_prob(j));
            out.push(acc.value().min(1.0));
        }
        // The simplex invariant makes the full sum 1; pin it to absorb
        // the last few ulps of rounding.
        out[k - 1] = 1.0;
        out
    }

    /// Shannon entropy in nats, with the convention `0 ln 0 = 0`.
    /// Lies in [0, ln K].
    pub fn entropy(&self) -> f64 {
        let mut acc = KahanSum::new();
        for &p in &self.probs {
            if p > 0.0 {
                acc.add(-p * p.ln());
            }
        }
        acc.value().max(0.0)
    }

    /// True-class-probability rank of `label` under the cached order.
    ///
    /// # Errors
    ///
    /// [`SimplexError::LabelOutOfRange`] when `label >= K`.
    pub fn tcpr(&self, label: usize) -> Result<Tcpr, SimplexError> {
        let k = self.probs.len();
        if label >= k {
            return Err(SimplexError::LabelOutOfRange { label, classes: k });
        }
        let pos = self
            .order
            .iter()
            .position(|&c| c == label)
            .expect("order is a permutation");
        Ok(Tcpr::new(pos + 1, k))
    }
}

/// Rank of the ground-truth class in the descending-sorted prediction,
/// with its 0-based normalization `(rank - 1) / K` in [0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tcpr {
    pub rank: usize,
    pub normalized: f64,
}

impl Tcpr {
    pub fn new(rank: usize, num_classes: usize) -> Self {
        debug_assert!(rank >= 1 && rank <= num_classes);
        Self {
            rank,
            normalized: (rank - 1) as f64 / num_classes as f64,
        }
    }
}

/// Softmax with max-subtraction; always a valid simplex point for finite
/// logits.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum = kahan_sum(exps.iter().copied());
    exps.into_iter().map(|e| e / sum).collect()
}

/// Log-softmax via logsumexp; `-log_softmax(z)[y]` is the cross-entropy.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = kahan_sum(logits.iter().map(|&z| (z - max).exp())).ln() + max;
    logits.iter().map(|&z| z - lse).collect()
}

/// Indices sorted by descending value; ties go to the lower index.
pub fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| {
        values[j]
            .partial_cmp(&values[i])
            .expect("values must be finite")
            .then(i.cmp(&j))
    });
    order
}

/// Compensated (Kahan) accumulator for stable prefix sums.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, v: f64) {
        let y = v - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

pub fn kahan_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut acc = KahanSum::new();
    for v in values {
        acc.add(v);
    }
    acc.value()
}
