//! Split-conformal prediction sets for classifiers under adversarial attack.
//!
//! The crate is organized around the CP pipeline:
//!
//! - [`simplex`]: probability-vector primitives (validation, descending
//!   order, entropy, true-class-probability rank).
//! - [`aps`]: adaptive prediction sets — generalized quantile, randomized
//!   set function, conformity score, temperature scaling.
//! - [`conformal`]: split-conformal calibration, set prediction,
//!   coverage/size metrics, and threshold-sweep curves.
//! - [`weighting`]: Beta-density importance weights over rank and the
//!   training losses (CE, Beta, entropy-minimized, TRADES, FAT) with
//!   analytic logit gradients.
//! - [`model`]: small differentiable classifiers with manual gradients,
//!   SGD training, and l-infinity FGSM/PGD attacks.
//! - [`theory`]: Monte-Carlo verifier for the Beta-weighted upper bound
//!   on expected prediction-set size.
//! - [`data`] and [`experiment`]: synthetic data, logits file ingestion,
//!   and seeded experiment orchestration with CSV/JSON emission.

pub mod aps;
pub mod config;
pub mod conformal;
pub mod data;
pub mod experiment;
pub mod model;
pub mod simplex;
pub mod theory;
pub mod weighting;

pub use aps::{ApsError, ApsSet, Temperature};
pub use conformal::{CalibrationResult, ConformalError, CpCurve, CpMetrics};
pub use data::{DataError, LabeledSet};
pub use model::{AttackConfig, AttackObjective, Arch, Classifier, ModelError, TrainConfig};
pub use simplex::{ProbDist, SimplexError, Tcpr};
pub use theory::{BoundReport, TheoryError};
pub use weighting::{BetaParams, LossKind, LossSpec, WeightingError};
