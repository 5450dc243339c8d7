//! Desk-scale differentiable classifiers with hand-written gradients:
//! a linear-softmax model and a one-hidden-layer tanh MLP, SGD training
//! under any [`LossSpec`], and l-infinity-bounded FGSM/PGD attacks with
//! Top-1 or entropy-maximizing objectives.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::LabeledSet;
use crate::simplex::{self, ProbDist};
use crate::weighting::{self, LossSpec, TcprSource, WeightingError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input has dimension {found}, classifier expects {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("Top-1 attack objective requires a label")]
    MissingLabel,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Weighting(#[from] WeightingError),
}

/// Classifier architecture; hidden width must be positive for the MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    Linear,
    Mlp { hidden: usize },
}

impl Arch {
    fn param_count(&self, d_in: usize, k: usize) -> usize {
        match self {
            Arch::Linear => k * d_in + k,
            Arch::Mlp { hidden } => hidden * d_in + hidden + k * hidden + k,
        }
    }
}

/// A softmax classifier with a flat parameter vector. Immutable once
/// trained; forward passes are pure.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    arch: Arch,
    d_in: usize,
    k: usize,
    params: Vec<f64>,
}

// Flat layout: Linear = [W (k x d), b (k)];
// Mlp = [W1 (h x d), b1 (h), W2 (k x h), b2 (k)]. All row-major.
impl Classifier {
    pub fn zeros(arch: Arch, d_in: usize, k: usize) -> Result<Self, ModelError> {
        Self::validate_dims(arch, d_in, k)?;
        Ok(Self {
            arch,
            d_in,
            k,
            params: vec![0.0; arch.param_count(d_in, k)],
        })
    }

    /// Seeded init: weights scaled by `1/sqrt(fan_in)`, biases zero.
    pub fn random(arch: Arch, d_in: usize, k: usize, seed: u64) -> Result<Self, ModelError> {
        let mut c = Self::zeros(arch, d_in, k)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match arch {
            Arch::Linear => {
                let scale = 1.0 / (d_in as f64).sqrt();
                for i in 0..k * d_in {
                    c.params[i] = scale * (2.0 * rng.random::<f64>() - 1.0);
                }
            }
            Arch::Mlp { hidden } => {
                let s1 = 1.0 / (d_in as f64).sqrt();
                for i in 0..hidden * d_in {
                    c.params[i] = s1 * (2.0 * rng.random::<f64>() - 1.0);
                }
                let s2 = 1.0 / (hidden as f64).sqrt();
                let w2_start = hidden * d_in + hidden;
                for i in 0..k * hidden {
                    c.params[w2_start + i] = s2 * (2.0 * rng.random::<f64>() - 1.0);
                }
            }
        }
        Ok(c)
    }

    fn validate_dims(arch: Arch, d_in: usize, k: usize) -> Result<(), ModelError> {
        if d_in == 0 || k < 2 {
            return Err(ModelError::Config("need d_in >= 1 and K >= 2".into()));
        }
        if let Arch::Mlp { hidden } = arch {
            if hidden == 0 {
                return Err(ModelError::Config("MLP hidden width must be > 0".into()));
            }
        }
        Ok(())
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.d_in, self.k)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_input(&self, x: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.d_in {
            return Err(ModelError::DimMismatch {
                expected: self.d_in,
                found: x.len(),
            });
        }
        Ok(())
    }

    /// Logits and the softmax distribution for one input.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ProbDist), ModelError> {
        self.check_input(x)?;
        let logits = self.logits(x);
        let dist = ProbDist::from_raw(&simplex::softmax(&logits))
            .expect("softmax output is a valid simplex point");
        Ok((logits, dist))
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        match self.arch {
            Arch::Linear => self.linear_logits(x),
            Arch::Mlp { hidden } => self.mlp_forward(x, hidden).1,
        }
    }

    fn linear_logits(&self, x: &[f64]) -> Vec<f64> {
        let (d, k) = (self.d_in, self.k);
        let bias = &self.params[k * d..];
        (0..k)
            .map(|c| {
                let row = &self.params[c * d..(c + 1) * d];
                row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + bias[c]
            })
            .collect()
    }

    /// Hidden activations and logits for the MLP.
    fn mlp_forward(&self, x: &[f64], hidden: usize) -> (Vec<f64>, Vec<f64>) {
        let (d, k) = (self.d_in, self.k);
        let w1 = &self.params[..hidden * d];
        let b1 = &self.params[hidden * d..hidden * d + hidden];
        let w2_start = hidden * d + hidden;
        let w2 = &self.params[w2_start..w2_start + k * hidden];
        let b2 = &self.params[w2_start + k * hidden..];

        let h: Vec<f64> = (0..hidden)
            .map(|j| {
                let row = &w1[j * d..(j + 1) * d];
                (row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b1[j]).tanh()
            })
            .collect();
        let logits: Vec<f64> = (0..k)
            .map(|c| {
                let row = &w2[c * hidden..(c + 1) * hidden];
                row.iter().zip(&h).map(|(w, hj)| w * hj).sum::<f64>() + b2[c]
            })
            .collect();
        (h, logits)
    }

    /// Logits for every row of a feature matrix.
    pub fn forward_batch(&self, xs: &Array2<f64>) -> Result<Array2<f64>, ModelError> {
        if xs.ncols() != self.d_in {
            return Err(ModelError::DimMismatch {
                expected: self.d_in,
                found: xs.ncols(),
            });
        }
        let mut out = Array2::zeros((xs.nrows(), self.k));
        for (i, row) in xs.rows().into_iter().enumerate() {
            let logits = self.logits(row.as_slice().expect("row-major layout"));
            for (j, z) in logits.into_iter().enumerate() {
                out[[i, j]] = z;
            }
        }
        Ok(out)
    }

    /// Softmax distributions for every row.
    pub fn predict_dists(&self, xs: &Array2<f64>) -> Result<Vec<ProbDist>, ModelError> {
        Ok(self
            .forward_batch(xs)?
            .rows()
            .into_iter()
            .map(|row| {
                ProbDist::from_raw(&simplex::softmax(row.as_slice().expect("row-major")))
                    .expect("valid simplex point")
            })
            .collect())
    }

    /// Gradient of a scalar objective with respect to the input.
    pub fn grad_wrt_input(
        &self,
        x: &[f64],
        objective: AttackObjective,
        label: Option<usize>,
    ) -> Result<Vec<f64>, ModelError> {
        self.check_input(x)?;
        let logits = self.logits(x);
        let g_logits = objective_logit_grad(&logits, objective, label)?;
        Ok(self.input_backprop(x, &g_logits))
    }

    /// Pulls a logit-space gradient back to the input.
    fn input_backprop(&self, x: &[f64], g_logits: &[f64]) -> Vec<f64> {
        let (d, k) = (self.d_in, self.k);
        match self.arch {
            Arch::Linear => {
                let mut gx = vec![0.0; d];
                for c in 0..k {
                    let row = &self.params[c * d..(c + 1) * d];
                    for (gxj, w) in gx.iter_mut().zip(row) {
                        *gxj += g_logits[c] * w;
                    }
                }
                gx
            }
            Arch::Mlp { hidden } => {
                let (h, _) = self.mlp_forward(x, hidden);
                let w1 = &self.params[..hidden * d];
                let w2_start = hidden * d + hidden;
                let w2 = &self.params[w2_start..w2_start + k * hidden];

                let mut gh = vec![0.0; hidden];
                for c in 0..k {
                    let row = &w2[c * hidden..(c + 1) * hidden];
                    for (ghj, w) in gh.iter_mut().zip(row) {
                        *ghj += g_logits[c] * w;
                    }
                }
                let mut gx = vec![0.0; d];
                for j in 0..hidden {
                    let ga = gh[j] * (1.0 - h[j] * h[j]);
                    let row = &w1[j * d..(j + 1) * d];
                    for (gxi, w) in gx.iter_mut().zip(row) {
                        *gxi += ga * w;
                    }
                }
                gx
            }
        }
    }

    /// Accumulates the parameter gradient contribution of one sample given
    /// its logit-space gradient.
    fn accumulate_param_grad(&self, x: &[f64], g_logits: &[f64], grad: &mut [f64]) {
        let (d, k) = (self.d_in, self.k);
        match self.arch {
            Arch::Linear => {
                for c in 0..k {
                    let g = g_logits[c];
                    let row = &mut grad[c * d..(c + 1) * d];
                    for (gw, xi) in row.iter_mut().zip(x) {
                        *gw += g * xi;
                    }
                    grad[k * d + c] += g;
                }
            }
            Arch::Mlp { hidden } => {
                let (h, _) = self.mlp_forward(x, hidden);
                let w2_start = hidden * d + hidden;
                let w2 = &self.params[w2_start..w2_start + k * hidden];

                let mut gh = vec![0.0; hidden];
                for c in 0..k {
                    let g = g_logits[c];
                    let row = &w2[c * hidden..(c + 1) * hidden];
                    for (ghj, w) in gh.iter_mut().zip(row) {
                        *ghj += g * w;
                    }
                    let grad_w2 = &mut grad[w2_start + c * hidden..w2_start + (c + 1) * hidden];
                    for (gw, hj) in grad_w2.iter_mut().zip(&h) {
                        *gw += g * hj;
                    }
                    grad[w2_start + k * hidden + c] += g;
                }
                for j in 0..hidden {
                    let ga = gh[j] * (1.0 - h[j] * h[j]);
                    let grad_w1 = &mut grad[j * d..(j + 1) * d];
                    for (gw, xi) in grad_w1.iter_mut().zip(x) {
                        *gw += ga * xi;
                    }
                    grad[hidden * d + j] += ga;
                }
            }
        }
    }

    /// Top-1 accuracy; argmax ties go to the lower class index.
    pub fn accuracy(&self, data: &LabeledSet) -> Result<f64, ModelError> {
        let logits = self.forward_batch(&data.features)?;
        let mut correct = 0usize;
        for (row, &y) in logits.rows().into_iter().zip(&data.labels) {
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if best == y {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }
}

/// What the attacker maximizes: the cross-entropy at the true label or
/// the entropy of the predictive distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttackObjective {
    Top1Loss,
    Entropy,
}

fn objective_logit_grad(
    logits: &[f64],
    objective: AttackObjective,
    label: Option<usize>,
) -> Result<Vec<f64>, ModelError> {
    let p = simplex::softmax(logits);
    match objective {
        AttackObjective::Top1Loss => {
            let y = label.ok_or(ModelError::MissingLabel)?;
            if y >= logits.len() {
                return Err(ModelError::Config(format!("label {y} out of range")));
            }
            Ok(p.iter()
                .enumerate()
                .map(|(j, &pj)| pj - if j == y { 1.0 } else { 0.0 })
                .collect())
        }
        AttackObjective::Entropy => {
            let logp = simplex::log_softmax(logits);
            let entropy = -p
                .iter()
                .zip(&logp)
                .filter(|(pj, _)| **pj > 0.0)
                .map(|(pj, lj)| pj * lj)
                .sum::<f64>();
            Ok(p.iter()
                .zip(&logp)
                .map(|(&pj, &lj)| if pj > 0.0 { -pj * (lj + entropy) } else { 0.0 })
                .collect())
        }
    }
}

/// l-infinity attack configuration. One step with `stepsize >= epsilon`
/// and no random start is FGSM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub objective: AttackObjective,
    pub epsilon: f64,
    pub steps: usize,
    pub stepsize: f64,
    pub random_start: bool,
    pub clamp_box: Option<(f64, f64)>,
}

impl AttackConfig {
    /// PGD with the training defaults: 10 steps, stepsize 2/255, budget
    /// 8/255, random start on.
    pub fn pgd10() -> Self {
        Self {
            objective: AttackObjective::Top1Loss,
            epsilon: 8.0 / 255.0,
            steps: 10,
            stepsize: 2.0 / 255.0,
            random_start: true,
            clamp_box: None,
        }
    }

    /// The evaluation attack: same budget, 100 steps.
    pub fn pgd100() -> Self {
        Self {
            steps: 100,
            ..Self::pgd10()
        }
    }

    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            objective: AttackObjective::Top1Loss,
            epsilon,
            steps: 1,
            stepsize: epsilon,
            random_start: false,
            clamp_box: None,
        }
    }

    pub fn with_objective(mut self, objective: AttackObjective) -> Self {
        self.objective = objective;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(ModelError::Config("epsilon must be >= 0".into()));
        }
        if self.steps < 1 || !(self.stepsize > 0.0) {
            return Err(ModelError::Config(
                "need steps >= 1 and stepsize > 0".into(),
            ));
        }
        if let Some((lo, hi)) = self.clamp_box {
            if !(lo < hi) {
                return Err(ModelError::Config("clamp box must have lo < hi".into()));
            }
        }
        Ok(())
    }
}

/// Projected signed-gradient ascent inside the l-infinity ball around
/// `x0`. The output always satisfies the budget and box constraints.
pub fn attack(
    classifier: &Classifier,
    x0: &[f64],
    label: usize,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<Vec<f64>, ModelError> {
    cfg.validate()?;
    classifier.check_input(x0)?;
    let eps = cfg.epsilon;
    let mut x: Vec<f64> = x0.to_vec();

    if cfg.random_start && eps > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (xi, &x0i) in x.iter_mut().zip(x0) {
            let delta = (2.0 * rng.random::<f64>() - 1.0) * eps;
            *xi = x0i + delta;
        }
        project(&mut x, x0, eps, cfg.clamp_box);
    }

    let label_arg = match cfg.objective {
        AttackObjective::Top1Loss => Some(label),
        AttackObjective::Entropy => None,
    };
    for _ in 0..cfg.steps {
        let g = classifier.grad_wrt_input(&x, cfg.objective, label_arg)?;
        for (xi, gi) in x.iter_mut().zip(&g) {
            *xi += cfg.stepsize * sign(*gi);
        }
        project(&mut x, x0, eps, cfg.clamp_box);
    }
    Ok(x)
}

/// Attacks every row with per-sample seeds derived from `seed`.
pub fn attack_batch(
    classifier: &Classifier,
    xs: &Array2<f64>,
    labels: &[usize],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<Array2<f64>, ModelError> {
    let mut out = xs.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let x0: Vec<f64> = row.to_vec();
        let adv = attack(classifier, &x0, labels[i], cfg, mix_seed(seed, i as u64))?;
        for (dst, v) in row.iter_mut().zip(adv) {
            *dst = v;
        }
    }
    Ok(out)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn project(x: &mut [f64], x0: &[f64], eps: f64, clamp_box: Option<(f64, f64)>) {
    for (xi, &ci) in x.iter_mut().zip(x0) {
        *xi = xi.clamp(ci - eps, ci + eps);
        if let Some((lo, hi)) = clamp_box {
            *xi = xi.clamp(lo, hi);
        }
    }
}

use crate::conformal::mix_seed;

/// Training configuration. An attack config turns every batch into its
/// adversarial counterpart before the loss (adversarial training).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: Arch,
    pub loss: LossSpec,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// `(epoch, factor)` pairs; the rate is multiplied by `factor` at the
    /// start of the given 0-indexed epoch.
    pub lr_drops: Vec<(usize, f64)>,
    pub weight_decay: f64,
    pub seed: u64,
    pub attack: Option<AttackConfig>,
}

impl TrainConfig {
    pub fn new(arch: Arch, loss: LossSpec) -> Self {
        Self {
            arch,
            loss,
            epochs: 30,
            batch: 64,
            lr: 0.1,
            lr_drops: Vec::new(),
            weight_decay: 1e-4,
            seed: 0,
            attack: None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.epochs < 1 || self.batch < 1 {
            return Err(ModelError::Config("need epochs >= 1 and batch >= 1".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(ModelError::Config("lr must be finite and >= 0".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(ModelError::Config("weight_decay must be >= 0".into()));
        }
        self.loss.validate()?;
        if let Some(a) = &self.attack {
            a.validate()?;
        }
        Ok(())
    }
}

/// Mini-batch SGD with seeded shuffling. Deterministic: identical config
/// and data give bitwise-identical weights.
pub fn train(data: &LabeledSet, cfg: &TrainConfig) -> Result<Classifier, ModelError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(ModelError::Config("empty training set".into()));
    }
    let d = data.dim();
    let k = data.num_classes;
    let mut model = Classifier::random(cfg.arch, d, k, cfg.seed)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 1));
    let mut attack_stream: u64 = 0;

    let n = data.len();
    let mut indices: Vec<usize> = (0..n).collect();
    let mut grad = vec![0.0; model.params.len()];
    let mut lr = cfg.lr;

    for epoch in 0..cfg.epochs {
        for &(at, factor) in &cfg.lr_drops {
            if at == epoch {
                lr *= factor;
            }
        }
        indices.shuffle(&mut shuffle_rng);

        for chunk in indices.chunks(cfg.batch) {
            let clean = data.subset(chunk);
            let train_x = match &cfg.attack {
                Some(atk) => {
                    attack_stream += 1;
                    attack_batch(
                        &model,
                        &clean.features,
                        &clean.labels,
                        atk,
                        mix_seed(cfg.seed, 0x4000_0000 + attack_stream),
                    )?
                }
                None => clean.features.clone(),
            };

            let logits = model.forward_batch(&train_x)?;
            let clean_logits = if cfg.loss.requires_clean_logits() {
                Some(model.forward_batch(&clean.features)?)
            } else {
                None
            };
            let out = weighting::loss_and_grad(
                &cfg.loss,
                &logits,
                &clean.labels,
                TcprSource::SelfLogits,
                clean_logits.as_ref(),
            )?;

            grad.fill(0.0);
            for (i, row) in out.grad.rows().into_iter().enumerate() {
                let x = train_x.row(i);
                model.accumulate_param_grad(
                    x.as_slice().expect("row-major"),
                    row.as_slice().expect("row-major"),
                    &mut grad,
                );
            }
            if let Some(cg) = &out.clean_grad {
                for (i, row) in cg.rows().into_iter().enumerate() {
                    let x = clean.features.row(i);
                    model.accumulate_param_grad(
                        x.as_slice().expect("row-major"),
                        row.as_slice().expect("row-major"),
                        &mut grad,
                    );
                }
            }

            for (w, g) in model.params.iter_mut().zip(&grad) {
                *w -= lr * g;
            }
            if cfg.weight_decay > 0.0 {
                let shrink = 1.0 - lr * cfg.weight_decay;
                for w in model.params.iter_mut() {
                    *w *= shrink;
                }
            }
        }
    }
    Ok(model)
}

const CHECKPOINT_MAGIC: &[u8; 5] = b"CPUR1";

/// Writes the versioned binary checkpoint: magic, arch tag, dims,
/// little-endian f64 parameters. Atomic (temp file then rename).
pub fn save_checkpoint(classifier: &Classifier, path: &Path) -> Result<(), ModelError> {
    let tmp = path.with_extension("tmp");
    {
        let mut out = BufWriter::new(File::create(&tmp)?);
        out.write_all(CHECKPOINT_MAGIC)?;
        let (tag, hidden) = match classifier.arch {
            Arch::Linear => (0u8, 0u32),
            Arch::Mlp { hidden } => (1u8, hidden as u32),
        };
        out.write_all(&[tag])?;
        out.write_all(&hidden.to_le_bytes())?;
        out.write_all(&(classifier.d_in as u32).to_le_bytes())?;
        out.write_all(&(classifier.k as u32).to_le_bytes())?;
        out.write_all(&(classifier.params.len() as u64).to_le_bytes())?;
        for p in &classifier.params {
            out.write_all(&p.to_le_bytes())?;
        }
        out.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Classifier, ModelError> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 5];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ModelError::BadCheckpoint("wrong magic bytes".into()));
    }
    let mut tag = [0u8; 1];
    input.read_exact(&mut tag)?;
    let hidden = read_u32(&mut input)? as usize;
    let d_in = read_u32(&mut input)? as usize;
    let k = read_u32(&mut input)? as usize;
    let arch = match tag[0] {
        0 => Arch::Linear,
        1 => Arch::Mlp { hidden },
        t => return Err(ModelError::BadCheckpoint(format!("unknown arch tag {t}"))),
    };
    let mut count_buf = [0u8; 8];
    input.read_exact(&mut count_buf)?;
    let count = u64::from_le_bytes(count_buf) as usize;
    if count != arch.param_count(d_in, k) {
        return Err(ModelError::BadCheckpoint(format!(
            "parameter count {count} does not match arch"
        )));
    }
    let mut params = Vec::with_capacity(count);
    let mut buf = [0u8; 8];
    for _ in 0..count {
        input.read_exact(&mut buf)?;
        params.push(f64::from_le_bytes(buf));
    }
    Classifier::validate_dims(arch, d_in, k)?;
    Ok(Classifier {
        arch,
        d_in,
        k,
        params,
    })
}

fn read_u32(input: &mut impl Read) -> Result<u32, ModelError> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;
    use crate::weighting::BetaParams;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
    }

    #[test]
    fn zero_weights_give_uniform_output() {
        let c = Classifier::zeros(Arch::Linear, 3, 4).unwrap();
        let (logits, dist) = c.forward(&[0.5, -1.0, 2.0]).unwrap();
        assert_eq!(logits, vec![0.0; 4]);
        for &p in dist.probs() {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn mlp_zero_hidden_rejected() {
        assert!(matches!(
            Classifier::zeros(Arch::Mlp { hidden: 0 }, 3, 4),
            Err(ModelError::Config(_))
        ));
    }

    #[test]
    fn forward_rejects_wrong_dim() {
        let c = Classifier::zeros(Arch::Linear, 3, 4).unwrap();
        assert!(matches!(
            c.forward(&[1.0, 2.0]),
            Err(ModelError::DimMismatch { expected: 3, found: 2 })
        ));
    }

    #[test]
    fn linear_ce_input_grad_closed_form() {
        let mut c = Classifier::zeros(Arch::Linear, 2, 3).unwrap();
        let w = [0.5, -0.2, 0.1, 0.8, -0.3, 0.4, 0.2, 0.1, -0.6];
        c.params_mut().copy_from_slice(&w);
        let x = [0.7, -1.2];
        let g = c
            .grad_wrt_input(&x, AttackObjective::Top1Loss, Some(1))
            .unwrap();
        // W^T (softmax(Wx + b) - e_y)
        let (logits, dist) = c.forward(&x).unwrap();
        assert_eq!(logits.len(), 3);
        let p = dist.probs();
        let mut expected = [0.0; 2];
        for cidx in 0..3 {
            let delta = p[cidx] - if cidx == 1 { 1.0 } else { 0.0 };
            expected[0] += delta * w[cidx * 2];
            expected[1] += delta * w[cidx * 2 + 1];
        }
        for j in 0..2 {
            assert!((g[j] - expected[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn input_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let archs = [Arch::Linear, Arch::Mlp { hidden: 5 }];
        for arch in archs {
            let c = Classifier::random(arch, 4, 3, rng.random()).unwrap();
            for objective in [AttackObjective::Top1Loss, AttackObjective::Entropy] {
                for _ in 0..10 {
                    let x: Vec<f64> = (0..4).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
                    let label = Some(rng.random_range(0..3));
                    let g = c.grad_wrt_input(&x, objective, label).unwrap();
                    let h = 1e-5;
                    for j in 0..4 {
                        let scalar = |xv: &[f64]| {
                            let (logits, dist) = c.forward(xv).unwrap();
                            match objective {
                                AttackObjective::Top1Loss => {
                                    -simplex::log_softmax(&logits)[label.unwrap()]
                                }
                                AttackObjective::Entropy => dist.entropy(),
                            }
                        };
                        let mut xp = x.clone();
                        xp[j] += h;
                        let mut xm = x.clone();
                        xm[j] -= h;
                        let fd = (scalar(&xp) - scalar(&xm)) / (2.0 * h);
                        assert!(
                            rel_err(g[j], fd) < 1e-5,
                            "{arch:?} {objective:?} d{j}: {} vs {fd}",
                            g[j]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn entropy_attack_needs_no_label_top1_does() {
        let c = Classifier::random(Arch::Linear, 3, 4, 5).unwrap();
        assert!(c
            .grad_wrt_input(&[0.1, 0.2, 0.3], AttackObjective::Entropy, None)
            .is_ok());
        assert!(matches!(
            c.grad_wrt_input(&[0.1, 0.2, 0.3], AttackObjective::Top1Loss, None),
            Err(ModelError::MissingLabel)
        ));
    }

    #[test]
    fn zero_budget_attack_is_identity() {
        let c = Classifier::random(Arch::Linear, 3, 4, 5).unwrap();
        let x = [0.4, -0.7, 1.1];
        let cfg = AttackConfig {
            epsilon: 0.0,
            ..AttackConfig::pgd10()
        };
        let adv = attack(&c, &x, 2, &cfg, 99).unwrap();
        assert_eq!(adv, x.to_vec());
    }

    #[test]
    fn attack_respects_budget_and_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let c = Classifier::random(Arch::Mlp { hidden: 4 }, 5, 3, 1).unwrap();
        let mut cfg = AttackConfig::pgd10();
        cfg.epsilon = 0.1;
        cfg.stepsize = 0.03;
        cfg.clamp_box = Some((-0.5, 0.5));
        for trial in 0..50 {
            let x: Vec<f64> = (0..5).map(|_| rng.random::<f64>() - 0.5).collect();
            let adv = attack(&c, &x, trial % 3, &cfg, trial as u64).unwrap();
            for (a, o) in adv.iter().zip(&x) {
                assert!((a - o).abs() <= cfg.epsilon + 1e-12);
                assert!((-0.5..=0.5).contains(a));
            }
        }
    }

    #[test]
    fn fgsm_never_decreases_ce_on_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for trial in 0..200 {
            let c = Classifier::random(Arch::Linear, 4, 5, rng.random()).unwrap();
            let x: Vec<f64> = (0..4).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
            let y = rng.random_range(0..5);
            let cfg = AttackConfig::fgsm(8.0 / 255.0);
            let adv = attack(&c, &x, y, &cfg, trial).unwrap();
            let ce = |xv: &[f64]| -simplex::log_softmax(&c.forward(xv).unwrap().0)[y];
            assert!(
                ce(&adv) >= ce(&x) - 1e-12,
                "trial {trial}: {} < {}",
                ce(&adv),
                ce(&x)
            );
        }
    }

    #[test]
    fn pgd_usually_beats_fgsm() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let mut wins = 0;
        let trials = 100;
        for trial in 0..trials {
            let c = Classifier::random(Arch::Linear, 4, 5, rng.random()).unwrap();
            let x: Vec<f64> = (0..4).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
            let y = rng.random_range(0..5);
            let eps = 0.1;
            let fgsm = attack(&c, &x, y, &AttackConfig::fgsm(eps), trial).unwrap();
            let pgd_cfg = AttackConfig {
                objective: AttackObjective::Top1Loss,
                epsilon: eps,
                steps: 10,
                stepsize: eps / 4.0,
                random_start: false,
                clamp_box: None,
            };
            let pgd = attack(&c, &x, y, &pgd_cfg, trial).unwrap();
            let ce = |xv: &[f64]| -simplex::log_softmax(&c.forward(xv).unwrap().0)[y];
            if ce(&pgd) >= ce(&fgsm) - 1e-12 {
                wins += 1;
            }
        }
        assert!(wins >= 95, "PGD matched FGSM in only {wins}/{trials} trials");
    }

    #[test]
    fn zero_lr_leaves_weights_unchanged() {
        let data = gen_synthetic(3, 4, 20, 0.5, 7).unwrap();
        let mut cfg = TrainConfig::new(Arch::Linear, LossSpec::ce());
        cfg.epochs = 1;
        cfg.lr = 0.0;
        cfg.weight_decay = 0.0;
        cfg.seed = 3;
        let trained = train(&data, &cfg).unwrap();
        let init = Classifier::random(Arch::Linear, 4, 3, 3).unwrap();
        assert_eq!(trained.params(), init.params());
    }

    #[test]
    fn separable_blobs_reach_full_accuracy() {
        let data = gen_synthetic(2, 2, 40, 0.05, 11).unwrap();
        let mut cfg = TrainConfig::new(Arch::Linear, LossSpec::ce());
        cfg.epochs = 50;
        cfg.batch = 16;
        cfg.lr = 0.5;
        cfg.weight_decay = 0.0;
        cfg.seed = 1;
        let model = train(&data, &cfg).unwrap();
        assert_eq!(model.accuracy(&data).unwrap(), 1.0);
    }

    #[test]
    fn entropy_regularizer_lowers_held_out_entropy() {
        let train_data = gen_synthetic(4, 6, 80, 1.0, 13).unwrap();
        let held_out = gen_synthetic(4, 6, 40, 1.0, 14).unwrap();
        let mut base = TrainConfig::new(Arch::Linear, LossSpec::ce());
        base.epochs = 30;
        base.batch = 32;
        base.lr = 0.3;
        base.seed = 2;
        let mut em = base.clone();
        em.loss = LossSpec::em_ce(0.3);

        let mean_entropy = |m: &Classifier| {
            let dists = m.predict_dists(&held_out.features).unwrap();
            dists.iter().map(ProbDist::entropy).sum::<f64>() / dists.len() as f64
        };
        let plain = train(&train_data, &base).unwrap();
        let regularized = train(&train_data, &em).unwrap();
        assert!(
            mean_entropy(&regularized) < mean_entropy(&plain),
            "{} vs {}",
            mean_entropy(&regularized),
            mean_entropy(&plain)
        );
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let data = gen_synthetic(3, 4, 30, 0.8, 21).unwrap();
        let mut cfg = TrainConfig::new(Arch::Mlp { hidden: 6 }, LossSpec::ce());
        cfg.epochs = 3;
        cfg.batch = 8;
        cfg.seed = 77;
        cfg.attack = Some(AttackConfig {
            epsilon: 0.05,
            stepsize: 0.02,
            steps: 3,
            ..AttackConfig::pgd10()
        });
        let a = train(&data, &cfg).unwrap();
        let b = train(&data, &cfg).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn adversarial_training_with_beta_runs() {
        let data = gen_synthetic(3, 4, 30, 1.0, 23).unwrap();
        let mut cfg = TrainConfig::new(
            Arch::Linear,
            LossSpec::beta_em_ce(BetaParams::default_shifted(), 0.3),
        );
        cfg.epochs = 2;
        cfg.batch = 16;
        cfg.attack = Some(AttackConfig {
            epsilon: 0.05,
            stepsize: 0.02,
            steps: 3,
            ..AttackConfig::pgd10()
        });
        let model = train(&data, &cfg).unwrap();
        assert!(model.accuracy(&data).unwrap() > 0.2);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for arch in [Arch::Linear, Arch::Mlp { hidden: 7 }] {
            let c = Classifier::random(arch, 5, 4, 123).unwrap();
            let path = dir.path().join("model.bin");
            save_checkpoint(&c, &path).unwrap();
            let loaded = load_checkpoint(&path).unwrap();
            assert_eq!(loaded, c);
        }
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"NOTCP-whatever").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(ModelError::BadCheckpoint(_))
        ));
    }
}
