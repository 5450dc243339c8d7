//! Seeded experiment orchestration: train/attack/calibrate/evaluate over
//! a grid of train seeds and calibration-test splits, with aggregate
//! statistics and JSON/CSV emission.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aps::{self, ApsError, Temperature};
use crate::conformal::{self, mix_seed, ConformalError, CpCurve};
use crate::data::{self, DataError, LabeledSet};
use crate::model::{self, AttackConfig, ModelError, TrainConfig};
use crate::simplex::ProbDist;
use crate::theory::{self, BoundReport, TheoryError};
use crate::weighting::{BetaParams, LossSpec, WeightingError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error(transparent)]
    Aps(#[from] ApsError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error(transparent)]
    Weighting(#[from] WeightingError),
    #[error("trial (train_seed {train_seed}, split {split}) failed: {source}")]
    Trial {
        train_seed: u64,
        split: usize,
        #[source]
        source: Box<ExperimentError>,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Where the evaluation data comes from: a generated task (train a model,
/// optionally attack) or an externally produced probability file (CP
/// stack only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Synthetic {
        num_classes: usize,
        dim: usize,
        per_class: usize,
        spread: f64,
        seed: u64,
    },
    LogitsFile(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// Fraction of the pool used for calibration; the test fraction
    /// follows it and the remainder trains.
    pub cal_fraction: f64,
    pub test_fraction: f64,
    pub alpha: f64,
    pub train: TrainConfig,
    pub eval_attack: Option<AttackConfig>,
    pub train_seeds: usize,
    pub split_repeats: usize,
    /// Beta parameters for the bound report; the paper default applies
    /// when absent.
    pub beta: Option<BetaParams>,
    pub emit_curve: bool,
    pub emit_bound: bool,
    pub master_seed: u64,
    /// Base path for emission; `<base>.json` and `<base>.csv` are
    /// written when set.
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if !(self.cal_fraction > 0.0)
            || !(self.test_fraction > 0.0)
            || self.cal_fraction + self.test_fraction > 1.0
        {
            return Err(ExperimentError::Config(
                "split fractions must be positive and sum to at most 1".into(),
            ));
        }
        if self.alpha <= 0.0 || self.alpha >= 1.0 {
            return Err(ExperimentError::Config("alpha must be in (0, 1)".into()));
        }
        if self.train_seeds < 1 || self.split_repeats < 1 {
            return Err(ExperimentError::Config("trial counts must be >= 1".into()));
        }
        Ok(())
    }
}

/// One (train seed, split repeat) outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub method: String,
    pub seed: u64,
    pub split: usize,
    pub coverage: f64,
    pub pss: f64,
    pub npss: f64,
    pub clean_acc: f64,
    pub rob_acc: f64,
}

/// Mean and sample standard deviation per metric over all records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub coverage_mean: f64,
    pub coverage_std: f64,
    pub pss_mean: f64,
    pub pss_std: f64,
    pub npss_mean: f64,
    pub npss_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub method: String,
    pub alpha: f64,
    pub records: Vec<TrialRecord>,
    pub aggregate: Aggregate,
    pub curve: Option<CpCurve>,
    pub bound: Option<BoundReport>,
}

pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn aggregate(records: &[TrialRecord]) -> Aggregate {
    let pick = |f: fn(&TrialRecord) -> f64| records.iter().map(f).collect::<Vec<_>>();
    let (coverage_mean, coverage_std) = mean_and_std(&pick(|r| r.coverage));
    let (pss_mean, pss_std) = mean_and_std(&pick(|r| r.pss));
    let (npss_mean, npss_std) = mean_and_std(&pick(|r| r.npss));
    Aggregate {
        coverage_mean,
        coverage_std,
        pss_mean,
        pss_std,
        npss_mean,
        npss_std,
    }
}

// Sub-stream labels off the master seed.
const STREAM_POOL: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_ATTACK: u64 = 3;
const STREAM_SPLIT: u64 = 4;
const STREAM_CAL: u64 = 5;
const STREAM_TEST: u64 = 6;
const STREAM_CURVE: u64 = 7;

/// Runs the full protocol and returns one record per
/// (train seed, split repeat) pair, plus optional curve and bound report
/// from the first trial.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult, ExperimentError> {
    cfg.validate()?;
    match &cfg.data {
        DataSource::Synthetic {
            num_classes,
            dim,
            per_class,
            spread,
            seed,
        } => {
            let pool = data::gen_synthetic(*num_classes, *dim, *per_class, *spread, *seed)?;
            run_trained(cfg, &pool)
        }
        DataSource::LogitsFile(path) => {
            let (dists, labels) = data::load_logits_csv(path)?;
            run_external(cfg, dists, labels)
        }
    }
}

fn run_trained(
    cfg: &ExperimentConfig,
    pool: &LabeledSet,
) -> Result<ExperimentResult, ExperimentError> {
    let n = pool.len();
    let n_cal = ((cfg.cal_fraction * n as f64).round() as usize).max(1);
    let n_test = ((cfg.test_fraction * n as f64).round() as usize).max(1);
    let n_eval = n_cal + n_test;
    if n_eval >= n {
        return Err(ExperimentError::Config(
            "no samples left for training after the cal/test split".into(),
        ));
    }

    // The training portion is fixed across every trial; only the
    // calibration/test split and the seeds move.
    let mut indices: Vec<usize> = (0..n).collect();
    let mut pool_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.master_seed, STREAM_POOL));
    indices.shuffle(&mut pool_rng);
    let train_set = pool.subset(&indices[..n - n_eval]);
    let eval_set = pool.subset(&indices[n - n_eval..]);

    let method = cfg.train.loss.kind.name().to_string();
    let mut records = Vec::with_capacity(cfg.train_seeds * cfg.split_repeats);
    let mut curve = None;
    let mut bound = None;

    for t in 0..cfg.train_seeds {
        let train_seed = mix_seed(cfg.master_seed, STREAM_TRAIN + 100 * t as u64);
        let mut train_cfg = cfg.train.clone();
        train_cfg.seed = train_seed;
        let classifier = model::train(&train_set, &train_cfg)?;

        let clean_acc = classifier.accuracy(&eval_set)?;
        let (eval_features, rob_acc) = match &cfg.eval_attack {
            Some(atk) => {
                let attacked = model::attack_batch(
                    &classifier,
                    &eval_set.features,
                    &eval_set.labels,
                    atk,
                    mix_seed(cfg.master_seed, STREAM_ATTACK + 100 * t as u64),
                )?;
                let attacked_set =
                    LabeledSet::new(attacked.clone(), eval_set.labels.clone(), eval_set.num_classes)?;
                let acc = classifier.accuracy(&attacked_set)?;
                (attacked, acc)
            }
            None => (eval_set.features.clone(), clean_acc),
        };
        let eval_logits = classifier.forward_batch(&eval_features)?;

        for r in 0..cfg.split_repeats {
            let trial = run_split_trial(
                cfg,
                &eval_logits,
                &eval_set.labels,
                pool.num_classes,
                t,
                r,
                train_seed,
            )
            .map_err(|e| ExperimentError::Trial {
                train_seed,
                split: r,
                source: Box::new(e),
            })?;
            records.push(TrialRecord {
                method: method.clone(),
                clean_acc,
                rob_acc,
                ..trial.record
            });
            if t == 0 && r == 0 {
                curve = trial.curve;
                bound = trial.bound;
            }
        }
    }

    let result = ExperimentResult {
        method,
        alpha: cfg.alpha,
        aggregate: aggregate(&records),
        records,
        curve,
        bound,
    };
    if let Some(base) = &cfg.output {
        write_outputs(base, &result)?;
    }
    Ok(result)
}

fn run_external(
    cfg: &ExperimentConfig,
    dists: Vec<ProbDist>,
    labels: Vec<usize>,
) -> Result<ExperimentResult, ExperimentError> {
    let n = dists.len();
    if n == 0 {
        return Err(ExperimentError::Config("empty logits file".into()));
    }
    let k = dists[0].num_classes();
    let n_cal = ((cfg.cal_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let n_test = ((cfg.test_fraction * n as f64).round() as usize).clamp(1, n - n_cal);

    // Top-1 accuracy of the supplied predictions; there is no model to
    // attack, so the robust column repeats it.
    let correct = dists
        .iter()
        .zip(&labels)
        .filter(|(d, &y)| d.order()[0] == y)
        .count();
    let acc = correct as f64 / n as f64;

    let mut records = Vec::with_capacity(cfg.split_repeats);
    let mut curve = None;
    let mut bound = None;
    for r in 0..cfg.split_repeats {
        let trial = split_and_score(
            cfg,
            SplitInput::Dists(&dists),
            &labels,
            k,
            n_cal,
            n_test,
            0,
            r,
        )
        .map_err(|e| ExperimentError::Trial {
            train_seed: 0,
            split: r,
            source: Box::new(e),
        })?;
        records.push(TrialRecord {
            method: "external".into(),
            seed: 0,
            split: r,
            clean_acc: acc,
            rob_acc: acc,
            ..trial.record
        });
        if r == 0 {
            curve = trial.curve;
            bound = trial.bound;
        }
    }

    let result = ExperimentResult {
        method: "external".into(),
        alpha: cfg.alpha,
        aggregate: aggregate(&records),
        records,
        curve,
        bound,
    };
    if let Some(base) = &cfg.output {
        write_outputs(base, &result)?;
    }
    Ok(result)
}

struct TrialOutput {
    record: TrialRecord,
    curve: Option<CpCurve>,
    bound: Option<BoundReport>,
}

enum SplitInput<'a> {
    Logits(&'a Array2<f64>),
    Dists(&'a [ProbDist]),
}

fn run_split_trial(
    cfg: &ExperimentConfig,
    eval_logits: &Array2<f64>,
    labels: &[usize],
    k: usize,
    t: usize,
    r: usize,
    train_seed: u64,
) -> Result<TrialOutput, ExperimentError> {
    let n = labels.len();
    let n_cal = ((cfg.cal_fraction / (cfg.cal_fraction + cfg.test_fraction)) * n as f64).round()
        as usize;
    let n_cal = n_cal.clamp(1, n - 1);
    let n_test = n - n_cal;
    let mut out = split_and_score(
        cfg,
        SplitInput::Logits(eval_logits),
        labels,
        k,
        n_cal,
        n_test,
        t,
        r,
    )?;
    out.record.seed = train_seed;
    Ok(out)
}

fn split_and_score(
    cfg: &ExperimentConfig,
    input: SplitInput,
    labels: &[usize],
    k: usize,
    n_cal: usize,
    n_test: usize,
    t: usize,
    r: usize,
) -> Result<TrialOutput, ExperimentError> {
    let n = labels.len();
    let trial_tag = (t * cfg.split_repeats + r) as u64;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(mix_seed(cfg.master_seed, STREAM_SPLIT + 100 * trial_tag));
    perm.shuffle(&mut rng);
    let cal_idx = &perm[..n_cal];
    let test_idx = &perm[n_cal..n_cal + n_test];

    let (cal_dists, test_dists) = match input {
        SplitInput::Logits(logits) => {
            // Temperature is fit on the calibration split only.
            let take = |idx: &[usize]| {
                let mut m = Array2::zeros((idx.len(), k));
                for (row, &i) in idx.iter().enumerate() {
                    m.row_mut(row).assign(&logits.row(i));
                }
                m
            };
            let cal_logits = take(cal_idx);
            let cal_labels: Vec<usize> = cal_idx.iter().map(|&i| labels[i]).collect();
            let temperature = aps::fit_temperature(&cal_logits, &cal_labels)?;
            (
                temperature.apply_matrix(&cal_logits),
                temperature.apply_matrix(&take(test_idx)),
            )
        }
        SplitInput::Dists(dists) => {
            let _ = Temperature::identity();
            (
                cal_idx.iter().map(|&i| dists[i].clone()).collect(),
                test_idx.iter().map(|&i| dists[i].clone()).collect(),
            )
        }
    };
    let cal_labels: Vec<usize> = cal_idx.iter().map(|&i| labels[i]).collect();
    let test_labels: Vec<usize> = test_idx.iter().map(|&i| labels[i]).collect();

    let cal = conformal::calibrate(
        &cal_dists,
        &cal_labels,
        cfg.alpha,
        mix_seed(cfg.master_seed, STREAM_CAL + 100 * trial_tag),
    )?;
    let sets = conformal::predict_sets(
        &test_dists,
        &cal,
        mix_seed(cfg.master_seed, STREAM_TEST + 100 * trial_tag),
    )?;
    let metrics = conformal::evaluate(&sets, &test_labels, k)?;

    let curve = if cfg.emit_curve {
        Some(conformal::cp_curve_default(
            &test_dists,
            &test_labels,
            &cal,
            mix_seed(cfg.master_seed, STREAM_CURVE + 100 * trial_tag),
        )?)
    } else {
        None
    };
    let bound = if cfg.emit_bound {
        let beta = cfg.beta.unwrap_or_else(BetaParams::default_shifted);
        let losses = theory::ce_losses(&test_dists, &test_labels)?;
        Some(theory::check_bound(
            &test_dists,
            &test_labels,
            &losses,
            &cal,
            &beta,
        )?)
    } else {
        None
    };

    Ok(TrialOutput {
        record: TrialRecord {
            method: String::new(),
            seed: 0,
            split: r,
            coverage: metrics.coverage,
            pss: metrics.pss,
            npss: metrics.npss,
            clean_acc: 0.0,
            rob_acc: 0.0,
        },
        curve,
        bound,
    })
}

/// One row of a paired-method comparison, matched on the train seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRow {
    pub seed: u64,
    pub pss_a: f64,
    pub pss_b: f64,
    pub coverage_a: f64,
    pub coverage_b: f64,
}

/// Paired comparison of two losses on identical data and seeds. `wins_b`
/// counts seeds where method B's mean PSS does not exceed method A's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedReport {
    pub method_a: String,
    pub method_b: String,
    pub rows: Vec<PairedRow>,
    pub mean_pss_a: f64,
    pub mean_pss_b: f64,
    pub wins_b: usize,
}

/// Runs the experiment twice, identical in everything but the training
/// loss, and pairs per-seed mean PSS. The table is always produced; no
/// direction is asserted here.
pub fn run_paired(
    cfg: &ExperimentConfig,
    loss_b: LossSpec,
) -> Result<PairedReport, ExperimentError> {
    let result_a = run_experiment(cfg)?;
    let mut cfg_b = cfg.clone();
    cfg_b.train.loss = loss_b;
    if let Some(base) = &cfg_b.output {
        let mut name = base.file_name().unwrap_or_default().to_os_string();
        name.push("-paired");
        cfg_b.output = Some(base.with_file_name(name));
    }
    let result_b = run_experiment(&cfg_b)?;

    let per_seed = |result: &ExperimentResult| -> Vec<(u64, f64, f64)> {
        let mut seeds: Vec<u64> = result.records.iter().map(|r| r.seed).collect();
        seeds.dedup();
        seeds
            .into_iter()
            .map(|s| {
                let rows: Vec<&TrialRecord> =
                    result.records.iter().filter(|r| r.seed == s).collect();
                let pss = rows.iter().map(|r| r.pss).sum::<f64>() / rows.len() as f64;
                let cov = rows.iter().map(|r| r.coverage).sum::<f64>() / rows.len() as f64;
                (s, pss, cov)
            })
            .collect()
    };
    let a = per_seed(&result_a);
    let b = per_seed(&result_b);
    let rows: Vec<PairedRow> = a
        .iter()
        .zip(&b)
        .map(|(&(seed, pss_a, coverage_a), &(_, pss_b, coverage_b))| PairedRow {
            seed,
            pss_a,
            pss_b,
            coverage_a,
            coverage_b,
        })
        .collect();
    let mean_pss_a = rows.iter().map(|r| r.pss_a).sum::<f64>() / rows.len() as f64;
    let mean_pss_b = rows.iter().map(|r| r.pss_b).sum::<f64>() / rows.len() as f64;
    let wins_b = rows.iter().filter(|r| r.pss_b <= r.pss_a).count();
    Ok(PairedReport {
        method_a: result_a.method,
        method_b: result_b.method,
        rows,
        mean_pss_a,
        mean_pss_b,
        wins_b,
    })
}

/// Writes `<base>.json` (full records plus curve/bound) and `<base>.csv`
/// (fixed column order), both atomically.
pub fn write_outputs(base: &Path, result: &ExperimentResult) -> Result<(), ExperimentError> {
    if let Some(parent) = base.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let json_path = base.with_extension("json");
    write_atomic(&json_path, serde_json::to_string_pretty(result).unwrap().as_bytes())?;

    let csv_path = base.with_extension("csv");
    let mut text = String::from("method,seed,split,coverage,pss,npss,clean_acc,rob_acc\n");
    for r in &result.records {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.method, r.seed, r.split, r.coverage, r.pss, r.npss, r.clean_acc, r.rob_acc
        ));
    }
    write_atomic(&csv_path, text.as_bytes())?;
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ExperimentError> {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    let tmp = path.with_file_name(name);
    {
        let mut out = BufWriter::new(File::create(&tmp)?);
        out.write_all(bytes)?;
        out.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Arch;

    fn quick_config() -> ExperimentConfig {
        let mut train = TrainConfig::new(Arch::Linear, LossSpec::ce());
        train.epochs = 3;
        train.batch = 32;
        train.lr = 0.3;
        ExperimentConfig {
            data: DataSource::Synthetic {
                num_classes: 4,
                dim: 6,
                per_class: 100,
                spread: 1.0,
                seed: 5,
            },
            cal_fraction: 0.1,
            test_fraction: 0.4,
            alpha: 0.1,
            train,
            eval_attack: None,
            train_seeds: 2,
            split_repeats: 3,
            beta: None,
            emit_curve: false,
            emit_bound: false,
            master_seed: 7,
            output: None,
        }
    }

    #[test]
    fn record_count_matches_trial_grid() {
        let result = run_experiment(&quick_config()).unwrap();
        assert_eq!(result.records.len(), 6);
        // Two distinct train seeds, three splits each.
        let mut seeds: Vec<u64> = result.records.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 2);
    }

    #[test]
    fn aggregate_recomputable_from_records() {
        let result = run_experiment(&quick_config()).unwrap();
        let coverages: Vec<f64> = result.records.iter().map(|r| r.coverage).collect();
        let (mean, std) = mean_and_std(&coverages);
        assert!((result.aggregate.coverage_mean - mean).abs() < 1e-12);
        assert!((result.aggregate.coverage_std - std).abs() < 1e-12);
    }

    #[test]
    fn deterministic_given_master_seed() {
        let a = run_experiment(&quick_config()).unwrap();
        let b = run_experiment(&quick_config()).unwrap();
        assert_eq!(a, b);
        let mut other = quick_config();
        other.master_seed = 8;
        let c = run_experiment(&other).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn emits_json_and_csv() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick_config();
        cfg.train_seeds = 1;
        cfg.split_repeats = 2;
        cfg.emit_curve = true;
        cfg.emit_bound = true;
        cfg.output = Some(dir.path().join("run"));
        let result = run_experiment(&cfg).unwrap();
        assert!(result.curve.is_some());
        assert!(result.bound.is_some());

        let json = std::fs::read_to_string(dir.path().join("run.json")).unwrap();
        let parsed: ExperimentResult = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed, result);

        let csv = std::fs::read_to_string(dir.path().join("run.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "method,seed,split,coverage,pss,npss,clean_acc,rob_acc"
        );
        assert_eq!(lines.count(), result.records.len());
    }

    #[test]
    fn rejects_bad_fractions() {
        let mut cfg = quick_config();
        cfg.cal_fraction = 0.8;
        cfg.test_fraction = 0.3;
        assert!(matches!(
            run_experiment(&cfg),
            Err(ExperimentError::Config(_))
        ));
    }

    #[test]
    fn external_source_runs_cp_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probs.csv");
        let mut dists = Vec::new();
        let mut labels = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let raw: Vec<f64> = (0..3).map(|_| rng.random::<f64>() + 0.01).collect();
            dists.push(ProbDist::from_raw(&raw).unwrap());
            labels.push(rng.random_range(0..3));
        }
        data::emit_logits_csv(&path, &dists, &labels).unwrap();

        let mut cfg = quick_config();
        cfg.data = DataSource::LogitsFile(path);
        cfg.split_repeats = 2;
        let result = run_experiment(&cfg).unwrap();
        assert_eq!(result.method, "external");
        assert_eq!(result.records.len(), 2);
    }

    #[test]
    fn paired_runs_share_seeds_and_emit_rows() {
        let mut cfg = quick_config();
        cfg.train_seeds = 2;
        cfg.split_repeats = 2;
        let report = run_paired(&cfg, LossSpec::em_ce(0.3)).unwrap();
        assert_eq!(report.method_a, "ce");
        assert_eq!(report.method_b, "em-ce");
        assert_eq!(report.rows.len(), 2);
        assert!(report.wins_b <= 2);
    }
}
