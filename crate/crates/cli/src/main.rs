//! Command-line front end: synthetic data generation, training, attack
//! evaluation, conformal calibration, threshold curves, bound checking,
//! and full experiment runs.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numeric
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cpur::config::{self, ConfigError, FlatConfig};
use cpur::conformal::{self, mix_seed};
use cpur::data::{self, DataError};
use cpur::experiment::{self, ExperimentError};
use cpur::model::{self, ModelError};
use cpur::simplex::{ProbDist, SimplexError};
use cpur::theory;
use cpur::weighting::WeightingError;
use cpur::{ApsError, ConformalError, TheoryError};

#[derive(Parser)]
#[command(name = "cpur", about = "Conformal prediction sets under adversarial training", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Master seed; overrides the config file's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic Gaussian classification dataset CSV.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output dataset path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a classifier and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Input dataset CSV (from gen-data).
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Attack a trained model on a dataset and emit predicted
    /// probabilities.
    AttackEval {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Dataset CSV to attack.
        #[arg(long)]
        data: PathBuf,
        /// Output probabilities CSV (p0,...,label rows).
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a probabilities file, calibrate, and report coverage/PSS.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Probabilities CSV (p0,...,label rows).
        #[arg(long)]
        logits: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        /// Calibration share of the file; the rest is test.
        #[arg(long, default_value_t = 0.2)]
        cal_fraction: f64,
        /// Optional JSON output with scores, threshold, and metrics.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit a threshold-sweep (scale, coverage, pss) CSV.
    Curve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        logits: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long, default_value_t = 0.2)]
        cal_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate every quantity of the set-size bound and write the
    /// report JSON.
    TheoryCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        logits: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long, default_value_t = 0.2)]
        cal_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full train/attack/calibrate/evaluate protocol.
    Experiment {
        #[command(flatten)]
        common: Common,
        /// Output base path; overrides the config file's `output`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(_) => CliError::Data(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Config(e.to_string()),
            ModelError::Io(_) | ModelError::BadCheckpoint(_) => CliError::Data(e.to_string()),
            ModelError::DimMismatch { .. } => CliError::Data(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<ConformalError> for CliError {
    fn from(e: ConformalError) -> Self {
        match e {
            ConformalError::AlphaOutOfRange(_) | ConformalError::BadGrid => {
                CliError::Config(e.to_string())
            }
            ConformalError::LengthMismatch => CliError::Data(e.to_string()),
            ConformalError::Aps(inner) => inner.into(),
        }
    }
}

impl From<ApsError> for CliError {
    fn from(e: ApsError) -> Self {
        match e {
            ApsError::TauOutOfRange(_) => CliError::Config(e.to_string()),
            ApsError::LengthMismatch => CliError::Data(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<SimplexError> for CliError {
    fn from(e: SimplexError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<WeightingError> for CliError {
    fn from(e: WeightingError) -> Self {
        match e {
            WeightingError::ShapeMismatch => CliError::Data(e.to_string()),
            WeightingError::MissingBetaParams
            | WeightingError::MissingClassWeights
            | WeightingError::MissingCleanLogits
            | WeightingError::BadBetaParams => CliError::Config(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<TheoryError> for CliError {
    fn from(e: TheoryError) -> Self {
        match e {
            TheoryError::LengthMismatch => CliError::Data(e.to_string()),
            TheoryError::TauOutOfRange(_) => CliError::Config(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(_) => CliError::Config(e.to_string()),
            ExperimentError::Data(inner) => inner.into(),
            ExperimentError::Model(inner) => inner.into(),
            ExperimentError::Conformal(inner) => inner.into(),
            ExperimentError::Aps(inner) => inner.into(),
            ExperimentError::Theory(inner) => inner.into(),
            ExperimentError::Weighting(inner) => inner.into(),
            ExperimentError::Io(_) => CliError::Data(e.to_string()),
            ExperimentError::Trial { .. } => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

fn load_flat(common: &Common) -> Result<FlatConfig, CliError> {
    let mut flat = match &common.config {
        Some(path) => FlatConfig::from_file(path)?,
        None => FlatConfig::default(),
    };
    if let Some(seed) = common.seed {
        flat.set("seed", seed.to_string());
    }
    Ok(flat)
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData { common, out } => {
            let flat = load_flat(&common)?;
            let source = config::data_source(&flat)?;
            let seed_override = flat.get_u64("seed", 0)?;
            let set = match source {
                experiment::DataSource::Synthetic {
                    num_classes,
                    dim,
                    per_class,
                    spread,
                    seed,
                } => {
                    let seed = if common.seed.is_some() { seed_override } else { seed };
                    data::gen_synthetic(num_classes, dim, per_class, spread, seed)?
                }
                experiment::DataSource::LogitsFile(_) => {
                    return Err(CliError::Config(
                        "gen-data needs data = synthetic".into(),
                    ))
                }
            };
            data::save_dataset_csv(&out, &set)?;
            println!(
                "wrote {} samples ({} classes, dim {}) to {}",
                set.len(),
                set.num_classes,
                set.dim(),
                out.display()
            );
            Ok(())
        }
        Command::Train { common, data: data_path, out } => {
            let flat = load_flat(&common)?;
            let set = data::load_dataset_csv(&data_path)?;
            let mut cfg = config::train_config(&flat)?;
            cfg.seed = flat.get_u64("seed", cfg.seed)?;
            let classifier = model::train(&set, &cfg)?;
            model::save_checkpoint(&classifier, &out)?;
            let acc = classifier.accuracy(&set)?;
            println!(
                "trained {} on {} samples; train accuracy {:.4}; checkpoint {}",
                cfg.loss.kind.name(),
                set.len(),
                acc,
                out.display()
            );
            Ok(())
        }
        Command::AttackEval { common, model: model_path, data: data_path, out } => {
            let flat = load_flat(&common)?;
            let classifier = model::load_checkpoint(&model_path)?;
            let set = data::load_dataset_csv(&data_path)?;
            let seed = flat.get_u64("seed", 0)?;

            let attack = config::experiment_config(&flat)?
                .eval_attack
                .unwrap_or_else(model::AttackConfig::pgd100);
            let clean_acc = classifier.accuracy(&set)?;
            let attacked = model::attack_batch(
                &classifier,
                &set.features,
                &set.labels,
                &attack,
                mix_seed(seed, 0xA77C),
            )?;
            let attacked_set =
                data::LabeledSet::new(attacked.clone(), set.labels.clone(), set.num_classes)?;
            let rob_acc = classifier.accuracy(&attacked_set)?;
            let dists = classifier.predict_dists(&attacked)?;
            data::emit_logits_csv(&out, &dists, &set.labels)?;
            println!(
                "clean accuracy {clean_acc:.4}, robust accuracy {rob_acc:.4}; adversarial probabilities in {}",
                out.display()
            );
            Ok(())
        }
        Command::Calibrate { common, logits, alpha, cal_fraction, out } => {
            let flat = load_flat(&common)?;
            let seed = flat.get_u64("seed", 0)?;
            let (cal_part, test_part) = split_file(&logits, cal_fraction, seed)?;
            let cal = conformal::calibrate(&cal_part.0, &cal_part.1, alpha, mix_seed(seed, 1))?;
            let sets = conformal::predict_sets(&test_part.0, &cal, mix_seed(seed, 2))?;
            let k = test_part.0[0].num_classes();
            let metrics = conformal::evaluate(&sets, &test_part.1, k)?;
            println!(
                "n_cal {} n_test {} tau_hat {:.6} coverage {:.4} pss {:.4} npss {:.4}",
                cal_part.1.len(),
                test_part.1.len(),
                cal.tau_hat,
                metrics.coverage,
                metrics.pss,
                metrics.npss
            );
            if let Some(path) = out {
                let payload = serde_json::json!({
                    "alpha": alpha,
                    "tau_hat": cal.tau_hat,
                    "n_cal": cal_part.1.len(),
                    "n_test": test_part.1.len(),
                    "coverage": metrics.coverage,
                    "pss": metrics.pss,
                    "npss": metrics.npss,
                    "scores": cal.scores,
                });
                write_text(&path, &serde_json::to_string_pretty(&payload).unwrap())?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Curve { common, logits, alpha, cal_fraction, out } => {
            let flat = load_flat(&common)?;
            let seed = flat.get_u64("seed", 0)?;
            let (cal_part, test_part) = split_file(&logits, cal_fraction, seed)?;
            let cal = conformal::calibrate(&cal_part.0, &cal_part.1, alpha, mix_seed(seed, 1))?;
            let curve =
                conformal::cp_curve_default(&test_part.0, &test_part.1, &cal, mix_seed(seed, 3))?;
            let mut text = String::from("scale,coverage,pss\n");
            for p in &curve.points {
                text.push_str(&format!("{},{},{}\n", p.scale, p.coverage, p.pss));
            }
            write_text(&out, &text)?;
            println!(
                "wrote {}-point curve (tau_hat {:.6}) to {}",
                curve.points.len(),
                cal.tau_hat,
                out.display()
            );
            Ok(())
        }
        Command::TheoryCheck { common, logits, alpha, cal_fraction, out } => {
            let flat = load_flat(&common)?;
            let seed = flat.get_u64("seed", 0)?;
            let beta = config::beta_params(&flat)?;
            let (cal_part, test_part) = split_file(&logits, cal_fraction, seed)?;
            let cal = conformal::calibrate(&cal_part.0, &cal_part.1, alpha, mix_seed(seed, 1))?;
            let losses = theory::ce_losses(&test_part.0, &test_part.1)?;
            let report = theory::check_bound(&test_part.0, &test_part.1, &losses, &cal, &beta)?;
            write_text(&out, &serde_json::to_string_pretty(&report).unwrap())?;
            println!(
                "K* {} gamma {:.4} xi {:.4} expected_pss {:.4} L_beta {:.4} monotone_H {} assumptions {} bound {:?}",
                report.k_star,
                report.gamma,
                report.xi,
                report.expected_pss,
                report.l_beta,
                report.monotone_h,
                report.assumptions_hold,
                report.bound_holds
            );
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Experiment { common, out } => {
            let flat = load_flat(&common)?;
            let mut cfg = config::experiment_config(&flat)?;
            if let Some(base) = out {
                cfg.output = Some(base);
            }
            let result = experiment::run_experiment(&cfg)?;
            let agg = &result.aggregate;
            println!(
                "method {}: {} records; coverage {:.4} ({:.4}); pss {:.4} ({:.4}); npss {:.4} ({:.4})",
                result.method,
                result.records.len(),
                agg.coverage_mean,
                agg.coverage_std,
                agg.pss_mean,
                agg.pss_std,
                agg.npss_mean,
                agg.npss_std
            );
            if let Some(base) = &cfg.output {
                println!(
                    "wrote {} and {}",
                    base.with_extension("json").display(),
                    base.with_extension("csv").display()
                );
            }
            Ok(())
        }
    }
}

type Part = (Vec<ProbDist>, Vec<usize>);

/// Seeded shuffle split of a probabilities file into calibration and test
/// parts.
fn split_file(path: &Path, cal_fraction: f64, seed: u64) -> Result<(Part, Part), CliError> {
    if !(cal_fraction > 0.0 && cal_fraction < 1.0) {
        return Err(CliError::Config(
            "cal_fraction must be inside (0, 1)".into(),
        ));
    }
    let (dists, labels) = data::load_logits_csv(path)?;
    let n = dists.len();
    if n < 2 {
        return Err(CliError::Data("need at least two rows".into()));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    use rand::prelude::*;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5BD1));
    perm.shuffle(&mut rng);
    let n_cal = ((cal_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let take = |idx: &[usize]| -> Part {
        (
            idx.iter().map(|&i| dists[i].clone()).collect(),
            idx.iter().map(|&i| labels[i]).collect(),
        )
    };
    Ok((take(&perm[..n_cal]), take(&perm[n_cal..])))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    let tmp = path.with_file_name(name);
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
