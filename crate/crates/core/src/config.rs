//! Flat `key = value` configuration files and the builders turning them
//! into experiment, training, and attack configs. Unknown keys are
//! rejected so typos fail loudly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::experiment::{DataSource, ExperimentConfig};
use crate::model::{Arch, AttackConfig, AttackObjective, TrainConfig};
use crate::weighting::{BetaParams, LossKind, LossSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config line {line}: expected 'key = value'")]
    Syntax { line: usize },
    #[error("missing required key '{0}'")]
    Missing(String),
    #[error("key '{key}': {message}")]
    Invalid { key: String, message: String },
    #[error("unknown key '{0}'")]
    UnknownKey(String),
}

/// Parsed flat config: ordered key/value text with `#` comments.
#[derive(Debug, Clone, Default)]
pub struct FlatConfig {
    values: BTreeMap<String, String>,
}

impl FlatConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut values = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: idx + 1 })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::Syntax { line: idx + 1 });
            }
            values.insert(key.to_string(), value.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Sets or overrides one key, as the CLI does for its flags.
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.values.insert(key.to_string(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    fn parse_with<T, F>(&self, key: &str, default: T, f: F) -> Result<T, ConfigError>
    where
        F: Fn(&str) -> Option<T>,
    {
        match self.get(key) {
            None => Ok(default),
            Some(raw) => f(raw).ok_or_else(|| ConfigError::Invalid {
                key: key.to_string(),
                message: format!("cannot parse '{raw}'"),
            }),
        }
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        self.parse_with(key, default, |s| s.parse().ok())
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64, ConfigError> {
        self.parse_with(key, default, |s| s.parse().ok())
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        self.parse_with(key, default, |s| s.parse().ok())
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool, ConfigError> {
        self.parse_with(key, default, |s| match s {
            "true" | "1" | "yes" | "on" => Some(true),
            "false" | "0" | "no" | "off" => Some(false),
            _ => None,
        })
    }
}

const KNOWN_KEYS: &[&str] = &[
    "alpha",
    "arch",
    "arch.hidden",
    "beta.a",
    "beta.b",
    "beta.shifted",
    "cal_fraction",
    "data",
    "data.classes",
    "data.dim",
    "data.path",
    "data.per_class",
    "data.seed",
    "data.spread",
    "emit.bound",
    "emit.curve",
    "eval.attack",
    "eval.attack.eps",
    "eval.attack.objective",
    "eval.attack.random_start",
    "eval.attack.steps",
    "eval.attack.stepsize",
    "lambda_em",
    "loss",
    "loss.class_weights",
    "output",
    "seed",
    "test_fraction",
    "trades_beta",
    "train.attack",
    "train.attack.eps",
    "train.attack.objective",
    "train.attack.random_start",
    "train.attack.steps",
    "train.attack.stepsize",
    "train.batch",
    "train.epochs",
    "train.lr",
    "train.lr_drops",
    "train.weight_decay",
    "trials.split_repeats",
    "trials.train_seeds",
];

fn check_known(flat: &FlatConfig) -> Result<(), ConfigError> {
    for key in flat.keys() {
        if !KNOWN_KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
    }
    Ok(())
}

pub fn beta_params(flat: &FlatConfig) -> Result<BetaParams, ConfigError> {
    let a = flat.get_f64("beta.a", 1.1)?;
    let b = flat.get_f64("beta.b", 5.0)?;
    let shifted = flat.get_bool("beta.shifted", true)?;
    BetaParams::new(a, b, shifted).map_err(|e| ConfigError::Invalid {
        key: "beta.a".into(),
        message: e.to_string(),
    })
}

pub fn loss_spec(flat: &FlatConfig) -> Result<LossSpec, ConfigError> {
    let kind = match flat.get("loss").unwrap_or("ce") {
        "ce" => LossKind::Ce,
        "beta-ce" => LossKind::BetaCe,
        "em-ce" => LossKind::EmCe,
        "beta-em-ce" => LossKind::BetaEmCe,
        "fat-ce" => LossKind::FatCe,
        "trades-kl" => LossKind::TradesKl,
        "beta-trades-kl" => LossKind::BetaTradesKl,
        other => {
            return Err(ConfigError::Invalid {
                key: "loss".into(),
                message: format!("unknown loss '{other}'"),
            })
        }
    };
    let beta = beta_params(flat)?;
    let lambda_em = flat.get_f64("lambda_em", 0.3)?;
    let trades_beta = flat.get_f64("trades_beta", 6.0)?;
    let spec = match kind {
        LossKind::Ce => LossSpec::ce(),
        LossKind::BetaCe => LossSpec::beta_ce(beta),
        LossKind::EmCe => LossSpec::em_ce(lambda_em),
        LossKind::BetaEmCe => LossSpec::beta_em_ce(beta, lambda_em),
        LossKind::FatCe => {
            let raw = flat
                .get("loss.class_weights")
                .ok_or_else(|| ConfigError::Missing("loss.class_weights".into()))?;
            let weights: Option<Vec<f64>> =
                raw.split(',').map(|s| s.trim().parse().ok()).collect();
            LossSpec::fat_ce(weights.ok_or_else(|| ConfigError::Invalid {
                key: "loss.class_weights".into(),
                message: "expected comma-separated reals".into(),
            })?)
        }
        LossKind::TradesKl => LossSpec::trades_kl(trades_beta),
        LossKind::BetaTradesKl => LossSpec::beta_trades_kl(beta, trades_beta),
    };
    Ok(spec)
}

pub fn arch(flat: &FlatConfig) -> Result<Arch, ConfigError> {
    match flat.get("arch").unwrap_or("linear") {
        "linear" => Ok(Arch::Linear),
        "mlp" => Ok(Arch::Mlp {
            hidden: flat.get_usize("arch.hidden", 32)?,
        }),
        other => Err(ConfigError::Invalid {
            key: "arch".into(),
            message: format!("unknown arch '{other}'"),
        }),
    }
}

fn attack_config(flat: &FlatConfig, prefix: &str) -> Result<Option<AttackConfig>, ConfigError> {
    let switch = flat.get(&format!("{prefix}.attack")).unwrap_or("none");
    match switch {
        "none" => Ok(None),
        "pgd" => {
            let objective = match flat
                .get(&format!("{prefix}.attack.objective"))
                .unwrap_or("top1")
            {
                "top1" => AttackObjective::Top1Loss,
                "entropy" => AttackObjective::Entropy,
                other => {
                    return Err(ConfigError::Invalid {
                        key: format!("{prefix}.attack.objective"),
                        message: format!("unknown objective '{other}'"),
                    })
                }
            };
            // Training defaults to PGD10, evaluation to PGD100.
            let default_steps = if prefix == "train" { 10 } else { 100 };
            Ok(Some(AttackConfig {
                objective,
                epsilon: flat.get_f64(&format!("{prefix}.attack.eps"), 8.0 / 255.0)?,
                steps: flat.get_usize(&format!("{prefix}.attack.steps"), default_steps)?,
                stepsize: flat.get_f64(&format!("{prefix}.attack.stepsize"), 2.0 / 255.0)?,
                random_start: flat.get_bool(&format!("{prefix}.attack.random_start"), true)?,
                clamp_box: None,
            }))
        }
        other => Err(ConfigError::Invalid {
            key: format!("{prefix}.attack"),
            message: format!("expected 'none' or 'pgd', found '{other}'"),
        }),
    }
}

pub fn train_config(flat: &FlatConfig) -> Result<TrainConfig, ConfigError> {
    let mut cfg = TrainConfig::new(arch(flat)?, loss_spec(flat)?);
    cfg.epochs = flat.get_usize("train.epochs", 30)?;
    cfg.batch = flat.get_usize("train.batch", 64)?;
    cfg.lr = flat.get_f64("train.lr", 0.1)?;
    cfg.weight_decay = flat.get_f64("train.weight_decay", 1e-4)?;
    cfg.seed = flat.get_u64("seed", 0)?;
    cfg.attack = attack_config(flat, "train")?;
    if let Some(raw) = flat.get("train.lr_drops") {
        // Format: "30:0.1,50:0.1".
        let mut drops = Vec::new();
        for part in raw.split(',') {
            let (epoch, factor) = part.split_once(':').ok_or_else(|| ConfigError::Invalid {
                key: "train.lr_drops".into(),
                message: "expected 'epoch:factor' pairs".into(),
            })?;
            let parsed = epoch
                .trim()
                .parse::<usize>()
                .ok()
                .zip(factor.trim().parse::<f64>().ok());
            drops.push(parsed.ok_or_else(|| ConfigError::Invalid {
                key: "train.lr_drops".into(),
                message: format!("cannot parse '{part}'"),
            })?);
        }
        cfg.lr_drops = drops;
    }
    Ok(cfg)
}

pub fn data_source(flat: &FlatConfig) -> Result<DataSource, ConfigError> {
    match flat.get("data").unwrap_or("synthetic") {
        "synthetic" => Ok(DataSource::Synthetic {
            num_classes: flat.get_usize("data.classes", 10)?,
            dim: flat.get_usize("data.dim", 20)?,
            per_class: flat.get_usize("data.per_class", 600)?,
            spread: flat.get_f64("data.spread", 1.0)?,
            seed: flat.get_u64("data.seed", 1)?,
        }),
        "logits" => {
            let path = flat
                .get("data.path")
                .ok_or_else(|| ConfigError::Missing("data.path".into()))?;
            Ok(DataSource::LogitsFile(PathBuf::from(path)))
        }
        other => Err(ConfigError::Invalid {
            key: "data".into(),
            message: format!("expected 'synthetic' or 'logits', found '{other}'"),
        }),
    }
}

/// Builds the full experiment config. Defaults follow the reference
/// protocol: alpha 0.1, 1:4 calibration-to-test split, 3 train seeds and
/// 5 split repeats.
pub fn experiment_config(flat: &FlatConfig) -> Result<ExperimentConfig, ConfigError> {
    check_known(flat)?;
    Ok(ExperimentConfig {
        data: data_source(flat)?,
        cal_fraction: flat.get_f64("cal_fraction", 0.1)?,
        test_fraction: flat.get_f64("test_fraction", 0.4)?,
        alpha: flat.get_f64("alpha", 0.1)?,
        train: train_config(flat)?,
        eval_attack: attack_config(flat, "eval")?,
        train_seeds: flat.get_usize("trials.train_seeds", 3)?,
        split_repeats: flat.get_usize("trials.split_repeats", 5)?,
        beta: Some(beta_params(flat)?),
        emit_curve: flat.get_bool("emit.curve", false)?,
        emit_bound: flat.get_bool("emit.bound", false)?,
        master_seed: flat.get_u64("seed", 0)?,
        output: flat.get("output").map(PathBuf::from),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flat_text() {
        let flat = FlatConfig::parse(
            "# comment\nalpha = 0.05\n\nloss = em-ce\nlambda_em = 0.3\n",
        )
        .unwrap();
        assert_eq!(flat.get("alpha"), Some("0.05"));
        assert_eq!(flat.get("loss"), Some("em-ce"));
        assert_eq!(flat.get_f64("alpha", 0.1).unwrap(), 0.05);
        assert_eq!(flat.get_f64("missing", 0.1).unwrap(), 0.1);
    }

    #[test]
    fn rejects_bad_syntax_with_line() {
        match FlatConfig::parse("alpha = 0.1\nnot a pair\n") {
            Err(ConfigError::Syntax { line }) => assert_eq!(line, 2),
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn builds_experiment_config_with_defaults() {
        let flat = FlatConfig::parse("").unwrap();
        let cfg = experiment_config(&flat).unwrap();
        assert_eq!(cfg.alpha, 0.1);
        assert_eq!(cfg.train_seeds, 3);
        assert_eq!(cfg.split_repeats, 5);
        assert_eq!(cfg.cal_fraction, 0.1);
        assert_eq!(cfg.test_fraction, 0.4);
        assert!(cfg.eval_attack.is_none());
    }

    #[test]
    fn builds_trades_with_attack() {
        let text = "\
loss = beta-trades-kl
beta.b = 4.0
train.attack = pgd
train.attack.steps = 10
eval.attack = pgd
eval.attack.objective = entropy
";
        let flat = FlatConfig::parse(text).unwrap();
        let cfg = experiment_config(&flat).unwrap();
        assert_eq!(cfg.train.loss.kind, LossKind::BetaTradesKl);
        assert_eq!(cfg.train.loss.beta.unwrap().b, 4.0);
        assert_eq!(cfg.train.attack.unwrap().steps, 10);
        let eval = cfg.eval_attack.unwrap();
        assert_eq!(eval.steps, 100);
        assert_eq!(eval.objective, AttackObjective::Entropy);
    }

    #[test]
    fn unknown_keys_fail() {
        let flat = FlatConfig::parse("alpa = 0.1\n").unwrap();
        assert!(matches!(
            experiment_config(&flat),
            Err(ConfigError::UnknownKey(_))
        ));
    }

    #[test]
    fn lr_drops_parse() {
        let flat = FlatConfig::parse("train.lr_drops = 30:0.1, 50:0.1\n").unwrap();
        let cfg = train_config(&flat).unwrap();
        assert_eq!(cfg.lr_drops, vec![(30, 0.1), (50, 0.1)]);
    }
}
