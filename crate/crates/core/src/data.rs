//! Datasets: the feature/label container, a seeded synthetic Gaussian
//! generator, and CSV ingestion/emission of probability rows.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::simplex::{ProbDist, SimplexError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: label {label} out of range for {classes} classes")]
    LabelOutOfRange {
        line: usize,
        label: i64,
        classes: usize,
    },
    #[error("invalid data config: {0}")]
    Config(String),
    #[error(transparent)]
    Simplex(#[from] SimplexError),
}

/// Feature matrix with integer labels; the unit of train/calibration/test
/// data.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledSet {
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self, DataError> {
        if features.nrows() != labels.len() {
            return Err(DataError::Config(
                "feature rows and labels disagree".into(),
            ));
        }
        if labels.iter().any(|&y| y >= num_classes) {
            return Err(DataError::Config("label out of class range".into()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Config("non-finite feature".into()));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Row-subset in the given index order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let d = self.dim();
        let mut features = Array2::zeros((indices.len(), d));
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &idx) in indices.iter().enumerate() {
            features.row_mut(row).assign(&self.features.row(idx));
            labels.push(self.labels[idx]);
        }
        Self {
            features,
            labels,
            num_classes: self.num_classes,
        }
    }
}

/// Synthetic Gaussian classification task: class means spread on a sphere
/// of fixed radius, samples jittered by `spread` times a standard normal.
/// Deterministic per seed.
pub fn gen_synthetic(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledSet, DataError> {
    if num_classes < 2 || dim < 2 || per_class < 1 {
        return Err(DataError::Config(
            "need num_classes >= 2, dim >= 2, per_class >= 1".into(),
        ));
    }
    if !(spread > 0.0) || !spread.is_finite() {
        return Err(DataError::Config("spread must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    const MEAN_RADIUS: f64 = 2.0;

    let mut means = Array2::zeros((num_classes, dim));
    for c in 0..num_classes {
        let raw: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for (j, v) in raw.iter().enumerate() {
            means[[c, j]] = MEAN_RADIUS * v / norm;
        }
    }

    let n = num_classes * per_class;
    let mut features = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % num_classes;
        for j in 0..dim {
            let noise: f64 = rng.sample(StandardNormal);
            features[[i, j]] = means[[y, j]] + spread * noise;
        }
        labels.push(y);
    }
    LabeledSet::new(features, labels, num_classes)
}

/// Reads probability rows from a CSV with header `p0,...,p{K-1},label`.
/// Each row is renormalized onto the simplex; negative entries and bad
/// labels are rejected with the offending line number.
pub fn load_logits_csv(path: &Path) -> Result<(Vec<ProbDist>, Vec<usize>), DataError> {
    let file = File::open(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(BufReader::new(file));

    let headers = reader.headers().map_err(|e| DataError::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    let k = headers.len().saturating_sub(1);
    if k < 2 || headers.iter().last() != Some("label") {
        return Err(DataError::Parse {
            line: 1,
            message: "expected header p0,...,p{K-1},label".into(),
        });
    }
    for (j, h) in headers.iter().take(k).enumerate() {
        if h != format!("p{j}") {
            return Err(DataError::Parse {
                line: 1,
                message: format!("expected column p{j}, found {h}"),
            });
        }
    }

    let mut dists = Vec::new();
    let mut labels = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2; // header is line 1
        let record = record.map_err(|e| DataError::Parse {
            line,
            message: e.to_string(),
        })?;
        if record.len() != k + 1 {
            return Err(DataError::Parse {
                line,
                message: format!("expected {} fields, found {}", k + 1, record.len()),
            });
        }
        let mut raw = Vec::with_capacity(k);
        for j in 0..k {
            let v: f64 = record[j].trim().parse().map_err(|_| DataError::Parse {
                line,
                message: format!("bad probability in column p{j}"),
            })?;
            if !v.is_finite() || v < 0.0 {
                return Err(DataError::Parse {
                    line,
                    message: format!("probability p{j} = {v} must be finite and non-negative"),
                });
            }
            raw.push(v);
        }
        let label: i64 = record[k].trim().parse().map_err(|_| DataError::Parse {
            line,
            message: "bad label".into(),
        })?;
        if label < 0 || label as usize >= k {
            return Err(DataError::LabelOutOfRange {
                line,
                label,
                classes: k,
            });
        }
        dists.push(ProbDist::from_raw(&raw)?);
        labels.push(label as usize);
    }
    Ok((dists, labels))
}

/// Writes probability rows in the `load_logits_csv` format, atomically
/// (temp file then rename).
pub fn emit_logits_csv(
    path: &Path,
    dists: &[ProbDist],
    labels: &[usize],
) -> Result<(), DataError> {
    if dists.len() != labels.len() {
        return Err(DataError::Config("dists and labels disagree".into()));
    }
    let k = dists.first().map_or(0, ProbDist::num_classes);
    let tmp = temp_path(path);
    {
        let mut out = BufWriter::new(File::create(&tmp)?);
        let header: Vec<String> = (0..k).map(|j| format!("p{j}")).collect();
        writeln!(out, "{},label", header.join(","))?;
        for (d, &y) in dists.iter().zip(labels) {
            let row: Vec<String> = d.probs().iter().map(|p| format!("{p:.17e}")).collect();
            writeln!(out, "{},{y}", row.join(","))?;
        }
        out.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Dataset CSV with header `x0,...,x{d-1},label` plus a `# classes=K`
/// comment line, for moving synthetic data through files.
pub fn save_dataset_csv(path: &Path, data: &LabeledSet) -> Result<(), DataError> {
    let tmp = temp_path(path);
    {
        let mut out = BufWriter::new(File::create(&tmp)?);
        writeln!(out, "# classes={}", data.num_classes)?;
        let header: Vec<String> = (0..data.dim()).map(|j| format!("x{j}")).collect();
        writeln!(out, "{},label", header.join(","))?;
        for (row, &y) in data.features.rows().into_iter().zip(&data.labels) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
            writeln!(out, "{},{y}", cells.join(","))?;
        }
        out.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_dataset_csv(path: &Path) -> Result<LabeledSet, DataError> {
    let content = std::fs::read_to_string(path)?;
    let mut lines = content.lines().enumerate();

    let (_, first) = lines.next().ok_or(DataError::Parse {
        line: 1,
        message: "empty file".into(),
    })?;
    let num_classes: usize = first
        .strip_prefix("# classes=")
        .and_then(|s| s.trim().parse().ok())
        .ok_or(DataError::Parse {
            line: 1,
            message: "expected '# classes=K' on the first line".into(),
        })?;

    let (_, header) = lines.next().ok_or(DataError::Parse {
        line: 2,
        message: "missing header".into(),
    })?;
    let dim = header.split(',').count().saturating_sub(1);
    if dim == 0 {
        return Err(DataError::Parse {
            line: 2,
            message: "expected x0,...,label header".into(),
        });
    }

    let mut rows: Vec<f64> = Vec::new();
    let mut labels = Vec::new();
    for (idx, text) in lines {
        let line = idx + 1;
        let cells: Vec<&str> = text.split(',').collect();
        if cells.len() != dim + 1 {
            return Err(DataError::Parse {
                line,
                message: format!("expected {} fields, found {}", dim + 1, cells.len()),
            });
        }
        for cell in &cells[..dim] {
            let v: f64 = cell.trim().parse().map_err(|_| DataError::Parse {
                line,
                message: "bad feature value".into(),
            })?;
            rows.push(v);
        }
        let label: i64 = cells[dim].trim().parse().map_err(|_| DataError::Parse {
            line,
            message: "bad label".into(),
        })?;
        if label < 0 || label as usize >= num_classes {
            return Err(DataError::LabelOutOfRange {
                line,
                label,
                classes: num_classes,
            });
        }
        labels.push(label as usize);
    }
    let n = labels.len();
    let features = Array2::from_shape_vec((n, dim), rows)
        .map_err(|e| DataError::Config(e.to_string()))?;
    LabeledSet::new(features, labels, num_classes)
}

fn temp_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}
