//! Per-image feature vectors and feature datasets.
//!
//! A feature vector is the concatenation of the three channel kernels (R,
//! then G, then B), each in neighbourhood-offset order, with the anchor
//! excluded. The residual spread is not part of the feature.
//!
//! Datasets persist as CSV:
//!
//! ```text
//! # kernel_size=3
//! label,source,f0,f1,...,f23
//! celeba,faces/000001.png,0.2431...,...
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::em::KernelEstimate;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("channel estimates use different kernel sizes: {0:?}")]
    MixedKernelSizes(Vec<usize>),
    #[error("invalid feature record: {0}")]
    InvalidRecord(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: schema mismatch: {detail}")]
    SchemaMismatch { path: PathBuf, line: u64, detail: String },
    #[error("{path}: missing `# kernel_size=N` line")]
    KernelSizeMissing { path: PathBuf },
    #[error("need at least 2 records, got {0}")]
    TooFewRecords(usize),
}

/// Feature dimensionality `3 (N^2 - 1)`.
pub fn feature_dim(kernel_size: usize) -> usize {
    3 * (kernel_size * kernel_size - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub kernel_size: usize,
    pub values: Vec<f64>,
    pub label: String,
    pub source: String,
}

/// Concatenates the R, G and B kernels of one image.
pub fn assemble(
    estimates: &[KernelEstimate; 3],
    label: impl Into<String>,
    source: impl Into<String>,
) -> Result<FeatureVector, FeatureError> {
    let sizes: Vec<usize> = estimates.iter().map(|e| e.kernel_size).collect();
    if sizes.iter().any(|s| *s != sizes[0]) {
        return Err(FeatureError::MixedKernelSizes(sizes));
    }
    let kernel_size = sizes[0];
    let values: Vec<f64> = estimates.iter().flat_map(|e| e.weights.iter().copied()).collect();
    if values.len() != feature_dim(kernel_size) {
        return Err(FeatureError::InvalidRecord(format!(
            "{} values for kernel size {}",
            values.len(),
            kernel_size
        )));
    }
    Ok(FeatureVector {
        kernel_size,
        values,
        label: label.into(),
        source: source.into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    kernel_size: usize,
    records: Vec<FeatureVector>,
    class_names: Vec<String>,
}

impl FeatureSet {
    pub fn new(kernel_size: usize, records: Vec<FeatureVector>) -> Result<Self, FeatureError> {
        let dim = feature_dim(kernel_size);
        for (i, r) in records.iter().enumerate() {
            if r.kernel_size != kernel_size {
                return Err(FeatureError::MixedKernelSizes(vec![kernel_size, r.kernel_size]));
            }
            if r.values.len() != dim {
                return Err(FeatureError::InvalidRecord(format!(
                    "record {i} has {} values, expected {dim}",
                    r.values.len()
                )));
            }
            if r.values.iter().any(|v| !v.is_finite()) {
                return Err(FeatureError::InvalidRecord(format!("record {i} has non-finite values")));
            }
        }
        let class_names = records
            .iter()
            .map(|r| r.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Ok(Self {
            kernel_size,
            records,
            class_names,
        })
    }

    pub fn empty(kernel_size: usize) -> Self {
        Self {
            kernel_size,
            records: Vec::new(),
            class_names: Vec::new(),
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn dim(&self) -> usize {
        feature_dim(self.kernel_size)
    }

    pub fn records(&self) -> &[FeatureVector] {
        &self.records
    }

    /// Sorted, unique labels.
    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records selected by index, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let records = indices.iter().map(|&i| self.records[i].clone()).collect();
        Self::new(self.kernel_size, records).expect("subset of a valid set")
    }

    pub fn class_counts(&self) -> Vec<(String, usize)> {
        self.class_names
            .iter()
            .map(|c| (c.clone(), self.records.iter().filter(|r| &r.label == c).count()))
            .collect()
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FeatureError + '_ {
    move |source| FeatureError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_io(path: &Path, e: csv::Error) -> FeatureError {
    FeatureError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}

fn header(dim: usize) -> Vec<String> {
    let mut h = vec!["label".to_string(), "source".to_string()];
    h.extend((0..dim).map(|i| format!("f{i}")));
    h
}

/// Writes `fs` as CSV; values use the shortest decimal form that parses back
/// to the same `f64`.
pub fn save_features(fs: &FeatureSet, path: impl AsRef<Path>) -> Result<(), FeatureError> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "# kernel_size={}", fs.kernel_size).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(fs.dim())).map_err(|e| csv_io(path, e))?;
    for r in &fs.records {
        let mut row = Vec::with_capacity(r.values.len() + 2);
        row.push(r.label.clone());
        row.push(r.source.clone());
        row.extend(r.values.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureSet, FeatureError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let (first, rest) = text.split_once('\n').unwrap_or((text.as_str(), ""));
    let kernel_size = first
        .trim_end_matches('\r')
        .strip_prefix("# kernel_size=")
        .and_then(|n| n.trim().parse::<usize>().ok())
        .filter(|n| *n >= 2)
        .ok_or_else(|| FeatureError::KernelSizeMissing {
            path: path.to_path_buf(),
        })?;
    let dim = feature_dim(kernel_size);
    let mismatch = |line: u64, detail: String| FeatureError::SchemaMismatch {
        path: path.to_path_buf(),
        line,
        detail,
    };

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(rest.as_bytes());
    let mut rows = reader.records();
    let expected = header(dim);
    match rows.next() {
        None => return Err(mismatch(2, "missing header row".into())),
        Some(row) => {
            let row = row.map_err(|e| mismatch(2, e.to_string()))?;
            if row.iter().ne(expected.iter().map(String::as_str)) {
                return Err(mismatch(2, format!("header must be label,source,f0..f{}", dim - 1)));
            }
        }
    }

    let mut records = Vec::new();
    for row in rows {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line() + 1).unwrap_or(0);
            mismatch(line, e.to_string())
        })?;
        // +1 for the kernel-size comment.
        let line = row.position().map(|p| p.line() + 1).unwrap_or(0);
        if row.len() != dim + 2 {
            return Err(mismatch(line, format!("{} fields, expected {}", row.len(), dim + 2)));
        }
        let values = row
            .iter()
            .skip(2)
            .map(|v| match v.parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(x),
                _ => Err(mismatch(line, format!("bad feature value {v:?}"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        records.push(FeatureVector {
            kernel_size,
            values,
            label: row[0].to_string(),
            source: row[1].to_string(),
        });
    }
    FeatureSet::new(kernel_size, records)
}

/// Per-dimension z-score parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Scaler {
    /// Population mean and standard deviation of each dimension. Constant
    /// dimensions get mean 0 and std 1 so they pass through unchanged.
    pub fn fit(fs: &FeatureSet) -> Result<Self, FeatureError> {
        let n = fs.len();
        if n < 2 {
            return Err(FeatureError::TooFewRecords(n));
        }
        let dim = fs.dim();
        let mut means = vec![0.0; dim];
        for r in fs.records() {
            for (m, v) in means.iter_mut().zip(&r.values) {
                *m += v;
            }
        }
        means.iter_mut().for_each(|m| *m /= n as f64);
        let mut stds = vec![0.0; dim];
        for r in fs.records() {
            for ((s, v), m) in stds.iter_mut().zip(&r.values).zip(&means) {
                *s += (v - m) * (v - m);
            }
        }
        for j in 0..dim {
            let first = fs.records()[0].values[j];
            let constant = fs.records().iter().all(|r| r.values[j] == first);
            if constant {
                means[j] = 0.0;
                stds[j] = 1.0;
            } else {
                stds[j] = (stds[j] / n as f64).sqrt();
            }
        }
        Ok(Self { means, stds })
    }

    pub fn transform(&self, values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn apply(&self, fs: &FeatureSet) -> FeatureSet {
        let records = fs
            .records()
            .iter()
            .map(|r| FeatureVector {
                values: self.transform(&r.values),
                ..r.clone()
            })
            .collect();
        FeatureSet::new(fs.kernel_size(), records).expect("scaling preserves validity")
    }
}

/// Z-scores every dimension with statistics from `fs` itself.
pub fn standardize(fs: &FeatureSet) -> Result<(FeatureSet, Scaler), FeatureError> {
    let scaler = Scaler::fit(fs)?;
    Ok((scaler.apply(fs), scaler))
}
