//! Classical classifiers over kernel feature vectors: k-nearest neighbours,
//! linear discriminant analysis and soft-margin SVMs (one-vs-rest for more
//! than two classes), plus evaluation and model persistence.

pub mod eval;
pub mod knn;
pub mod lda;
pub mod persist;
pub mod svm;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureError, FeatureSet, Scaler};

pub use eval::{evaluate, EvalReport};
pub use knn::{knn_fit, knn_predict, KnnModel};
pub use lda::{lda_fit, LdaModel};
pub use persist::{load_model, save_model, MODEL_FORMAT, MODEL_VERSION};
pub use svm::{one_vs_rest, svm_fit, BinarySvm, KernelKind, OneVsRest, SvmKernel, SvmParams};

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("k={k} exceeds the {n} training records")]
    KTooLarge { k: usize, n: usize },
    #[error("k must be odd and >= 1, got {0}")]
    InvalidK(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("class {class} has {count} records, at least {required} needed")]
    ClassTooSmall {
        class: String,
        count: usize,
        required: usize,
    },
    #[error("pooled covariance is singular")]
    SingularCovariance,
    #[error("shrinkage must lie in [0, 1], got {0}")]
    InvalidShrinkage(f64),
    #[error("SVM needs exactly 2 classes, got {0}")]
    NotBinary(usize),
    #[error("invalid SVM parameter: {0}")]
    InvalidParameter(String),
    #[error("SMO did not converge after {iterations} iterations (KKT gap {gap:e})")]
    NoConvergence { iterations: usize, gap: f64 },
    #[error("cannot parse classifier spec {0:?}")]
    BadSpec(String),
    #[error("model file version {found} is not supported (expected {expected})")]
    VersionMismatch { found: String, expected: u32 },
    #[error("model file: {0}")]
    Format(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

/// Which classifier to train and with which hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClassifierSpec {
    Knn { k: usize },
    Lda { shrinkage: f64 },
    Svm(SvmParams),
}

pub const DEFAULT_LDA_SHRINKAGE: f64 = 1e-4;

impl ClassifierSpec {
    /// Row label used in result tables.
    pub fn display_name(&self) -> String {
        match self {
            ClassifierSpec::Knn { k } => format!("{k}-NN"),
            ClassifierSpec::Lda { .. } => "LDA".to_string(),
            ClassifierSpec::Svm(p) => format!("SVM-{}", p.kernel),
        }
    }

    /// Standardization default: on for SVM and LDA, off for KNN.
    pub fn standardize_by_default(&self) -> bool {
        !matches!(self, ClassifierSpec::Knn { .. })
    }
}

impl fmt::Display for ClassifierSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassifierSpec::Knn { k } => write!(f, "knn:{k}"),
            ClassifierSpec::Lda { shrinkage } => write!(f, "lda:{shrinkage}"),
            ClassifierSpec::Svm(p) => {
                write!(f, "svm:{},c={}", p.kernel, p.c)?;
                if let Some(g) = p.gamma {
                    write!(f, ",gamma={g}")?;
                }
                write!(f, ",degree={},coef0={}", p.degree, p.coef0)
            }
        }
    }
}

impl FromStr for ClassifierSpec {
    type Err = ClassifyError;

    /// Accepts `knn:K`, `lda`, `lda:LAMBDA`, and
    /// `svm:KERNEL[,c=..][,gamma=..][,degree=..][,coef0=..]`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ClassifyError::BadSpec(s.to_string());
        let lower = s.trim().to_ascii_lowercase();
        let (kind, rest) = lower.split_once(':').unwrap_or((lower.as_str(), ""));
        match kind {
            "knn" => Ok(ClassifierSpec::Knn {
                k: rest.parse().map_err(|_| bad())?,
            }),
            "lda" if rest.is_empty() => Ok(ClassifierSpec::Lda {
                shrinkage: DEFAULT_LDA_SHRINKAGE,
            }),
            "lda" => Ok(ClassifierSpec::Lda {
                shrinkage: rest.parse().map_err(|_| bad())?,
            }),
            "svm" => {
                let mut parts = rest.split(',');
                let kernel: KernelKind = parts.next().unwrap_or("").parse().map_err(|_| bad())?;
                let mut p = SvmParams::new(kernel);
                for kv in parts {
                    let (key, value) = kv.split_once('=').ok_or_else(bad)?;
                    let v: f64 = value.parse().map_err(|_| bad())?;
                    match key {
                        "c" => p.c = v,
                        "gamma" => p.gamma = Some(v),
                        "degree" if v >= 1.0 && v.fract() == 0.0 => p.degree = v as u32,
                        "coef0" => p.coef0 = v,
                        _ => return Err(bad()),
                    }
                }
                Ok(ClassifierSpec::Svm(p))
            }
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Model {
    Knn(KnnModel),
    Lda(LdaModel),
    Svm(OneVsRest),
}

/// A trained classifier together with the scaling it expects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedClassifier {
    pub spec: ClassifierSpec,
    pub kernel_size: usize,
    pub dim: usize,
    pub classes: Vec<String>,
    pub scaler: Option<Scaler>,
    pub model: Model,
}

impl TrainedClassifier {
    pub fn standardized(&self) -> bool {
        self.scaler.is_some()
    }

    pub fn predict(&self, values: &[f64]) -> Result<String, ClassifyError> {
        if values.len() != self.dim {
            return Err(ClassifyError::DimensionMismatch {
                expected: self.dim,
                got: values.len(),
            });
        }
        let scaled;
        let x = match &self.scaler {
            Some(s) => {
                scaled = s.transform(values);
                scaled.as_slice()
            }
            None => values,
        };
        match &self.model {
            Model::Knn(m) => knn_predict(m, x),
            Model::Lda(m) => m.predict(x),
            Model::Svm(m) => m.predict(x),
        }
    }
}

/// Trains `spec` on `train`, z-scoring with training statistics when `standardize` is set.
pub fn train(spec: &ClassifierSpec, standardize: bool, train: &FeatureSet) -> Result<TrainedClassifier, ClassifyError> {
    if train.is_empty() {
        return Err(ClassifyError::EmptyTrainingSet);
    }
    let (data, scaler) = if standardize {
        let scaler = Scaler::fit(train)?;
        (scaler.apply(train), Some(scaler))
    } else {
        (train.clone(), None)
    };
    let model = match spec {
        ClassifierSpec::Knn { k } => Model::Knn(knn_fit(&data, *k)?),
        ClassifierSpec::Lda { shrinkage } => Model::Lda(lda_fit(&data, *shrinkage)?),
        ClassifierSpec::Svm(params) => Model::Svm(one_vs_rest(&data, params)?),
    };
    Ok(TrainedClassifier {
        spec: spec.clone(),
        kernel_size: train.kernel_size(),
        dim: train.dim(),
        classes: train.class_names().to_vec(),
        scaler,
        model,
    })
}

/// Row-major copy of the feature matrix and the labels.
pub(crate) fn matrix(fs: &FeatureSet) -> (Vec<Vec<f64>>, Vec<String>) {
    fs.records().iter().map(|r| (r.values.clone(), r.label.clone())).unzip()
}
