//! Linear discriminant analysis with a shrunk pooled covariance.
//!
//! The pooled within-class covariance `S` (divisor `n - C`) is shrunk toward
//! a scaled identity, `(1 - l) S + l (tr(S)/D) I`, and inverted once. A point
//! is assigned to the class maximising
//! `x' S^-1 m_c - m_c' S^-1 m_c / 2 + ln p_c`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{matrix, ClassifyError};
use crate::features::FeatureSet;

/// Smallest admissible Cholesky pivot of the unit-diagonal scaled covariance.
const MIN_SCALED_PIVOT: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdaModel {
    pub classes: Vec<String>,
    pub class_means: Vec<Vec<f64>>,
    /// Row-major `D x D`.
    pub pooled_cov_inverse: Vec<f64>,
    pub priors: Vec<f64>,
    pub shrinkage: f64,
    /// `S^-1 m_c` per class.
    pub coefficients: Vec<Vec<f64>>,
    /// `-m_c' S^-1 m_c / 2 + ln p_c` per class.
    pub intercepts: Vec<f64>,
}

impl LdaModel {
    pub fn dim(&self) -> usize {
        self.class_means.first().map_or(0, Vec::len)
    }

    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>, ClassifyError> {
        if x.len() != self.dim() {
            return Err(ClassifyError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(self
            .coefficients
            .iter()
            .zip(&self.intercepts)
            .map(|(beta, c)| beta.iter().zip(x).map(|(b, v)| b * v).sum::<f64>() + c)
            .collect())
    }

    /// Highest-scoring class; exact ties go to the lexically first class.
    pub fn predict(&self, x: &[f64]) -> Result<String, ClassifyError> {
        let scores = self.scores(x)?;
        let mut best = 0;
        for (i, s) in scores.iter().enumerate() {
            if *s > scores[best] {
                best = i;
            }
        }
        Ok(self.classes[best].clone())
    }
}

pub fn lda_fit(train: &FeatureSet, shrinkage: f64) -> Result<LdaModel, ClassifyError> {
    if !(0.0..=1.0).contains(&shrinkage) {
        return Err(ClassifyError::InvalidShrinkage(shrinkage));
    }
    if train.is_empty() {
        return Err(ClassifyError::EmptyTrainingSet);
    }
    let classes = train.class_names().to_vec();
    if classes.len() < 2 {
        return Err(ClassifyError::TooFewClasses(classes.len()));
    }
    for (class, count) in train.class_counts() {
        if count < 2 {
            return Err(ClassifyError::ClassTooSmall {
                class,
                count,
                required: 2,
            });
        }
    }

    let (xs, labels) = matrix(train);
    let dim = train.dim();
    let n = xs.len();
    let class_of: Vec<usize> = labels
        .iter()
        .map(|l| classes.binary_search(l).expect("label in class list"))
        .collect();

    let mut means = vec![vec![0.0; dim]; classes.len()];
    let mut counts = vec![0usize; classes.len()];
    for (x, &c) in xs.iter().zip(&class_of) {
        counts[c] += 1;
        for (m, v) in means[c].iter_mut().zip(x) {
            *m += v;
        }
    }
    for (m, &cnt) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= cnt as f64);
    }

    let mut scatter = DMatrix::<f64>::zeros(dim, dim);
    let mut centered = vec![0.0; dim];
    for (x, &c) in xs.iter().zip(&class_of) {
        for ((d, v), m) in centered.iter_mut().zip(x).zip(&means[c]) {
            *d = v - m;
        }
        for i in 0..dim {
            for j in i..dim {
                scatter[(i, j)] += centered[i] * centered[j];
            }
        }
    }
    let denom = (n - classes.len()) as f64;
    for i in 0..dim {
        for j in i..dim {
            let v = scatter[(i, j)] / denom;
            scatter[(i, j)] = v;
            scatter[(j, i)] = v;
        }
    }
    let target = scatter.trace() / dim as f64;
    let mut cov = scatter * (1.0 - shrinkage);
    for i in 0..dim {
        cov[(i, i)] += shrinkage * target;
    }

    let inverse = invert_spd(&cov).ok_or(ClassifyError::SingularCovariance)?;
    let priors: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
    let mut coefficients = Vec::with_capacity(classes.len());
    let mut intercepts = Vec::with_capacity(classes.len());
    for (m, p) in means.iter().zip(&priors) {
        let beta: Vec<f64> = (0..dim)
            .map(|i| (0..dim).map(|j| inverse[(i, j)] * m[j]).sum())
            .collect();
        let quad: f64 = beta.iter().zip(m).map(|(b, v)| b * v).sum();
        intercepts.push(-0.5 * quad + p.ln());
        coefficients.push(beta);
    }

    Ok(LdaModel {
        classes,
        class_means: means,
        pooled_cov_inverse: inverse.transpose().as_slice().to_vec(),
        priors,
        shrinkage,
        coefficients,
        intercepts,
    })
}

fn invert_spd(cov: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let dim = cov.nrows();
    let scale: Vec<f64> = (0..dim)
        .map(|i| {
            let d = cov[(i, i)];
            (d > 0.0).then(|| 1.0 / d.sqrt())
        })
        .collect::<Option<_>>()?;
    let scaled = DMatrix::from_fn(dim, dim, |i, j| cov[(i, j)] * scale[i] * scale[j]);
    let chol = scaled.cholesky()?;
    let min_pivot = chol
        .l_dirty()
        .diagonal()
        .iter()
        .map(|d| d * d)
        .fold(f64::INFINITY, f64::min);
    if !(min_pivot >= MIN_SCALED_PIVOT) {
        return None;
    }
    let inv_scaled = chol.inverse();
    let inv = DMatrix::from_fn(dim, dim, |i, j| inv_scaled[(i, j)] * scale[i] * scale[j]);
    inv.iter().all(|v| v.is_finite()).then_some(inv)
}
