//! Soft-margin support vector machines trained with SMO.
//!
//! The dual `min 1/2 a'Qa - e'a` s.t. `0 <= a_i <= C`, `y'a = 0` is solved by
//! sequential minimal optimisation with second-order working-set selection
//! (Fan, Chen and Lin, 2005). Kernel rows are computed on demand and kept in
//! a bounded cache.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{matrix, ClassifyError};
use crate::features::FeatureSet;

/// Stand-in for a non-positive curvature along the working pair.
const TAU: f64 = 1e-12;

/// Kernel cache budget in bytes.
const CACHE_BYTES: usize = 256 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Linear,
    Rbf,
    Poly,
    Sigmoid,
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelKind::Linear => "linear",
            KernelKind::Rbf => "rbf",
            KernelKind::Poly => "poly",
            KernelKind::Sigmoid => "sigmoid",
        })
    }
}

impl FromStr for KernelKind {
    type Err = ClassifyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(KernelKind::Linear),
            "rbf" => Ok(KernelKind::Rbf),
            "poly" | "polynomial" => Ok(KernelKind::Poly),
            "sigmoid" => Ok(KernelKind::Sigmoid),
            _ => Err(ClassifyError::BadSpec(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    pub kernel: KernelKind,
    pub c: f64,
    /// `None` resolves to `1 / D` at fit time.
    pub gamma: Option<f64>,
    pub degree: u32,
    pub coef0: f64,
    /// KKT violation tolerance.
    pub tol: f64,
    /// `None` resolves to `max(10^7, 100 n)`.
    pub max_iter: Option<usize>,
}

impl SvmParams {
    pub fn new(kernel: KernelKind) -> Self {
        Self {
            kernel,
            c: 1.0,
            gamma: None,
            degree: 3,
            coef0: 0.0,
            tol: 1e-3,
            max_iter: None,
        }
    }

    fn resolve(&self, dim: usize) -> Result<SvmKernel, ClassifyError> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(ClassifyError::InvalidParameter(format!("C = {}", self.c)));
        }
        if !(self.tol > 0.0) {
            return Err(ClassifyError::InvalidParameter(format!("tol = {}", self.tol)));
        }
        let gamma = self.gamma.unwrap_or(1.0 / dim as f64);
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(ClassifyError::InvalidParameter(format!("gamma = {gamma}")));
        }
        Ok(match self.kernel {
            KernelKind::Linear => SvmKernel::Linear,
            KernelKind::Rbf => SvmKernel::Rbf { gamma },
            KernelKind::Poly => SvmKernel::Poly {
                gamma,
                degree: self.degree,
                coef0: self.coef0,
            },
            KernelKind::Sigmoid => SvmKernel::Sigmoid {
                gamma,
                coef0: self.coef0,
            },
        })
    }
}

/// Kernel with every hyperparameter resolved.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SvmKernel {
    Linear,
    Rbf { gamma: f64 },
    Poly { gamma: f64, degree: u32, coef0: f64 },
    Sigmoid { gamma: f64, coef0: f64 },
}

impl SvmKernel {
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let dot = || a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        match *self {
            SvmKernel::Linear => dot(),
            SvmKernel::Rbf { gamma } => {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-gamma * d2).exp()
            }
            SvmKernel::Poly { gamma, degree, coef0 } => (gamma * dot() + coef0).powi(degree as i32),
            SvmKernel::Sigmoid { gamma, coef0 } => (gamma * dot() + coef0).tanh(),
        }
    }
}

/// Binary SVM; positive decision values mean `positive`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinarySvm {
    pub kernel: SvmKernel,
    pub c: f64,
    pub positive: String,
    pub negative: String,
    pub support_vectors: Vec<Vec<f64>>,
    /// Dual variables of the support vectors, each in `(0, C]`.
    pub alphas: Vec<f64>,
    /// `+1` or `-1` per support vector.
    pub signs: Vec<f64>,
    pub bias: f64,
    /// Primal weights, materialised for the linear kernel only.
    pub weights: Option<Vec<f64>>,
    pub iterations: usize,
    /// Final maximal KKT violation `m(a) - M(a)`.
    pub kkt_gap: f64,
}

impl BinarySvm {
    pub fn dim(&self) -> usize {
        self.support_vectors
            .first()
            .map(Vec::len)
            .or_else(|| self.weights.as_ref().map(Vec::len))
            .unwrap_or(0)
    }

    /// Decision value from the support-vector expansion.
    pub fn dual_decision(&self, x: &[f64]) -> f64 {
        self.support_vectors
            .iter()
            .zip(self.alphas.iter().zip(&self.signs))
            .map(|(sv, (a, y))| a * y * self.kernel.eval(sv, x))
            .sum::<f64>()
            + self.bias
    }

    /// Uses the primal weights when available.
    pub fn decision(&self, x: &[f64]) -> f64 {
        match &self.weights {
            Some(w) => w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.bias,
            None => self.dual_decision(x),
        }
    }

    pub fn predict(&self, x: &[f64]) -> &str {
        if self.decision(x) > 0.0 {
            &self.positive
        } else {
            &self.negative
        }
    }
}

struct KernelCache<'a> {
    xs: &'a [Vec<f64>],
    kernel: SvmKernel,
    rows: HashMap<usize, Rc<Vec<f64>>>,
    order: VecDeque<usize>,
    capacity: usize,
}

impl<'a> KernelCache<'a> {
    fn new(xs: &'a [Vec<f64>], kernel: SvmKernel) -> Self {
        let per_row = xs.len().max(1) * std::mem::size_of::<f64>();
        Self {
            xs,
            kernel,
            rows: HashMap::new(),
            order: VecDeque::new(),
            capacity: (CACHE_BYTES / per_row).max(2),
        }
    }

    fn row(&mut self, i: usize) -> Rc<Vec<f64>> {
        if let Some(r) = self.rows.get(&i) {
            return Rc::clone(r);
        }
        if self.rows.len() >= self.capacity {
            if let Some(old) = self.order.pop_front() {
                self.rows.remove(&old);
            }
        }
        let xi = &self.xs[i];
        let row: Rc<Vec<f64>> = Rc::new(self.xs.iter().map(|xj| self.kernel.eval(xi, xj)).collect());
        self.rows.insert(i, Rc::clone(&row));
        self.order.push_back(i);
        row
    }
}

/// Trains a binary SVM; `train` must hold exactly two classes. The
/// lexically first class is the positive one.
pub fn svm_fit(train: &FeatureSet, params: &SvmParams) -> Result<BinarySvm, ClassifyError> {
    let classes = train.class_names();
    if classes.len() != 2 {
        return Err(ClassifyError::NotBinary(classes.len()));
    }
    let (xs, labels) = matrix(train);
    let y: Vec<f64> = labels
        .iter()
        .map(|l| if *l == classes[0] { 1.0 } else { -1.0 })
        .collect();
    fit_signed(&xs, &y, params, &classes[0], &classes[1])
}

fn fit_signed(
    xs: &[Vec<f64>],
    y: &[f64],
    params: &SvmParams,
    positive: &str,
    negative: &str,
) -> Result<BinarySvm, ClassifyError> {
    let n = xs.len();
    if n == 0 {
        return Err(ClassifyError::EmptyTrainingSet);
    }
    let dim = xs[0].len();
    let kernel = params.resolve(dim)?;
    let c = params.c;
    let eps = params.tol;
    let max_iter = params.max_iter.unwrap_or_else(|| (100 * n).max(10_000_000));

    let mut cache = KernelCache::new(xs, kernel);
    let diag: Vec<f64> = xs.iter().map(|x| kernel.eval(x, x)).collect();
    let mut alpha = vec![0.0; n];
    // Gradient of the dual objective, Q a - e.
    let mut grad = vec![-1.0; n];

    let in_up = |a: f64, y: f64| (y > 0.0 && a < c) || (y < 0.0 && a > 0.0);
    let in_low = |a: f64, y: f64| (y > 0.0 && a > 0.0) || (y < 0.0 && a < c);

    let mut iterations = 0;
    let kkt_gap = loop {
        // i: maximal violator in I_up.
        let mut g_max = f64::NEG_INFINITY;
        let mut i_sel = None;
        for t in 0..n {
            if in_up(alpha[t], y[t]) {
                let v = -y[t] * grad[t];
                if v > g_max {
                    g_max = v;
                    i_sel = Some(t);
                }
            }
        }
        let mut g_min = f64::INFINITY;
        for t in 0..n {
            if in_low(alpha[t], y[t]) {
                g_min = g_min.min(-y[t] * grad[t]);
            }
        }
        let gap = g_max - g_min;
        let Some(i) = i_sel else { break gap.max(0.0) };
        if !(gap >= eps) {
            break gap.max(0.0);
        }
        if iterations >= max_iter {
            return Err(ClassifyError::NoConvergence { iterations, gap });
        }
        iterations += 1;

        // j: second-order choice among I_low violators.
        let k_i = cache.row(i);
        let mut j_sel = None;
        let mut best = f64::INFINITY;
        for t in 0..n {
            if !in_low(alpha[t], y[t]) {
                continue;
            }
            let b = g_max + y[t] * grad[t];
            if b > 0.0 {
                let mut a = diag[i] + diag[t] - 2.0 * k_i[t];
                if a <= 0.0 {
                    a = TAU;
                }
                let obj = -(b * b) / a;
                if obj < best {
                    best = obj;
                    j_sel = Some(t);
                }
            }
        }
        let Some(j) = j_sel else { break gap };
        let k_j = cache.row(j);

        let (old_i, old_j) = (alpha[i], alpha[j]);
        let q_ij = y[i] * y[j] * k_i[j];
        if y[i] != y[j] {
            let mut quad = diag[i] + diag[j] + 2.0 * q_ij;
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let mut quad = diag[i] + diag[j] - 2.0 * q_ij;
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }

        let (d_i, d_j) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..n {
            grad[t] += y[t] * (y[i] * k_i[t] * d_i + y[j] * k_j[t] * d_j);
        }
    };

    // Bias from free vectors, or the midpoint of the feasible interval.
    let (mut sum_free, mut n_free) = (0.0, 0usize);
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            n_free += 1;
            sum_free += yg;
        }
    }
    let rho = if n_free > 0 {
        sum_free / n_free as f64
    } else {
        (ub + lb) / 2.0
    };

    let mut support_vectors = Vec::new();
    let mut alphas = Vec::new();
    let mut signs = Vec::new();
    for t in 0..n {
        if alpha[t] > 0.0 {
            support_vectors.push(xs[t].clone());
            alphas.push(alpha[t]);
            signs.push(y[t]);
        }
    }
    let weights = matches!(kernel, SvmKernel::Linear).then(|| {
        let mut w = vec![0.0; dim];
        for (sv, (a, s)) in support_vectors.iter().zip(alphas.iter().zip(&signs)) {
            for (wk, v) in w.iter_mut().zip(sv) {
                *wk += a * s * v;
            }
        }
        w
    });

    Ok(BinarySvm {
        kernel,
        c,
        positive: positive.to_string(),
        negative: negative.to_string(),
        support_vectors,
        alphas,
        signs,
        bias: -rho,
        weights,
        iterations,
        kkt_gap,
    })
}

/// One binary model per class (a single model when there are exactly two);
/// prediction is the class with the largest decision value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneVsRest {
    pub classes: Vec<String>,
    pub models: Vec<BinarySvm>,
}

impl OneVsRest {
    pub fn dim(&self) -> usize {
        self.models.first().map_or(0, BinarySvm::dim)
    }

    /// One decision value per class, in class order.
    pub fn decisions(&self, x: &[f64]) -> Result<Vec<f64>, ClassifyError> {
        if x.len() != self.dim() {
            return Err(ClassifyError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(if self.classes.len() == 2 {
            let f = self.models[0].decision(x);
            vec![f, -f]
        } else {
            self.models.iter().map(|m| m.decision(x)).collect()
        })
    }

    /// Exact ties go to the lexically first class.
    pub fn predict(&self, x: &[f64]) -> Result<String, ClassifyError> {
        let d = self.decisions(x)?;
        let mut best = 0;
        for (i, v) in d.iter().enumerate() {
            if *v > d[best] {
                best = i;
            }
        }
        Ok(self.classes[best].clone())
    }
}

pub fn one_vs_rest(train: &FeatureSet, params: &SvmParams) -> Result<OneVsRest, ClassifyError> {
    let classes = train.class_names().to_vec();
    if classes.len() < 2 {
        return Err(ClassifyError::TooFewClasses(classes.len()));
    }
    if classes.len() == 2 {
        return Ok(OneVsRest {
            models: vec![svm_fit(train, params)?],
            classes,
        });
    }
    let (xs, labels) = matrix(train);
    let models = classes
        .iter()
        .map(|c| {
            let y: Vec<f64> = labels.iter().map(|l| if l == c { 1.0 } else { -1.0 }).collect();
            fit_signed(&xs, &y, params, c, &format!("not {c}"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(OneVsRest { classes, models })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureVector;

    fn set(rows: &[(&str, [f64; 2])]) -> FeatureSet {
        FeatureSet::new(
            3,
            rows.iter()
                .map(|(l, p)| {
                    let mut values = vec![0.0; 24];
                    values[..2].copy_from_slice(p);
                    FeatureVector {
                        kernel_size: 3,
                        values,
                        label: l.to_string(),
                        source: String::new(),
                    }
                })
                .collect(),
        )
        .unwrap()
    }

    fn pad(p: [f64; 2]) -> Vec<f64> {
        let mut v = vec![0.0; 24];
        v[..2].copy_from_slice(&p);
        v
    }

    #[test]
    fn two_points_max_margin() {
        let fs = set(&[("a", [1.0, 1.0]), ("b", [-1.0, -1.0])]);
        let m = svm_fit(&fs, &SvmParams::new(KernelKind::Linear)).unwrap();
        assert_eq!(m.support_vectors.len(), 2);
        // w = (0.5, 0.5), b = 0: both points sit exactly on the margin.
        let w = m.weights.as_ref().unwrap();
        assert!((w[0] - 0.5).abs() < 1e-9 && (w[1] - 0.5).abs() < 1e-9, "{w:?}");
        assert!(m.bias.abs() < 1e-9);
        assert!((m.decision(&pad([1.0, 1.0])) - 1.0).abs() < 1e-9);
        assert!((m.alphas[0] - 0.25).abs() < 1e-9);
    }

    #[test]
    fn not_binary_and_bad_params() {
        let three = set(&[("a", [0.0, 0.0]), ("b", [1.0, 0.0]), ("c", [0.0, 1.0])]);
        assert!(matches!(
            svm_fit(&three, &SvmParams::new(KernelKind::Rbf)),
            Err(ClassifyError::NotBinary(3))
        ));
        let two = set(&[("a", [0.0, 0.0]), ("b", [1.0, 0.0])]);
        let mut p = SvmParams::new(KernelKind::Rbf);
        p.c = 0.0;
        assert!(matches!(svm_fit(&two, &p), Err(ClassifyError::InvalidParameter(_))));
    }

    #[test]
    fn iteration_cap_reports_gap() {
        let fs = set(&[
            ("a", [0.0, 0.0]),
            ("a", [1.0, 1.0]),
            ("b", [1.0, 0.0]),
            ("b", [0.0, 1.0]),
            ("a", [0.2, 0.1]),
            ("b", [0.9, 0.2]),
        ]);
        let mut p = SvmParams::new(KernelKind::Rbf);
        p.max_iter = Some(1);
        p.gamma = Some(2.0);
        match svm_fit(&fs, &p) {
            Err(ClassifyError::NoConvergence { iterations, gap }) => {
                assert_eq!(iterations, 1);
                assert!(gap > 1e-3);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn kernels_evaluate() {
        let a = [1.0, 2.0];
        let b = [0.5, -1.0];
        assert_eq!(SvmKernel::Linear.eval(&a, &b), -1.5);
        assert!((SvmKernel::Rbf { gamma: 0.5 }.eval(&a, &b) - (-0.5f64 * 9.25).exp()).abs() < 1e-15);
        let poly = SvmKernel::Poly {
            gamma: 1.0,
            degree: 2,
            coef0: 1.0,
        };
        assert_eq!(poly.eval(&a, &b), 0.25);
        let sig = SvmKernel::Sigmoid { gamma: 1.0, coef0: 0.0 };
        assert_eq!(sig.eval(&a, &b), (-1.5f64).tanh());
    }

    #[test]
    fn sigmoid_kernel_trains() {
        let fs = set(&[
            ("a", [0.5, 0.4]),
            ("a", [0.6, 0.7]),
            ("a", [0.8, 0.3]),
            ("b", [-0.5, -0.6]),
            ("b", [-0.7, -0.2]),
            ("b", [-0.4, -0.8]),
        ]);
        let m = svm_fit(&fs, &SvmParams::new(KernelKind::Sigmoid)).unwrap();
        for a in &m.alphas {
            assert!(*a > 0.0 && *a <= m.c);
        }
    }
}
