//! Brute-force k-nearest-neighbour classification under Euclidean distance.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{matrix, ClassifyError};
use crate::features::FeatureSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnModel {
    pub k: usize,
    pub points: Vec<Vec<f64>>,
    pub labels: Vec<String>,
}

impl KnnModel {
    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }
}

pub fn knn_fit(train: &FeatureSet, k: usize) -> Result<KnnModel, ClassifyError> {
    if train.is_empty() {
        return Err(ClassifyError::EmptyTrainingSet);
    }
    if k == 0 || k.is_multiple_of(2) {
        return Err(ClassifyError::InvalidK(k));
    }
    if k > train.len() {
        return Err(ClassifyError::KTooLarge { k, n: train.len() });
    }
    let (points, labels) = matrix(train);
    Ok(KnnModel { k, points, labels })
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Indices and distances of the `k` nearest training points; equal
/// distances keep training order.
pub fn nearest(model: &KnnModel, x: &[f64]) -> Vec<(usize, f64)> {
    let mut dists: Vec<(usize, f64)> = model
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| (i, euclidean(p, x)))
        .collect();
    dists.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    dists.truncate(model.k);
    dists
}

/// Majority vote of the `k` nearest points. Vote ties go to the class with
/// the smaller summed distance, then to the lexically smaller class name.
pub fn knn_predict(model: &KnnModel, x: &[f64]) -> Result<String, ClassifyError> {
    if x.len() != model.dim() {
        return Err(ClassifyError::DimensionMismatch {
            expected: model.dim(),
            got: x.len(),
        });
    }
    let mut votes: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for (i, d) in nearest(model, x) {
        let v = votes.entry(model.labels[i].as_str()).or_insert((0, 0.0));
        v.0 += 1;
        v.1 += d;
    }
    // BTreeMap iterates in lexical order, so `min_by` keeps the first on full ties.
    let (label, _) = votes
        .into_iter()
        .min_by(|a, b| match b.1 .0.cmp(&a.1 .0) {
            Ordering::Equal => a.1 .1.total_cmp(&b.1 .1),
            other => other,
        })
        .expect("k >= 1");
    Ok(label.to_string())
}
