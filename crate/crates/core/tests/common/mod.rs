#![allow(dead_code)]

use convtrace::em::{NeighborhoodOffsets, WeightMap};
use convtrace::features::{FeatureSet, FeatureVector};
use convtrace::imaging::ImagePlane;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_plane(width: usize, height: usize, seed: u64) -> ImagePlane {
    let mut r = rng(seed);
    ImagePlane::from_fn(width, height, |_, _| r.random_range(0.0..=255.0)).unwrap()
}

pub fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Weighted normal equations built pixel by pixel from `ImagePlane::get`.
pub fn brute_normal_equations(
    plane: &ImagePlane,
    weights: &WeightMap,
    offsets: &NeighborhoodOffsets,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let d = offsets.len();
    let mut a = vec![vec![0.0; d]; d];
    let mut b = vec![0.0; d];
    for ((x, y), w) in weights.region.pixels().zip(&weights.values) {
        let v: Vec<f64> = offsets
            .offsets()
            .iter()
            .map(|&(s, t)| plane.get((x as isize + s) as usize, (y as isize + t) as usize))
            .collect();
        for i in 0..d {
            b[i] += w * v[i] * plane.get(x, y);
            for j in 0..d {
                a[i][j] += w * v[i] * v[j];
            }
        }
    }
    (a, b)
}

/// Gaussian elimination with partial pivoting.
#[allow(clippy::needless_range_loop)]
pub fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| a[i][k] * x[k]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    x
}

pub fn record(kernel_size: usize, label: &str, values: Vec<f64>) -> FeatureVector {
    FeatureVector {
        kernel_size,
        values,
        label: label.to_string(),
        source: String::new(),
    }
}

/// Embeds low-dimensional points into the 24-D feature space of N=3.
pub fn embed(points: &[(&str, Vec<f64>)]) -> FeatureSet {
    FeatureSet::new(
        3,
        points
            .iter()
            .map(|(l, p)| {
                let mut v = vec![0.0; 24];
                v[..p.len()].copy_from_slice(p);
                record(3, l, v)
            })
            .collect(),
    )
    .unwrap()
}

pub fn pad24(p: &[f64]) -> Vec<f64> {
    let mut v = vec![0.0; 24];
    v[..p.len()].copy_from_slice(p);
    v
}

/// Gaussian blobs around the given centres in 24-D.
pub fn blobs(centres: &[(&str, f64)], per_class: usize, spread: f64, seed: u64) -> FeatureSet {
    let mut r = rng(seed);
    let mut recs = Vec::new();
    for (label, c) in centres {
        for _ in 0..per_class {
            let v = (0..24)
                .map(|j| {
                    let u: f64 = r.random_range(-1.0..1.0);
                    c * ((j % 3) as f64 - 1.0) + spread * u
                })
                .collect();
            recs.push(record(3, label, v));
        }
    }
    FeatureSet::new(3, recs).unwrap()
}
