//! Expectation-Maximization estimation of local pixel-correlation kernels.
//!
//! Each pixel of a channel is modelled as a linear combination of its
//! `N x N` neighbours (anchor excluded). Pixels are either explained by that
//! linear model with a zero-mean Gaussian residual, or they are outliers
//! drawn from a uniform density `p0`. The E-step computes per-pixel
//! membership probabilities for the linear model, the M-step solves the
//! weighted normal equations for the kernel and re-estimates the residual
//! spread.
//!
//! Only the valid region is used: pixels whose whole window lies inside the
//! plane. Nothing is padded.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{ImagePlane, RgbImage};

/// Lower clamp for the residual spread.
pub const MIN_SIGMA: f64 = 1e-6;

/// Smallest admissible Cholesky pivot of the unit-diagonal scaled system.
pub const SINGULAR_PIVOT: f64 = 1e-9;

/// Half-width of the uniform distribution used to initialise the kernel.
pub const INIT_SPREAD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Channel {
    Red,
    Green,
    Blue,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Red, Channel::Green, Channel::Blue];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Channel::Red => "R",
            Channel::Green => "G",
            Channel::Blue => "B",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmError {
    #[error("kernel size must be at least 2, got {0}")]
    InvalidKernelSize(usize),
    #[error("invalid EM configuration: {0}")]
    InvalidConfig(String),
    #[error("plane {width}x{height} is smaller than the {kernel_size}x{kernel_size} window")]
    PlaneTooSmall {
        width: usize,
        height: usize,
        kernel_size: usize,
    },
    #[error("sigma must be positive and finite, got {0}")]
    NonPositiveSigma(f64),
    #[error("outlier density must be positive and finite, got {0}")]
    NonPositiveDensity(f64),
    #[error("normal equations are singular (smallest scaled pivot {min_pivot:e})")]
    SingularSystem { min_pivot: f64 },
    #[error("only {positive} pixels carry positive weight, {required} needed")]
    InsufficientSupport { positive: usize, required: usize },
    #[error("total weight mass is zero")]
    ZeroWeightMass,
    #[error("plane has zero variance")]
    DegenerateInput,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("channel {channel}: {source}")]
    Channel {
        channel: Channel,
        #[source]
        source: Box<EmError>,
    },
}

impl EmError {
    /// The underlying error with any channel annotation stripped.
    pub fn root(&self) -> &EmError {
        match self {
            EmError::Channel { source, .. } => source.root(),
            other => other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub kernel_size: usize,
    pub max_iters: usize,
    pub sigma0: f64,
    pub p0: f64,
    pub convergence_tol: f64,
    pub ridge: f64,
    pub rng_seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            kernel_size: 3,
            max_iters: 100,
            sigma0: 5.0,
            p0: 1.0 / 256.0,
            convergence_tol: 1e-6,
            ridge: 1e-10,
            rng_seed: 0,
        }
    }
}

impl EmConfig {
    pub fn with_kernel_size(kernel_size: usize) -> Self {
        Self {
            kernel_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), EmError> {
        if self.kernel_size < 2 {
            return Err(EmError::InvalidKernelSize(self.kernel_size));
        }
        let bad = |what: &str| Err(EmError::InvalidConfig(what.to_string()));
        if self.max_iters < 1 {
            return bad("max_iters must be >= 1");
        }
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return bad("sigma0 must be > 0");
        }
        if !(self.p0 > 0.0 && self.p0.is_finite()) {
            return bad("p0 must be > 0");
        }
        if !(self.convergence_tol >= 0.0) {
            return bad("convergence_tol must be >= 0");
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return bad("ridge must be >= 0");
        }
        Ok(())
    }
}

/// The `N x N` window minus its anchor, in row-major `(t, s)` order.
///
/// `s` is the horizontal (column) offset and `t` the vertical (row) offset.
/// Odd sizes are centred; even sizes span `[-N/2, N/2 - 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborhoodOffsets {
    kernel_size: usize,
    lo: isize,
    hi: isize,
    offsets: Vec<(isize, isize)>,
}

impl NeighborhoodOffsets {
    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn offsets(&self) -> &[(isize, isize)] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Inclusive offset range `(lo, hi)` along each axis.
    pub fn span(&self) -> (isize, isize) {
        (self.lo, self.hi)
    }

    pub fn anchor_convention(&self) -> &'static str {
        if self.kernel_size % 2 == 1 {
            "centered: s,t in [-(N-1)/2, (N-1)/2], anchor (0,0) excluded"
        } else {
            "even: s,t in [-N/2, N/2-1], anchor (0,0) excluded"
        }
    }

    pub fn position(&self, s: isize, t: isize) -> Option<usize> {
        self.offsets.iter().position(|&o| o == (s, t))
    }

    /// Offsets preceding the anchor in raster order (`t < 0`, or `t == 0` and `s < 0`).
    pub fn is_causal(offset: (isize, isize)) -> bool {
        let (s, t) = offset;
        t < 0 || (t == 0 && s < 0)
    }

    /// Interior rectangle of a `width x height` plane where the full window fits.
    pub fn valid_region(&self, width: usize, height: usize) -> Result<ValidRegion, EmError> {
        let n = self.kernel_size;
        if width < n || height < n {
            return Err(EmError::PlaneTooSmall {
                width,
                height,
                kernel_size: n,
            });
        }
        let x0 = (-self.lo) as usize;
        let extent = n - 1;
        Ok(ValidRegion {
            x0,
            y0: x0,
            width: width - extent,
            height: height - extent,
        })
    }

    fn linear_deltas(&self, stride: usize) -> Vec<isize> {
        self.offsets.iter().map(|&(s, t)| t * stride as isize + s).collect()
    }
}

pub fn neighborhood_offsets(kernel_size: usize) -> Result<NeighborhoodOffsets, EmError> {
    if kernel_size < 2 {
        return Err(EmError::InvalidKernelSize(kernel_size));
    }
    let n = kernel_size as isize;
    let (lo, hi) = if kernel_size % 2 == 1 {
        (-(n - 1) / 2, (n - 1) / 2)
    } else {
        (-n / 2, n / 2 - 1)
    };
    let mut offsets = Vec::with_capacity(kernel_size * kernel_size - 1);
    for t in lo..=hi {
        for s in lo..=hi {
            if (s, t) != (0, 0) {
                offsets.push((s, t));
            }
        }
    }
    Ok(NeighborhoodOffsets {
        kernel_size,
        lo,
        hi,
        offsets,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValidRegion {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl ValidRegion {
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Plane coordinates of every valid pixel, row-major.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.y0..self.y0 + self.height).flat_map(move |y| (self.x0..self.x0 + self.width).map(move |x| (x, y)))
    }
}

/// Absolute prediction residuals over the valid region.
#[derive(Debug, Clone, PartialEq)]
pub struct Residuals {
    pub region: ValidRegion,
    pub values: Vec<f64>,
}

impl Residuals {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        let r = &self.region;
        self.values[(y - r.y0) * r.width + (x - r.x0)]
    }
}

/// Posterior probability that each valid pixel follows the linear model.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    pub region: ValidRegion,
    pub values: Vec<f64>,
}

impl WeightMap {
    pub fn uniform(region: ValidRegion, value: f64) -> Self {
        Self {
            region,
            values: vec![value; region.len()],
        }
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelEstimate {
    pub kernel_size: usize,
    /// Aligned with [`NeighborhoodOffsets`] for `kernel_size`.
    pub weights: Vec<f64>,
    pub sigma: f64,
    pub iterations_run: usize,
    pub converged: bool,
}

fn check_weights(offsets: &NeighborhoodOffsets, weights: &[f64]) -> Result<(), EmError> {
    if weights.len() != offsets.len() {
        return Err(EmError::DimensionMismatch(format!(
            "{} weights for {} offsets",
            weights.len(),
            offsets.len()
        )));
    }
    Ok(())
}

/// `R[x,y] = |I[x,y] - sum k_{s,t} I[x+s,y+t]|` over the valid region.
pub fn residual_map(plane: &ImagePlane, offsets: &NeighborhoodOffsets, weights: &[f64]) -> Result<Residuals, EmError> {
    check_weights(offsets, weights)?;
    let region = offsets.valid_region(plane.width(), plane.height())?;
    let data = plane.data();
    let deltas = offsets.linear_deltas(plane.width());
    let mut values = Vec::with_capacity(region.len());
    for y in region.y0..region.y0 + region.height {
        let row = y * plane.width();
        for x in region.x0..region.x0 + region.width {
            let idx = row + x;
            let prediction: f64 = deltas
                .iter()
                .zip(weights)
                .map(|(d, k)| k * data[(idx as isize + d) as usize])
                .sum();
            values.push((data[idx] - prediction).abs());
        }
    }
    Ok(Residuals { region, values })
}

/// Gaussian density of a residual, `exp(-R^2 / 2 sigma^2) / (sigma sqrt(2 pi))`.
#[inline]
pub fn gaussian_likelihood(residual: f64, sigma: f64) -> f64 {
    let z = residual / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

/// Membership weights `w = P / (P + p0)` under equal model priors.
pub fn expectation_step(residuals: &Residuals, sigma: f64, p0: f64) -> Result<WeightMap, EmError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(EmError::NonPositiveSigma(sigma));
    }
    if !(p0 > 0.0 && p0.is_finite()) {
        return Err(EmError::NonPositiveDensity(p0));
    }
    let values = residuals
        .values
        .iter()
        .map(|&r| {
            let p = gaussian_likelihood(r, sigma);
            p / (p + p0)
        })
        .collect();
    Ok(WeightMap {
        region: residuals.region,
        values,
    })
}

/// Weighted normal equations `A k = b` for a fixed weight map.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    /// Pixels that contributed with strictly positive weight.
    pub support: usize,
    pub weight_mass: f64,
}

impl NormalEquations {
    /// `A k - b`.
    pub fn residual(&self, k: &[f64]) -> DVector<f64> {
        &self.a * DVector::from_column_slice(k) - &self.b
    }
}

fn check_weight_map(
    plane: &ImagePlane,
    weights: &WeightMap,
    offsets: &NeighborhoodOffsets,
) -> Result<ValidRegion, EmError> {
    let region = offsets.valid_region(plane.width(), plane.height())?;
    if weights.region != region || weights.values.len() != region.len() {
        return Err(EmError::DimensionMismatch(
            "weight map does not cover the valid region of the plane".to_string(),
        ));
    }
    Ok(region)
}

pub fn normal_equations(
    plane: &ImagePlane,
    weights: &WeightMap,
    offsets: &NeighborhoodOffsets,
) -> Result<NormalEquations, EmError> {
    let region = check_weight_map(plane, weights, offsets)?;
    let dim = offsets.len();
    let data = plane.data();
    let deltas = offsets.linear_deltas(plane.width());

    // Upper triangle, row-major; mirrored afterwards.
    let mut a = vec![0.0; dim * dim];
    let mut b = vec![0.0; dim];
    let mut v = vec![0.0; dim];
    let mut support = 0;
    let mut mass = 0.0;
    let mut w_iter = weights.values.iter();
    for y in region.y0..region.y0 + region.height {
        let row = y * plane.width();
        for x in region.x0..region.x0 + region.width {
            let w = *w_iter.next().unwrap();
            if w <= 0.0 {
                continue;
            }
            support += 1;
            mass += w;
            let idx = (row + x) as isize;
            for (slot, d) in v.iter_mut().zip(&deltas) {
                *slot = data[(idx + d) as usize];
            }
            let center = data[idx as usize];
            for i in 0..dim {
                let wi = w * v[i];
                b[i] += wi * center;
                let a_row = &mut a[i * dim..(i + 1) * dim];
                for j in i..dim {
                    a_row[j] += wi * v[j];
                }
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            a[i * dim + j] = a[j * dim + i];
        }
    }
    Ok(NormalEquations {
        a: DMatrix::from_row_slice(dim, dim, &a),
        b: DVector::from_vec(b),
        support,
        weight_mass: mass,
    })
}

/// Solves `(A + ridge * tr(A)/dim * I) k = b` by Cholesky on the Jacobi-scaled system.
pub fn solve_regularized(eq: &NormalEquations, ridge: f64) -> Result<Vec<f64>, EmError> {
    let dim = eq.b.len();
    let shift = ridge * eq.a.trace() / dim as f64;
    let mut a = eq.a.clone();
    for i in 0..dim {
        a[(i, i)] += shift;
    }
    let scale: Vec<f64> = (0..dim)
        .map(|i| {
            let d = a[(i, i)];
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    if scale.contains(&0.0) {
        return Err(EmError::SingularSystem { min_pivot: 0.0 });
    }
    let scaled = DMatrix::from_fn(dim, dim, |i, j| a[(i, j)] * scale[i] * scale[j]);
    let chol = scaled.cholesky().ok_or(EmError::SingularSystem { min_pivot: 0.0 })?;
    let min_pivot = chol
        .l_dirty()
        .diagonal()
        .iter()
        .map(|d| d * d)
        .fold(f64::INFINITY, f64::min);
    if !(min_pivot >= SINGULAR_PIVOT) {
        return Err(EmError::SingularSystem { min_pivot });
    }
    let rhs = DVector::from_fn(dim, |i, _| eq.b[i] * scale[i]);
    let y = chol.solve(&rhs);
    let k: Vec<f64> = (0..dim).map(|i| y[i] * scale[i]).collect();
    if k.iter().any(|v| !v.is_finite()) {
        return Err(EmError::SingularSystem { min_pivot });
    }
    Ok(k)
}

/// Kernel minimising `E(k) = sum w (I - sum k I_nbr)^2` for fixed weights.
pub fn maximization_step(
    plane: &ImagePlane,
    weights: &WeightMap,
    offsets: &NeighborhoodOffsets,
    ridge: f64,
) -> Result<Vec<f64>, EmError> {
    let eq = normal_equations(plane, weights, offsets)?;
    let required = offsets.len();
    if eq.support < required || eq.weight_mass <= 0.0 {
        return Err(EmError::InsufficientSupport {
            positive: eq.support,
            required,
        });
    }
    solve_regularized(&eq, ridge)
}

/// Weighted squared prediction error `E(k)`.
pub fn weighted_error(
    plane: &ImagePlane,
    weights: &WeightMap,
    offsets: &NeighborhoodOffsets,
    kernel: &[f64],
) -> Result<f64, EmError> {
    check_weight_map(plane, weights, offsets)?;
    let r = residual_map(plane, offsets, kernel)?;
    Ok(r.values.iter().zip(&weights.values).map(|(r, w)| w * r * r).sum())
}

/// `sigma^2 = sum w R^2 / sum w`, clamped below by [`MIN_SIGMA`].
pub fn update_sigma(residuals: &Residuals, weights: &WeightMap) -> Result<f64, EmError> {
    if residuals.region != weights.region {
        return Err(EmError::DimensionMismatch(
            "residuals and weights cover different regions".to_string(),
        ));
    }
    let (num, den) = residuals
        .values
        .iter()
        .zip(&weights.values)
        .fold((0.0, 0.0), |(n, d), (r, w)| (n + w * r * r, d + w));
    if !(den > 0.0) {
        return Err(EmError::ZeroWeightMass);
    }
    Ok((num / den).sqrt().max(MIN_SIGMA))
}

/// Seeded uniform draw in `[-0.01, 0.01]` for every non-anchor weight.
pub fn initial_kernel(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| rng.random_range(-INIT_SPREAD..=INIT_SPREAD)).collect()
}

fn is_constant(plane: &ImagePlane) -> bool {
    let first = plane.data()[0];
    plane.data().iter().all(|v| *v == first)
}

/// Runs the EM loop on one plane.
pub fn em_fit(plane: &ImagePlane, cfg: &EmConfig) -> Result<KernelEstimate, EmError> {
    cfg.validate()?;
    let offsets = neighborhood_offsets(cfg.kernel_size)?;
    offsets.valid_region(plane.width(), plane.height())?;
    if is_constant(plane) {
        return Err(EmError::DegenerateInput);
    }

    let mut kernel = initial_kernel(offsets.len(), cfg.rng_seed);
    let mut sigma = cfg.sigma0;
    let mut residuals = residual_map(plane, &offsets, &kernel)?;
    let mut iterations_run = 0;
    let mut converged = false;

    for _ in 0..cfg.max_iters {
        iterations_run += 1;
        let weights = expectation_step(&residuals, sigma, cfg.p0)?;
        let next = maximization_step(plane, &weights, &offsets, cfg.ridge)?;
        residuals = residual_map(plane, &offsets, &next)?;
        sigma = update_sigma(&residuals, &weights)?;
        let delta = next.iter().zip(&kernel).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        kernel = next;
        if delta < cfg.convergence_tol {
            converged = true;
            break;
        }
    }

    Ok(KernelEstimate {
        kernel_size: cfg.kernel_size,
        weights: kernel,
        sigma,
        iterations_run,
        converged,
    })
}

/// Fits each channel independently in R, G, B order with the same configuration.
pub fn em_fit_rgb(img: &RgbImage, cfg: &EmConfig) -> Result<[KernelEstimate; 3], EmError> {
    let fit = |channel: Channel| {
        em_fit(&img.planes()[channel.index()], cfg).map_err(|e| EmError::Channel {
            channel,
            source: Box::new(e),
        })
    };
    Ok([fit(Channel::Red)?, fit(Channel::Green)?, fit(Channel::Blue)?])
}
