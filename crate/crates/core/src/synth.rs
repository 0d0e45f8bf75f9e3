//! Synthetic planes with planted pixel correlations.
//!
//! Pixels are produced in raster order. Each pixel is either an outlier drawn
//! from the base distribution, or the planted linear combination of its
//! already-generated causal neighbours plus Gaussian noise. Pixels whose causal
//! window leaves the plane are always drawn from the base distribution and
//! act as the seed border.
//!
//! Because the recursion is exact on every inlier, the full-window kernel
//! that reproduces the inliers is the causal planted kernel with zeros on the
//! non-causal offsets. That embedding is returned as the recovery target.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::em::{neighborhood_offsets, EmError, NeighborhoodOffsets, WeightMap};
use crate::imaging::{ImagePlane, RgbImage};

/// Upper bound on `sum |planted weight|` over the causal offsets.
pub const STABILITY_BOUND: f64 = 1.2;

/// Fraction of clamped pixels above which a spec is rejected as unstable.
pub const UNSTABLE_CLAMP_FRACTION: f64 = 0.5;

pub const GAUSSIAN_BASE_MEAN: f64 = 128.0;
pub const GAUSSIAN_BASE_STD: f64 = 40.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("recursion saturated {fraction:.3} of the pixels")]
    UnstableSpec { fraction: f64 },
    #[error("class specs must be distinct: {0}")]
    DuplicateSpec(String),
    #[error(transparent)]
    Kernel(#[from] EmError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("png encoding failed for {path}: {detail}")]
    Encode { path: PathBuf, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Base {
    /// Uniform on `[0, 255]`.
    IidUniform,
    /// Normal with mean 128 and standard deviation 40, clamped.
    IidGaussian,
    /// Deterministic `x + y`, clamped to 255.
    Ramp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub width: usize,
    pub height: usize,
    pub kernel_size: usize,
    /// Full-window weights aligned with the neighbourhood offsets; only the
    /// causal entries drive the generation.
    pub planted_kernel: Vec<f64>,
    pub noise_sigma: f64,
    pub base: Base,
    /// Probability that an interior pixel is drawn from the base instead of
    /// following the planted recursion.
    pub outlier_fraction: f64,
    #[serde(default)]
    pub rng_seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<NeighborhoodOffsets, SynthError> {
        let offsets = neighborhood_offsets(self.kernel_size)?;
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.planted_kernel.len() != offsets.len() {
            return bad(format!(
                "planted kernel has {} weights, {} expected for N={}",
                self.planted_kernel.len(),
                offsets.len(),
                self.kernel_size
            ));
        }
        if self.planted_kernel.iter().any(|w| !w.is_finite()) {
            return bad("planted kernel has non-finite weights".into());
        }
        if self.width < self.kernel_size || self.height < self.kernel_size {
            return bad(format!("plane {}x{} smaller than the window", self.width, self.height));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be >= 0", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return bad(format!("outlier_fraction {} outside [0, 1]", self.outlier_fraction));
        }
        let l1: f64 = causal_terms(&offsets, &self.planted_kernel).map(|(_, w)| w.abs()).sum();
        if l1 > STABILITY_BOUND + 1e-12 {
            return bad(format!("sum of |causal weights| is {l1:.4}, above {STABILITY_BOUND}"));
        }
        Ok(offsets)
    }

    /// The full-window kernel an exact estimator should recover.
    pub fn target_kernel(&self) -> Result<Vec<f64>, SynthError> {
        let offsets = self.validate()?;
        Ok(offsets
            .offsets()
            .iter()
            .zip(&self.planted_kernel)
            .map(|(&o, &w)| if NeighborhoodOffsets::is_causal(o) { w } else { 0.0 })
            .collect())
    }

    pub fn with_seed(&self, rng_seed: u64) -> Self {
        Self {
            rng_seed,
            ..self.clone()
        }
    }

    fn same_generator(&self, other: &Self) -> bool {
        self.with_seed(0) == other.with_seed(0)
    }
}

fn causal_terms<'a>(
    offsets: &'a NeighborhoodOffsets,
    weights: &'a [f64],
) -> impl Iterator<Item = ((isize, isize), f64)> + 'a {
    offsets
        .offsets()
        .iter()
        .zip(weights)
        .filter(|(o, _)| NeighborhoodOffsets::is_causal(**o))
        .map(|(o, w)| (*o, *w))
}

#[derive(Debug, Clone)]
pub struct SyntheticPlane {
    pub plane: ImagePlane,
    /// Recovery target aligned with the neighbourhood offsets.
    pub target_kernel: Vec<f64>,
    /// Row-major; true where the pixel follows the planted recursion.
    pub follows_relation: Vec<bool>,
    pub clamped_fraction: f64,
}

impl SyntheticPlane {
    /// Unit weight on every valid pixel that follows the planted relation,
    /// zero elsewhere.
    pub fn inlier_weights(&self, offsets: &NeighborhoodOffsets) -> Result<WeightMap, EmError> {
        let region = offsets.valid_region(self.plane.width(), self.plane.height())?;
        let width = self.plane.width();
        let values = region
            .pixels()
            .map(|(x, y)| if self.follows_relation[y * width + x] { 1.0 } else { 0.0 })
            .collect();
        Ok(WeightMap { region, values })
    }
}

/// Generates one plane from `spec`.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticPlane, SynthError> {
    let offsets = spec.validate()?;
    let (lo, hi) = offsets.span();
    let (width, height) = (spec.width, spec.height);
    let terms: Vec<(isize, f64)> = causal_terms(&offsets, &spec.planted_kernel)
        .map(|((s, t), w)| (t * width as isize + s, w))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mut data = vec![0.0; width * height];
    let mut follows = vec![false; width * height];
    let mut clamped = 0usize;

    for y in 0..height {
        for x in 0..width {
            // Fixed draw count per pixel keeps the stream position independent of the branch.
            let u: f64 = rng.random();
            let uniform: f64 = rng.random();
            let z: f64 = StandardNormal.sample(&mut rng);
            let noise: f64 = StandardNormal.sample(&mut rng);

            let idx = y * width + x;
            let border = (y as isize) < -lo || (x as isize) < -lo || (x as isize) > width as isize - 1 - hi;
            let raw = if border || u < spec.outlier_fraction {
                match spec.base {
                    Base::IidUniform => uniform * 255.0,
                    Base::IidGaussian => GAUSSIAN_BASE_MEAN + GAUSSIAN_BASE_STD * z,
                    Base::Ramp => (x + y) as f64,
                }
            } else {
                follows[idx] = true;
                let prediction: f64 = terms.iter().map(|(d, w)| w * data[(idx as isize + d) as usize]).sum();
                prediction + spec.noise_sigma * noise
            };
            let value = raw.clamp(0.0, 255.0);
            if value != raw {
                clamped += 1;
                follows[idx] = false;
            }
            data[idx] = value;
        }
    }

    let clamped_fraction = clamped as f64 / (width * height) as f64;
    if clamped_fraction > UNSTABLE_CLAMP_FRACTION {
        return Err(SynthError::UnstableSpec {
            fraction: clamped_fraction,
        });
    }
    if clamped_fraction > 0.01 {
        log::warn!(
            "synthetic plane clamped {:.2}% of pixels; planted-kernel recovery is unreliable",
            100.0 * clamped_fraction
        );
    }
    Ok(SyntheticPlane {
        plane: ImagePlane::new(width, height, data).expect("values clamped to [0, 255]"),
        target_kernel: spec.target_kernel()?,
        follows_relation: follows,
        clamped_fraction,
    })
}

/// Generates R, G and B planes from three specs of identical size.
pub fn generate_rgb(specs: &[SyntheticSpec; 3]) -> Result<(RgbImage, [SyntheticPlane; 3]), SynthError> {
    let [r, g, b] = specs;
    let planes = [generate(r)?, generate(g)?, generate(b)?];
    let img = RgbImage::from_planes(
        planes[0].plane.clone(),
        planes[1].plane.clone(),
        planes[2].plane.clone(),
        "synthetic",
    )
    .map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
    Ok((img, planes))
}

/// SplitMix64 finaliser, used to derive independent seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-channel specs for one image: same generator, seeds derived from `image_seed`.
pub fn channel_specs(template: &SyntheticSpec, image_seed: u64) -> [SyntheticSpec; 3] {
    [0u64, 1, 2].map(|c| template.with_seed(mix_seed(image_seed, c)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    #[serde(flatten)]
    pub spec: SyntheticSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    /// Relative to the corpus root.
    pub path: PathBuf,
    pub class: String,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub root: PathBuf,
    pub manifest_path: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Corpus {
    /// Class name to class directory, as consumed by the harness.
    pub fn class_dirs(&self) -> Vec<(String, PathBuf)> {
        let names: BTreeSet<&str> = self.entries.iter().map(|e| e.class.as_str()).collect();
        names.into_iter().map(|n| (n.to_string(), self.root.join(n))).collect()
    }
}

pub const MANIFEST_NAME: &str = "manifest.csv";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes an RGB PNG with values rounded to the nearest 8-bit level.
pub fn write_png(img: &RgbImage, path: &Path) -> Result<(), SynthError> {
    let [r, g, b] = img.planes();
    let q = |v: f64| v.round().clamp(0.0, 255.0) as u8;
    let buf = ImageBuffer::from_fn(img.width() as u32, img.height() as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([q(r.get(x, y)), q(g.get(x, y)), q(b.get(x, y))])
    });
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| SynthError::Encode {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
}

/// Writes `count` PNGs per class under `out/<class>/` plus `out/manifest.csv`
/// with one `path,class,seed` line per image.
pub fn make_labeled_corpus(classes: &[ClassSpec], count: usize, seed: u64, out: &Path) -> Result<Corpus, SynthError> {
    if classes.len() < 2 {
        return Err(SynthError::InvalidSpec("at least two classes are required".into()));
    }
    for (i, a) in classes.iter().enumerate() {
        a.spec.validate()?;
        if a.name.is_empty() || a.name.contains(['/', '\\', ',']) || a.name.starts_with('.') {
            return Err(SynthError::InvalidSpec(format!("bad class name {:?}", a.name)));
        }
        for b in &classes[i + 1..] {
            if a.name == b.name {
                return Err(SynthError::DuplicateSpec(format!("class name {}", a.name)));
            }
            if a.spec.same_generator(&b.spec) {
                return Err(SynthError::DuplicateSpec(format!(
                    "{} and {} have identical generators",
                    a.name, b.name
                )));
            }
        }
    }

    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut entries = Vec::with_capacity(classes.len() * count);
    for (ci, class) in classes.iter().enumerate() {
        let dir = out.join(&class.name);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for i in 0..count {
            let image_seed = mix_seed(mix_seed(seed, ci as u64), i as u64);
            let (img, _) = generate_rgb(&channel_specs(&class.spec, image_seed))?;
            let rel = PathBuf::from(&class.name).join(format!("img_{i:05}.png"));
            write_png(&img, &out.join(&rel))?;
            entries.push(ManifestEntry {
                path: rel,
                class: class.name.clone(),
                seed: image_seed,
            });
        }
    }

    let manifest_path = out.join(MANIFEST_NAME);
    let mut f = fs::File::create(&manifest_path).map_err(io_err(&manifest_path))?;
    for e in &entries {
        writeln!(
            f,
            "{},{},{}",
            e.path.to_string_lossy().replace('\\', "/"),
            e.class,
            e.seed
        )
        .map_err(io_err(&manifest_path))?;
    }
    Ok(Corpus {
        root: out.to_path_buf(),
        manifest_path,
        entries,
    })
}

/// Reference generator configurations used by the test suites and the
/// sample class file.
pub mod fixtures {
    use super::*;

    /// Outlier rate of the reference specs.
    pub const OUTLIER_FRACTION: f64 = 0.15;

    fn place(kernel_size: usize, entries: &[((isize, isize), f64)]) -> Vec<f64> {
        let offsets = neighborhood_offsets(kernel_size).expect("fixture kernel size");
        let mut k = vec![0.0; offsets.len()];
        for &((s, t), w) in entries {
            k[offsets.position(s, t).expect("fixture offset")] = w;
        }
        k
    }

    /// Planted causal kernels for `kernel_size` 3 or 5: `variant` 0 and 1
    /// are the two reference classes.
    pub fn planted_kernel(kernel_size: usize, variant: usize) -> Vec<f64> {
        match (kernel_size, variant % 2) {
            (3, 0) => place(3, &[((-1, 0), 0.55), ((0, -1), 0.45), ((-1, -1), -0.1), ((1, -1), 0.1)]),
            (3, _) => place(3, &[((-1, 0), 0.3), ((0, -1), 0.3), ((-1, -1), 0.2), ((1, -1), 0.2)]),
            (5, 0) => place(
                5,
                &[
                    ((-1, 0), 0.4),
                    ((0, -1), 0.3),
                    ((-2, 0), 0.1),
                    ((0, -2), 0.1),
                    ((-1, -1), -0.05),
                    ((1, -1), 0.1),
                    ((2, -2), 0.05),
                ],
            ),
            (5, _) => place(
                5,
                &[
                    ((-1, 0), 0.25),
                    ((0, -1), 0.25),
                    ((-2, -1), 0.15),
                    ((2, -1), 0.15),
                    ((-1, -2), 0.1),
                    ((1, -2), 0.1),
                ],
            ),
            _ => panic!("no fixture kernel for N={kernel_size}"),
        }
    }

    pub fn plane_spec(kernel_size: usize, variant: usize, size: usize, noise_sigma: f64, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            width: size,
            height: size,
            kernel_size,
            planted_kernel: planted_kernel(kernel_size, variant),
            noise_sigma,
            base: Base::IidUniform,
            outlier_fraction: OUTLIER_FRACTION,
            rng_seed: seed,
        }
    }

    /// Class specs of the reference two-class corpus at `kernel_size` 3.
    pub fn two_class_corpus(size: usize, noise_sigma: f64) -> Vec<ClassSpec> {
        vec![
            ClassSpec {
                name: "class_a".into(),
                spec: plane_spec(3, 0, size, noise_sigma, 0),
            },
            ClassSpec {
                name: "class_b".into(),
                spec: plane_spec(3, 1, size, noise_sigma, 0),
            },
        ]
    }
}
