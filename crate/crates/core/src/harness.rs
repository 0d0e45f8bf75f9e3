//! End-to-end experiments: scan labelled image directories, extract kernel
//! features in parallel, split, train, evaluate and render accuracy tables.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::{self, evaluate, save_model, ClassifierSpec, ClassifyError, EvalReport};
use crate::em::{em_fit_rgb, EmConfig, EmError};
use crate::features::{assemble, save_features, FeatureError, FeatureSet, FeatureVector};
use crate::imaging::decode_image;

pub const DEFAULT_TEST_FRACTION: f64 = 0.3;

/// Best cells of the published CELEBA-vs-GAN accuracy grid, as
/// (pair, classifier, kernel size, accuracy %). Reproducing them needs the
/// original corpora; expect agreement within about 3 points.
pub const REFERENCE_RESULTS: &[(&str, &str, usize, f64)] = &[
    ("CELEBA vs ATTGAN", "3-NN", 3, 92.67),
    ("CELEBA vs GDWCT", "3-NN", 3, 88.40),
    ("CELEBA vs STARGAN", "SVM-linear", 7, 93.17),
    ("CELEBA vs STYLEGAN", "3-NN", 4, 99.65),
    ("CELEBA vs STYLEGAN2", "SVM-linear", 4, 99.81),
];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("corpus directory {0} does not exist")]
    MissingDirectory(PathBuf),
    #[error("class {0} has no PNG or JPEG images")]
    EmptyClass(String),
    #[error("{path} is listed under both {first} and {second}")]
    DuplicatePath {
        path: PathBuf,
        first: String,
        second: String,
    },
    #[error("all {attempted} images failed feature extraction")]
    AllImagesFailed { attempted: usize },
    #[error("class {class} has {count} records, at least 2 needed to split")]
    ClassTooSmall { class: String, count: usize },
    #[error("test fraction must lie in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot walk {path}: {source}")]
    Walk {
        path: PathBuf,
        #[source]
        source: walkdir::Error,
    },
    #[error("{path}: {source}")]
    ConfigParse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error(transparent)]
    Em(#[from] EmError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error("{classifier}, N={kernel_size}, repeat {repeat}: {source}")]
    Cell {
        classifier: String,
        kernel_size: usize,
        repeat: usize,
        #[source]
        source: Box<HarnessError>,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledImage {
    pub path: PathBuf,
    pub label: String,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

/// Recursively lists PNG and JPEG files under each class root, sorted by
/// path. A file reachable from two roots is an error.
pub fn scan_corpus(roots: &[(String, PathBuf)]) -> Result<Vec<LabeledImage>, HarnessError> {
    let mut seen: HashMap<PathBuf, String> = HashMap::new();
    let mut out = Vec::new();
    for (class, root) in roots {
        if !root.is_dir() {
            return Err(HarnessError::MissingDirectory(root.clone()));
        }
        let mut found = 0;
        for entry in walkdir::WalkDir::new(root).follow_links(true).sort_by_file_name() {
            let entry = entry.map_err(|source| HarnessError::Walk {
                path: root.clone(),
                source,
            })?;
            if !entry.file_type().is_file() || !is_image(entry.path()) {
                continue;
            }
            let canonical = entry.path().canonicalize().map_err(io_err(entry.path()))?;
            if let Some(first) = seen.insert(canonical, class.clone()) {
                return Err(HarnessError::DuplicatePath {
                    path: entry.path().to_path_buf(),
                    first,
                    second: class.clone(),
                });
            }
            out.push(LabeledImage {
                path: entry.path().to_path_buf(),
                label: class.clone(),
            });
            found += 1;
        }
        if found == 0 {
            return Err(HarnessError::EmptyClass(class.clone()));
        }
    }
    out.sort_by(|a, b| a.path.cmp(&b.path).then_with(|| a.label.cmp(&b.label)));
    Ok(out)
}

/// Keeps the first `cap` images of each class in scan order.
pub fn cap_per_class(images: Vec<LabeledImage>, cap: usize) -> Vec<LabeledImage> {
    let mut taken: HashMap<String, usize> = HashMap::new();
    images
        .into_iter()
        .filter(|img| {
            let n = taken.entry(img.label.clone()).or_insert(0);
            *n += 1;
            *n <= cap
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtractionSummary {
    pub attempted: usize,
    pub succeeded: usize,
    /// Skipped images with the reason.
    pub failures: Vec<(PathBuf, String)>,
    /// Successful images per source format.
    pub formats: BTreeMap<String, usize>,
    /// Successful images decoded from single-channel files.
    pub grayscale: usize,
}

fn extract_one(img: &LabeledImage, cfg: &EmConfig) -> Result<(FeatureVector, String, bool), String> {
    let rgb = decode_image(&img.path).map_err(|e| e.to_string())?;
    let est = em_fit_rgb(&rgb, cfg).map_err(|e| e.to_string())?;
    let fv = assemble(&est, img.label.clone(), img.path.to_string_lossy()).map_err(|e| e.to_string())?;
    Ok((fv, rgb.source_format().to_string(), rgb.grayscale_source()))
}

/// Worker count for `jobs`; zero means all available cores.
pub fn resolve_jobs(jobs: usize) -> usize {
    if jobs > 0 {
        jobs
    } else {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    }
}

/// Extracts one feature vector per image on a pool of `jobs` workers.
/// Failing images are skipped and logged; output order follows `images`.
pub fn extract_all(
    images: &[LabeledImage],
    cfg: &EmConfig,
    jobs: usize,
) -> Result<(FeatureSet, ExtractionSummary), HarnessError> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(HarnessError::AllImagesFailed { attempted: 0 });
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(resolve_jobs(jobs))
        .build()
        .map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
    let results: Vec<_> = pool.install(|| images.par_iter().map(|img| extract_one(img, cfg)).collect());

    let mut summary = ExtractionSummary {
        attempted: images.len(),
        ..Default::default()
    };
    let mut records = Vec::with_capacity(images.len());
    for (img, res) in images.iter().zip(results) {
        match res {
            Ok((fv, format, gray)) => {
                *summary.formats.entry(format).or_insert(0) += 1;
                summary.grayscale += usize::from(gray);
                records.push(fv);
            }
            Err(reason) => {
                warn!("skipping {}: {reason}", img.path.display());
                summary.failures.push((img.path.clone(), reason));
            }
        }
    }
    summary.succeeded = records.len();
    if records.is_empty() {
        return Err(HarnessError::AllImagesFailed {
            attempted: images.len(),
        });
    }
    Ok((FeatureSet::new(cfg.kernel_size, records)?, summary))
}

/// Per-class seeded shuffle; `ceil(fraction * count)` records of each class
/// go to the test set, capped so at least one stays in training. Both halves
/// keep the original record order.
pub fn stratified_split(
    fs: &FeatureSet,
    test_fraction: f64,
    seed: u64,
) -> Result<(FeatureSet, FeatureSet), HarnessError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(HarnessError::InvalidFraction(test_fraction));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_test = vec![false; fs.len()];
    for class in fs.class_names() {
        let mut idx: Vec<usize> = fs
            .records()
            .iter()
            .enumerate()
            .filter(|(_, r)| &r.label == class)
            .map(|(i, _)| i)
            .collect();
        if idx.len() < 2 {
            return Err(HarnessError::ClassTooSmall {
                class: class.clone(),
                count: idx.len(),
            });
        }
        idx.shuffle(&mut rng);
        let n_test = ((test_fraction * idx.len() as f64).ceil() as usize).min(idx.len() - 1);
        for &i in &idx[..n_test] {
            is_test[i] = true;
        }
    }
    let (test, train): (Vec<usize>, Vec<usize>) = (0..fs.len()).partition(|&i| is_test[i]);
    Ok((fs.subset(&train), fs.subset(&test)))
}

/// A classifier spec plus its standardization flag. Written as the spec
/// string with an optional `@std` or `@raw` suffix, e.g. `knn:3@std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ClassifierEntry {
    pub spec: ClassifierSpec,
    pub standardize: bool,
}

impl ClassifierEntry {
    pub fn new(spec: ClassifierSpec) -> Self {
        let standardize = spec.standardize_by_default();
        Self { spec, standardize }
    }

    /// Table row label; non-default scaling is marked.
    pub fn label(&self) -> String {
        let name = self.spec.display_name();
        match (self.standardize, self.spec.standardize_by_default()) {
            (true, false) => format!("{name} (std)"),
            (false, true) => format!("{name} (raw)"),
            _ => name,
        }
    }
}

impl fmt::Display for ClassifierEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.spec, if self.standardize { "std" } else { "raw" })
    }
}

impl FromStr for ClassifierEntry {
    type Err = ClassifyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (spec, flag) = match s.rsplit_once('@') {
            Some((spec, flag)) => (spec, Some(flag.trim())),
            None => (s, None),
        };
        let mut entry = ClassifierEntry::new(spec.parse()?);
        match flag {
            None => {}
            Some("std") => entry.standardize = true,
            Some("raw") => entry.standardize = false,
            Some(_) => return Err(ClassifyError::BadSpec(s.to_string())),
        }
        Ok(entry)
    }
}

impl TryFrom<String> for ClassifierEntry {
    type Error = ClassifyError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<ClassifierEntry> for String {
    fn from(e: ClassifierEntry) -> String {
        e.to_string()
    }
}

fn default_kernel_sizes() -> Vec<usize> {
    vec![3, 4, 5, 7]
}

fn default_test_fraction() -> f64 {
    DEFAULT_TEST_FRACTION
}

fn default_repeats() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Class name to image directory.
    pub corpus: BTreeMap<String, PathBuf>,
    #[serde(default = "default_kernel_sizes")]
    pub kernel_sizes: Vec<usize>,
    pub classifiers: Vec<ClassifierEntry>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    /// Repeat `r` splits with `seed + r`.
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub max_images_per_class: Option<usize>,
    /// Extraction workers; zero or absent uses every core.
    #[serde(default)]
    pub jobs: Option<usize>,
    /// EM settings; `kernel_size` is overridden per column.
    #[serde(default)]
    pub em: EmConfig,
    /// Where features, models, reports and tables are written.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Evaluate on the training set itself. Only useful as a pipeline check.
    #[serde(default)]
    pub smoke: bool,
}

impl ExperimentConfig {
    pub fn new(corpus: BTreeMap<String, PathBuf>, classifiers: Vec<ClassifierEntry>) -> Self {
        Self {
            corpus,
            kernel_sizes: default_kernel_sizes(),
            classifiers,
            test_fraction: DEFAULT_TEST_FRACTION,
            seed: 0,
            repeats: 1,
            max_images_per_class: None,
            jobs: None,
            em: EmConfig::default(),
            output_dir: None,
            smoke: false,
        }
    }

    pub fn from_toml(text: &str, path: &Path) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|source| HarnessError::ConfigParse {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Reads a TOML file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::from_toml(&text, path)?;
        cfg.resolve_relative(path.parent().unwrap_or(Path::new("")));
        Ok(cfg)
    }

    /// Joins relative corpus and output paths onto `base`.
    pub fn resolve_relative(&mut self, base: &Path) {
        for dir in self.corpus.values_mut() {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
        if let Some(out) = self.output_dir.as_mut() {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidConfig(m));
        if self.corpus.len() < 2 {
            return bad(format!("need at least 2 classes, got {}", self.corpus.len()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(HarnessError::InvalidFraction(self.test_fraction));
        }
        if self.kernel_sizes.is_empty() {
            return bad("no kernel sizes".into());
        }
        if let Some(n) = self.kernel_sizes.iter().find(|&&n| n < 2) {
            return bad(format!("kernel size {n} is below 2"));
        }
        if self.classifiers.is_empty() {
            return bad("no classifiers".into());
        }
        if self.repeats == 0 {
            return bad("repeats must be at least 1".into());
        }
        if self.max_images_per_class == Some(0) {
            return bad("max_images_per_class must be at least 1".into());
        }
        self.em.validate()?;
        Ok(())
    }

    /// Settings echoed under rendered tables. Paths, worker count and
    /// output location are left out so they do not affect the output.
    pub fn echo(&self) -> Vec<(String, String)> {
        let list = |v: Vec<String>| v.join(" ");
        vec![
            ("classes".into(), list(self.corpus.keys().cloned().collect())),
            (
                "kernel_sizes".into(),
                list(self.kernel_sizes.iter().map(|n| n.to_string()).collect()),
            ),
            (
                "classifiers".into(),
                list(self.classifiers.iter().map(|c| c.to_string()).collect()),
            ),
            ("test_fraction".into(), self.test_fraction.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("repeats".into(), self.repeats.to_string()),
            (
                "max_images_per_class".into(),
                self.max_images_per_class.map_or("none".into(), |n| n.to_string()),
            ),
            (
                "em".into(),
                format!(
                    "max_iters={} sigma0={} p0={} tol={} ridge={} seed={}",
                    self.em.max_iters,
                    self.em.sigma0,
                    self.em.p0,
                    self.em.convergence_tol,
                    self.em.ridge,
                    self.em.rng_seed
                ),
            ),
            ("smoke".into(), self.smoke.to_string()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub kernel_size: usize,
    /// Accuracy per repeat, in percent.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; zero for a single repeat.
    pub std: f64,
    pub reports: Vec<EvalReport>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub scan_secs: f64,
    /// Per kernel size, in column order.
    pub extraction_secs: Vec<f64>,
    pub training_secs: f64,
    pub evaluation_secs: f64,
    pub total_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    /// Row labels.
    pub classifiers: Vec<String>,
    /// Column order.
    pub kernel_sizes: Vec<usize>,
    /// `cells[row][column]`.
    pub cells: Vec<Vec<Cell>>,
    pub config: Vec<(String, String)>,
    /// Per kernel size, in column order.
    pub extraction: Vec<ExtractionSummary>,
    pub timings: Timings,
}

impl ResultsTable {
    pub fn cell(&self, classifier: &str, kernel_size: usize) -> Option<&Cell> {
        let r = self.classifiers.iter().position(|c| c == classifier)?;
        let c = self.kernel_sizes.iter().position(|&n| n == kernel_size)?;
        Some(&self.cells[r][c])
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Lowercase alphanumeric runs joined by single underscores.
fn slug(s: &str) -> String {
    s.split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|part| !part.is_empty())
        .map(str::to_ascii_lowercase)
        .collect::<Vec<_>>()
        .join("_")
}

/// Runs the full kernel size × classifier grid.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultsTable, HarnessError> {
    cfg.validate()?;
    let started = Instant::now();
    let mut timings = Timings::default();

    let roots: Vec<(String, PathBuf)> = cfg.corpus.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    let t = Instant::now();
    let mut images = scan_corpus(&roots)?;
    if let Some(cap) = cfg.max_images_per_class {
        images = cap_per_class(images, cap);
    }
    timings.scan_secs = t.elapsed().as_secs_f64();
    info!("{} images across {} classes", images.len(), roots.len());

    if let Some(dir) = &cfg.output_dir {
        fs::create_dir_all(dir.join("models")).map_err(io_err(dir))?;
        fs::create_dir_all(dir.join("reports")).map_err(io_err(dir))?;
    }

    let rows: Vec<String> = cfg.classifiers.iter().map(ClassifierEntry::label).collect();
    let mut cells: Vec<Vec<Cell>> = vec![Vec::new(); rows.len()];
    let mut extraction = Vec::new();

    for &n in &cfg.kernel_sizes {
        let em = EmConfig {
            kernel_size: n,
            ..cfg.em.clone()
        };
        let t = Instant::now();
        let (features, summary) = extract_all(&images, &em, cfg.jobs.unwrap_or(0))?;
        timings.extraction_secs.push(t.elapsed().as_secs_f64());
        info!("N={n}: extracted {}/{} images", summary.succeeded, summary.attempted);
        if let Some(dir) = &cfg.output_dir {
            save_features(&features, dir.join(format!("features_n{n}.csv")))?;
        }
        extraction.push(summary);

        let mut accuracies = vec![Vec::new(); rows.len()];
        let mut reports = vec![Vec::new(); rows.len()];
        for repeat in 0..cfg.repeats {
            let split_seed = cfg.seed.wrapping_add(repeat as u64);
            let (train, test) = if cfg.smoke {
                (features.clone(), features.clone())
            } else {
                stratified_split(&features, cfg.test_fraction, split_seed)?
            };
            for (row, entry) in cfg.classifiers.iter().enumerate() {
                let cell_err = |e: HarnessError| HarnessError::Cell {
                    classifier: rows[row].clone(),
                    kernel_size: n,
                    repeat,
                    source: Box::new(e),
                };
                let t = Instant::now();
                let model = classify::train(&entry.spec, entry.standardize, &train).map_err(|e| cell_err(e.into()))?;
                timings.training_secs += t.elapsed().as_secs_f64();
                let t = Instant::now();
                let mut report = evaluate(&model, &test).map_err(|e| cell_err(e.into()))?;
                timings.evaluation_secs += t.elapsed().as_secs_f64();
                report.classifier = rows[row].clone();
                report.split_seed = Some(split_seed);

                if let Some(dir) = &cfg.output_dir {
                    let stem = format!("{}_n{n}_r{repeat}", slug(&rows[row]));
                    save_model(&model, &dir.join("models").join(format!("{stem}.json")))
                        .map_err(|e| cell_err(e.into()))?;
                    let path = dir.join("reports").join(format!("{stem}.json"));
                    let json = serde_json::to_string_pretty(&report)
                        .map_err(|e| cell_err(HarnessError::InvalidConfig(e.to_string())))?;
                    fs::write(&path, json + "\n").map_err(|e| cell_err(io_err(&path)(e)))?;
                }
                accuracies[row].push(report.accuracy);
                reports[row].push(report);
            }
        }
        for (row, (acc, reps)) in accuracies.into_iter().zip(reports).enumerate() {
            let (mean, std) = mean_std(&acc);
            cells[row].push(Cell {
                kernel_size: n,
                accuracies: acc,
                mean,
                std,
                reports: reps,
            });
        }
    }
    timings.total_secs = started.elapsed().as_secs_f64();

    let table = ResultsTable {
        classifiers: rows,
        kernel_sizes: cfg.kernel_sizes.clone(),
        cells,
        config: cfg.echo(),
        extraction,
        timings,
    };
    if let Some(dir) = &cfg.output_dir {
        for format in [TableFormat::Markdown, TableFormat::Csv] {
            let path = dir.join(format!("results.{}", format.extension()));
            fs::write(&path, render_table(&table, format)).map_err(io_err(&path))?;
        }
        let path = dir.join("timings.json");
        let json =
            serde_json::to_string_pretty(&table.timings).map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
        fs::write(&path, json + "\n").map_err(io_err(&path))?;
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    Markdown,
    Csv,
}

impl TableFormat {
    pub fn extension(self) -> &'static str {
        match self {
            TableFormat::Markdown => "md",
            TableFormat::Csv => "csv",
        }
    }
}

impl FromStr for TableFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "markdown" | "md" => Ok(TableFormat::Markdown),
            "csv" => Ok(TableFormat::Csv),
            _ => Err(format!("unknown table format {s:?} (expected markdown or csv)")),
        }
    }
}

/// Accuracy table with classifiers as rows and kernel sizes as columns,
/// two decimals per cell, followed by the config echo. Timings are not
/// rendered so identical runs render identically.
pub fn render_table(rt: &ResultsTable, format: TableFormat) -> String {
    let repeated = rt.cells.iter().flatten().any(|c| c.accuracies.len() > 1);
    let mut out = String::new();
    match format {
        TableFormat::Markdown => {
            out.push_str("| Classifier |");
            for n in &rt.kernel_sizes {
                out.push_str(&format!(" {n}x{n} |"));
            }
            out.push_str("\n|---|");
            out.push_str(&"---:|".repeat(rt.kernel_sizes.len()));
            out.push('\n');
            for (label, row) in rt.classifiers.iter().zip(&rt.cells) {
                out.push_str(&format!("| {label} |"));
                for cell in row {
                    if repeated {
                        out.push_str(&format!(" {:.2} ± {:.2} |", cell.mean, cell.std));
                    } else {
                        out.push_str(&format!(" {:.2} |", cell.mean));
                    }
                }
                out.push('\n');
            }
            out.push('\n');
            for (k, v) in &rt.config {
                out.push_str(&format!("- {k}: {v}\n"));
            }
        }
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header = vec!["classifier".to_string()];
            for n in &rt.kernel_sizes {
                header.push(format!("n{n}_mean"));
                header.push(format!("n{n}_std"));
            }
            w.write_record(&header).expect("in-memory write");
            for (label, row) in rt.classifiers.iter().zip(&rt.cells) {
                let mut rec = vec![label.clone()];
                for cell in row {
                    rec.push(format!("{:.2}", cell.mean));
                    rec.push(format!("{:.2}", cell.std));
                }
                w.write_record(&rec).expect("in-memory write");
            }
            out = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8");
            for (k, v) in &rt.config {
                out.push_str(&format!("# {k}={v}\n"));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{fixtures, make_labeled_corpus};

    fn touch(path: &Path) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(path, b"x").unwrap();
    }

    #[test]
    fn slugs() {
        assert_eq!(slug("LDA (raw)"), "lda_raw");
        assert_eq!(slug("SVM-linear"), "svm_linear");
        assert_eq!(slug("3-NN"), "3_nn");
    }

    #[test]
    fn scan_finds_nested_images_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        touch(&a.join("z.png"));
        touch(&a.join("sub/b.JPG"));
        touch(&a.join("a.jpeg"));
        touch(&a.join("notes.txt"));
        let b = dir.path().join("b");
        touch(&b.join("1.png"));
        let found = scan_corpus(&[("a".into(), a.clone()), ("b".into(), b.clone())]).unwrap();
        let names: Vec<_> = found
            .iter()
            .map(|i| i.path.strip_prefix(dir.path()).unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, ["a/a.jpeg", "a/sub/b.JPG", "a/z.png", "b/1.png"]);
        assert!(found[..3].iter().all(|i| i.label == "a"));
    }

    #[test]
    fn scan_errors() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        touch(&a.join("x.png"));
        let empty = dir.path().join("empty");
        fs::create_dir_all(&empty).unwrap();
        match scan_corpus(&[("a".into(), a.clone()), ("e".into(), empty)]) {
            Err(HarnessError::EmptyClass(c)) => assert_eq!(c, "e"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            scan_corpus(&[("a".into(), a.clone()), ("b".into(), a.clone())]),
            Err(HarnessError::DuplicatePath { .. })
        ));
        assert!(matches!(
            scan_corpus(&[("m".into(), dir.path().join("missing"))]),
            Err(HarnessError::MissingDirectory(_))
        ));
    }

    fn records(counts: &[(&str, usize)]) -> FeatureSet {
        let mut recs = Vec::new();
        for (label, n) in counts {
            for i in 0..*n {
                recs.push(FeatureVector {
                    kernel_size: 3,
                    values: vec![i as f64; 24],
                    label: label.to_string(),
                    source: format!("{label}{i}"),
                });
            }
        }
        FeatureSet::new(3, recs).unwrap()
    }

    #[test]
    fn split_sizes_and_partition() {
        let fs = records(&[("a", 10), ("b", 10)]);
        let (train, test) = stratified_split(&fs, 0.3, 7).unwrap();
        assert_eq!(test.class_counts(), vec![("a".into(), 3), ("b".into(), 3)]);
        assert_eq!(train.class_counts(), vec![("a".into(), 7), ("b".into(), 7)]);
        let mut all: Vec<_> = train
            .records()
            .iter()
            .chain(test.records())
            .map(|r| r.source.clone())
            .collect();
        all.sort();
        let mut orig: Vec<_> = fs.records().iter().map(|r| r.source.clone()).collect();
        orig.sort();
        assert_eq!(all, orig);
        assert_eq!(stratified_split(&fs, 0.3, 7).unwrap(), (train, test));
    }

    #[test]
    fn split_edge_cases() {
        let fs = records(&[("a", 2), ("b", 1)]);
        assert!(matches!(
            stratified_split(&fs, 0.3, 0),
            Err(HarnessError::ClassTooSmall { count: 1, .. })
        ));
        let fs = records(&[("a", 2), ("b", 2)]);
        let (train, test) = stratified_split(&fs, 0.9, 0).unwrap();
        assert_eq!((train.len(), test.len()), (2, 2));
        assert!(matches!(
            stratified_split(&fs, 1.0, 0),
            Err(HarnessError::InvalidFraction(_))
        ));
    }

    #[test]
    fn classifier_entries() {
        let e: ClassifierEntry = "knn:3".parse().unwrap();
        assert!(!e.standardize);
        assert_eq!(e.label(), "3-NN");
        let e: ClassifierEntry = "knn:3@std".parse().unwrap();
        assert_eq!(e.label(), "3-NN (std)");
        let e: ClassifierEntry = "svm:linear@raw".parse().unwrap();
        assert_eq!(e.label(), "SVM-linear (raw)");
        assert_eq!(e.to_string().parse::<ClassifierEntry>().unwrap(), e);
        assert!("knn:3@maybe".parse::<ClassifierEntry>().is_err());
    }

    #[test]
    fn config_from_toml() {
        let text = r#"
            classifiers = ["svm:linear", "knn:3"]
            kernel_sizes = [3]
            seed = 4
            repeats = 2
            [corpus]
            real = "data/real"
            fake = "/abs/fake"
            [em]
            max_iters = 50
        "#;
        let cfg = ExperimentConfig::from_toml(text, Path::new("x.toml")).unwrap();
        assert_eq!(cfg.test_fraction, 0.3);
        assert_eq!(cfg.em.max_iters, 50);
        assert_eq!(cfg.em.sigma0, 5.0);
        assert_eq!(cfg.classifiers.len(), 2);
        cfg.validate().unwrap();
        assert!(ExperimentConfig::from_toml("classifiers = []\nbogus = 1\n[corpus]\n", Path::new("x")).is_err());
    }

    #[test]
    fn extraction_skips_bad_images_and_keeps_order() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = make_labeled_corpus(&fixtures::two_class_corpus(48, 2.0), 2, 5, dir.path()).unwrap();
        let mut images = scan_corpus(&corpus.class_dirs()).unwrap();
        // A constant image is degenerate for EM.
        let flat = dir.path().join("class_a/flat.png");
        image::RgbImage::from_pixel(48, 48, image::Rgb([9, 9, 9]))
            .save(&flat)
            .unwrap();
        let corrupt = dir.path().join("class_b/broken.png");
        fs::write(&corrupt, b"\x89PNG\r\n\x1a\nnope").unwrap();
        images.push(LabeledImage {
            path: flat.clone(),
            label: "class_a".into(),
        });
        images.push(LabeledImage {
            path: corrupt,
            label: "class_b".into(),
        });
        let cfg = EmConfig::default();
        let (fs1, summary) = extract_all(&images, &cfg, 1).unwrap();
        assert_eq!(summary.attempted, 6);
        assert_eq!(summary.succeeded, 4);
        assert_eq!(summary.failures.len(), 2);
        assert_eq!(summary.formats.get("png"), Some(&4));
        assert_eq!(fs1.dim(), 24);
        let sources: Vec<_> = fs1.records().iter().map(|r| r.source.clone()).collect();
        let expected: Vec<_> = images[..4]
            .iter()
            .map(|i| i.path.to_string_lossy().into_owned())
            .collect();
        assert_eq!(sources, expected);
        let (fs4, _) = extract_all(&images, &cfg, 4).unwrap();
        assert_eq!(fs1, fs4);

        let only_bad = vec![images[5].clone()];
        assert!(matches!(
            extract_all(&only_bad, &cfg, 1),
            Err(HarnessError::AllImagesFailed { attempted: 1 })
        ));
    }

    fn tiny_table() -> ResultsTable {
        ResultsTable {
            classifiers: vec!["SVM-linear".into(), "3-NN".into()],
            kernel_sizes: vec![5, 3],
            cells: vec![
                vec![
                    Cell {
                        kernel_size: 5,
                        accuracies: vec![99.0, 98.0],
                        mean: 98.5,
                        std: std::f64::consts::FRAC_1_SQRT_2,
                        reports: vec![],
                    },
                    Cell {
                        kernel_size: 3,
                        accuracies: vec![100.0, 100.0],
                        mean: 100.0,
                        std: 0.0,
                        reports: vec![],
                    },
                ],
                vec![
                    Cell {
                        kernel_size: 5,
                        accuracies: vec![90.0, 91.0],
                        mean: 90.5,
                        std: std::f64::consts::FRAC_1_SQRT_2,
                        reports: vec![],
                    },
                    Cell {
                        kernel_size: 3,
                        accuracies: vec![95.555, 95.555],
                        mean: 95.555,
                        std: 0.0,
                        reports: vec![],
                    },
                ],
            ],
            config: vec![("seed".into(), "1".into())],
            extraction: vec![],
            timings: Timings::default(),
        }
    }

    #[test]
    fn markdown_layout() {
        let md = render_table(&tiny_table(), TableFormat::Markdown);
        let lines: Vec<_> = md.lines().collect();
        assert_eq!(lines[0], "| Classifier | 5x5 | 3x3 |");
        assert_eq!(lines[2], "| SVM-linear | 98.50 ± 0.71 | 100.00 ± 0.00 |");
        assert!(md.ends_with("- seed: 1\n"));
    }

    #[test]
    fn csv_round_trip() {
        let rt = tiny_table();
        let text = render_table(&rt, TableFormat::Csv);
        let mut r = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        assert_eq!(
            r.headers().unwrap().iter().collect::<Vec<_>>(),
            ["classifier", "n5_mean", "n5_std", "n3_mean", "n3_std"]
        );
        for (row, rec) in r.records().enumerate() {
            let rec = rec.unwrap();
            assert_eq!(&rec[0], rt.classifiers[row]);
            for (col, cell) in rt.cells[row].iter().enumerate() {
                let mean: f64 = rec[1 + 2 * col].parse().unwrap();
                assert!((mean - cell.mean).abs() <= 0.005 + 1e-9);
            }
        }
    }

    #[test]
    fn single_cell_markdown() {
        let mut rt = tiny_table();
        rt.classifiers.truncate(1);
        rt.kernel_sizes.truncate(1);
        rt.cells = vec![vec![Cell {
            kernel_size: 5,
            accuracies: vec![87.5],
            mean: 87.5,
            std: 0.0,
            reports: vec![],
        }]];
        let md = render_table(&rt, TableFormat::Markdown);
        assert!(md.starts_with("| Classifier | 5x5 |\n|---|---:|\n| SVM-linear | 87.50 |\n"));
    }

    #[test]
    fn smoke_experiment_is_perfect_for_1nn() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = make_labeled_corpus(&fixtures::two_class_corpus(48, 2.0), 3, 1, &dir.path().join("c")).unwrap();
        let mut cfg = ExperimentConfig::new(
            corpus.class_dirs().into_iter().collect(),
            vec!["knn:1".parse().unwrap()],
        );
        cfg.kernel_sizes = vec![3];
        cfg.smoke = true;
        cfg.output_dir = Some(dir.path().join("out"));
        let rt = run_experiment(&cfg).unwrap();
        assert_eq!(rt.cell("1-NN", 3).unwrap().mean, 100.0);
        let out = dir.path().join("out");
        for f in [
            "results.md",
            "results.csv",
            "timings.json",
            "features_n3.csv",
            "models/1_nn_n3_r0.json",
            "reports/1_nn_n3_r0.json",
        ] {
            assert!(out.join(f).is_file(), "{f}");
        }
    }
}
