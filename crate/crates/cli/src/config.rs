//! Optional TOML config file. Each subcommand reads its own table; values
//! given on the command line win over the file.
//!
//! ```toml
//! seed = 7
//!
//! [synth]
//! out = "corpus"
//! classes = "classes.toml"
//! count = 100
//!
//! [extract]
//! kernel_size = 3
//! out = "features_n3.csv"
//! corpus = { real = "corpus/real", fake = "corpus/fake" }
//! [extract.em]
//! max_iters = 100
//!
//! [train]
//! features = "features_n3.csv"
//! classifier = "svm:linear"
//! out = "model.json"
//!
//! [eval]
//! model = "model.json"
//! features = "test.csv"
//!
//! [report]
//! classifiers = ["svm:linear", "knn:3"]
//! kernel_sizes = [3, 5]
//! corpus = { real = "corpus/real", fake = "corpus/fake" }
//! ```
//!
//! Relative paths are taken relative to the config file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use convtrace::em::EmConfig;
use convtrace::harness::ExperimentConfig;
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub synth: SynthSection,
    #[serde(default)]
    pub extract: ExtractSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    pub report: Option<ExperimentConfig>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub out: Option<PathBuf>,
    pub classes: Option<PathBuf>,
    pub count: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractSection {
    #[serde(default)]
    pub corpus: BTreeMap<String, PathBuf>,
    pub kernel_size: Option<usize>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub max_per_class: Option<usize>,
    pub em: Option<EmConfig>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub features: Option<PathBuf>,
    pub classifier: Option<String>,
    pub standardize: Option<bool>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub model: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

fn rebase(path: &mut Option<PathBuf>, base: &Path) {
    if let Some(p) = path {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: FileConfig =
            toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        rebase(&mut cfg.synth.out, base);
        rebase(&mut cfg.synth.classes, base);
        for dir in cfg.extract.corpus.values_mut() {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
        rebase(&mut cfg.extract.out, base);
        rebase(&mut cfg.train.features, base);
        rebase(&mut cfg.train.out, base);
        rebase(&mut cfg.eval.model, base);
        rebase(&mut cfg.eval.features, base);
        rebase(&mut cfg.eval.out, base);
        if let Some(report) = cfg.report.as_mut() {
            report.resolve_relative(base);
        }
        Ok(cfg)
    }
}
