mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::error::ErrorKind;
use clap::{ArgAction, Args, CommandFactory, Parser, Subcommand};
use convtrace::classify::{self, evaluate, load_model, save_model, ClassifierSpec};
use convtrace::features::{load_features, save_features};
use convtrace::harness::{self, render_table, TableFormat};
use convtrace::synth::{make_labeled_corpus, ClassSpec};
use log::{info, warn};
use serde::Deserialize;

use crate::config::FileConfig;

/// Kernel sizes of the reference experiment grid.
const REFERENCE_KERNEL_SIZES: [usize; 4] = [3, 4, 5, 7];

#[derive(Debug, Parser)]
#[command(
    name = "convtrace",
    version,
    about = "Convolutional-trace features and classifiers for image forensics"
)]
struct Cli {
    /// TOML file with per-subcommand defaults; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for every random choice of the subcommand.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a labelled corpus of images with planted kernels.
    Synth(SynthArgs),
    /// Extract kernel features from labelled image directories.
    Extract(ExtractArgs),
    /// Train a classifier on a feature CSV.
    Train(TrainArgs),
    /// Evaluate a trained model on a feature CSV.
    Eval(EvalArgs),
    /// Run the full experiment grid from the [report] config table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// TOML file with one [[class]] table per class.
    #[arg(long, value_name = "FILE")]
    classes: Option<PathBuf>,
    /// Images per class.
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    /// Labelled image directory as CLASS=DIR; repeat for each class.
    #[arg(long, value_name = "CLASS=DIR", value_parser = parse_corpus)]
    corpus: Vec<(String, PathBuf)>,
    #[arg(long)]
    kernel_size: Option<usize>,
    /// Feature CSV to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    max_per_class: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Feature CSV.
    #[arg(long)]
    features: Option<PathBuf>,
    /// knn:K, lda[:SHRINKAGE] or svm:KERNEL[,c=..][,gamma=..][,degree=..][,coef0=..]
    #[arg(long)]
    classifier: Option<String>,
    /// Z-score features with training statistics.
    #[arg(long, overrides_with = "no_standardize")]
    standardize: bool,
    #[arg(long, overrides_with = "standardize")]
    no_standardize: bool,
    /// Model file to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Feature CSV.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Report file; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Output directory for features, models, reports and tables.
    #[arg(long)]
    out: Option<PathBuf>,
    /// markdown or csv.
    #[arg(long, default_value = "markdown")]
    format: TableFormat,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
}

fn parse_corpus(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((class, dir)) if !class.is_empty() && !dir.is_empty() => Ok((class.to_string(), PathBuf::from(dir))),
        _ => Err(format!("expected CLASS=DIR, got {s:?}")),
    }
}

/// Exits with status 2 naming the missing flag.
fn missing(flag: &str, section: &str) -> ! {
    Cli::command()
        .error(
            ErrorKind::MissingRequiredArgument,
            format!("{flag} is required (or set it in the [{section}] table of --config)"),
        )
        .exit()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", error_chain(&e));
            ExitCode::from(1)
        }
    }
}

/// Joins the error chain, skipping causes whose text the outer message
/// already includes.
fn error_chain(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if msg.contains(&text) {
            continue;
        }
        if !msg.is_empty() {
            msg.push_str(": ");
        }
        msg.push_str(&text);
    }
    msg
}

fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let seed = cli.seed.or(file.seed);
    match cli.command {
        Command::Synth(a) => synth(a, file, seed),
        Command::Extract(a) => extract(a, file, seed),
        Command::Train(a) => train(a, file, seed),
        Command::Eval(a) => eval(a, file),
        Command::Report(a) => report(a, file, seed),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassesFile {
    class: Vec<ClassSpec>,
}

fn synth(a: SynthArgs, file: FileConfig, seed: Option<u64>) -> Result<()> {
    let s = file.synth;
    let out = a.out.or(s.out).unwrap_or_else(|| missing("--out", "synth"));
    let classes = a.classes.or(s.classes).unwrap_or_else(|| missing("--classes", "synth"));
    let count = a.count.or(s.count).unwrap_or(10);
    let seed = seed.unwrap_or(0);
    info!(
        "synth: out={} classes={} count={count} seed={seed}",
        out.display(),
        classes.display()
    );
    let text =
        fs::read_to_string(&classes).with_context(|| format!("cannot read class specs {}", classes.display()))?;
    let specs: ClassesFile =
        toml::from_str(&text).with_context(|| format!("invalid class specs {}", classes.display()))?;
    let corpus = make_labeled_corpus(&specs.class, count, seed, &out)?;
    info!(
        "wrote {} images and {}",
        corpus.entries.len(),
        corpus.manifest_path.display()
    );
    Ok(())
}

fn extract(a: ExtractArgs, file: FileConfig, seed: Option<u64>) -> Result<()> {
    let s = file.extract;
    let corpus: Vec<(String, PathBuf)> = if a.corpus.is_empty() {
        s.corpus.into_iter().collect()
    } else {
        a.corpus
    };
    if corpus.is_empty() {
        missing("--corpus", "extract");
    }
    let out = a.out.or(s.out).unwrap_or_else(|| missing("--out", "extract"));
    let mut em = s.em.unwrap_or_default();
    if let Some(n) = a.kernel_size.or(s.kernel_size) {
        em.kernel_size = n;
    }
    if let Some(seed) = seed {
        em.rng_seed = seed;
    }
    let jobs = harness::resolve_jobs(a.jobs.or(s.jobs).unwrap_or(0));
    let cap = a.max_per_class.or(s.max_per_class);
    info!(
        "extract: corpus={corpus:?} out={} jobs={jobs} max_per_class={cap:?} em={em:?}",
        out.display()
    );
    if !REFERENCE_KERNEL_SIZES.contains(&em.kernel_size) {
        warn!(
            "kernel size {} is outside the reference grid {:?}",
            em.kernel_size, REFERENCE_KERNEL_SIZES
        );
    }
    em.validate()?;

    let mut images = harness::scan_corpus(&corpus)?;
    if let Some(cap) = cap {
        images = harness::cap_per_class(images, cap);
    }
    let (features, summary) = harness::extract_all(&images, &em, jobs)?;
    if !summary.failures.is_empty() {
        warn!(
            "{} of {} images failed extraction and were skipped",
            summary.failures.len(),
            summary.attempted
        );
    }
    if summary.grayscale > 0 {
        info!("{} grayscale images were replicated to RGB", summary.grayscale);
    }
    info!("source formats: {:?}", summary.formats);
    save_features(&features, &out)?;
    info!(
        "wrote {} records of dimension {} to {}",
        features.len(),
        features.dim(),
        out.display()
    );
    Ok(())
}

fn train(a: TrainArgs, file: FileConfig, seed: Option<u64>) -> Result<()> {
    let s = file.train;
    let features = a
        .features
        .or(s.features)
        .unwrap_or_else(|| missing("--features", "train"));
    let spec_text = a
        .classifier
        .or(s.classifier)
        .unwrap_or_else(|| missing("--classifier", "train"));
    let out = a.out.or(s.out).unwrap_or_else(|| missing("--out", "train"));
    let spec: ClassifierSpec = spec_text.parse()?;
    let standardize = if a.standardize {
        true
    } else if a.no_standardize {
        false
    } else {
        s.standardize.unwrap_or_else(|| spec.standardize_by_default())
    };
    // Training is deterministic; the seed is only echoed.
    info!(
        "train: features={} classifier={spec} standardize={standardize} out={} seed={seed:?}",
        features.display(),
        out.display()
    );
    let fs = load_features(&features)?;
    let model = classify::train(&spec, standardize, &fs)?;
    save_model(&model, &out)?;
    info!(
        "wrote {} model for classes {:?} to {}",
        spec.display_name(),
        model.classes,
        out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs, file: FileConfig) -> Result<()> {
    let s = file.eval;
    let model_path = a.model.or(s.model).unwrap_or_else(|| missing("--model", "eval"));
    let features = a
        .features
        .or(s.features)
        .unwrap_or_else(|| missing("--features", "eval"));
    let out = a.out.or(s.out);
    info!(
        "eval: model={} features={} out={:?}",
        model_path.display(),
        features.display(),
        out
    );
    let model = load_model(&model_path)?;
    let fs = load_features(&features)?;
    let report = evaluate(&model, &fs).with_context(|| format!("evaluating on {}", features.display()))?;
    info!("accuracy {:.2}% on {} records", report.accuracy, report.total);
    let json = serde_json::to_string_pretty(&report)? + "\n";
    match out {
        Some(path) => write(&path, &json)?,
        None => print!("{json}"),
    }
    Ok(())
}

fn report(a: ReportArgs, file: FileConfig, seed: Option<u64>) -> Result<()> {
    let Some(mut cfg) = file.report else {
        missing("--config", "report");
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(out) = a.out {
        cfg.output_dir = Some(out);
    }
    if let Some(jobs) = a.jobs {
        cfg.jobs = Some(jobs);
    }
    if let Some(r) = a.repeats {
        cfg.repeats = r;
    }
    info!("report: {cfg:?}");
    for n in &cfg.kernel_sizes {
        if !REFERENCE_KERNEL_SIZES.contains(n) {
            warn!("kernel size {n} is outside the reference grid {REFERENCE_KERNEL_SIZES:?}");
        }
    }
    let table = harness::run_experiment(&cfg)?;
    for (n, s) in table.kernel_sizes.iter().zip(&table.extraction) {
        if !s.failures.is_empty() {
            warn!(
                "N={n}: {} of {} images failed extraction",
                s.failures.len(),
                s.attempted
            );
        }
    }
    info!("finished in {:.1}s", table.timings.total_secs);
    print!("{}", render_table(&table, a.format));
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}
