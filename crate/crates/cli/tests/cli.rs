use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use convtrace::synth::{fixtures, ClassSpec};
use serde::Deserialize;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_convtrace"));
    c.env_remove("RUST_LOG");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn repo_configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// The sample class file at a smaller image size.
fn small_classes(dir: &Path, size: usize) -> PathBuf {
    let text = fs::read_to_string(repo_configs().join("classes.toml")).unwrap();
    let path = dir.join("classes.toml");
    fs::write(&path, text.replace("= 128", &format!("= {size}"))).unwrap();
    path
}

fn synth_corpus(dir: &Path, count: usize) -> PathBuf {
    let classes = small_classes(dir, 64);
    let out = dir.join("corpus");
    let o = run(&[
        "-q",
        "synth",
        "--out",
        out.to_str().unwrap(),
        "--classes",
        classes.to_str().unwrap(),
        "--count",
        &count.to_string(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

fn extract(corpus: &Path, n: usize, out: &Path) -> Output {
    run(&[
        "-q",
        "extract",
        "--corpus",
        &format!("class_a={}", corpus.join("class_a").display()),
        "--corpus",
        &format!("class_b={}", corpus.join("class_b").display()),
        "--kernel-size",
        &n.to_string(),
        "--out",
        out.to_str().unwrap(),
    ])
}

fn pngs(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = walk(dir)
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    v.sort();
    v
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[derive(Deserialize)]
struct ClassesFile {
    class: Vec<ClassSpec>,
}

#[test]
fn sample_class_file_matches_fixture() {
    let text = fs::read_to_string(repo_configs().join("classes.toml")).unwrap();
    let parsed: ClassesFile = toml::from_str(&text).unwrap();
    assert_eq!(parsed.class, fixtures::two_class_corpus(128, 2.0));
}

#[test]
fn synth_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ca = synth_corpus(a.path(), 2);
    let cb = synth_corpus(b.path(), 2);
    let (pa, pb) = (pngs(&ca), pngs(&cb));
    assert_eq!(pa.len(), 4);
    assert!(ca.join("manifest.csv").is_file());
    for (x, y) in pa.iter().zip(&pb) {
        assert_eq!(x.strip_prefix(&ca).unwrap(), y.strip_prefix(&cb).unwrap());
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
    }
    assert_eq!(
        fs::read(ca.join("manifest.csv")).unwrap(),
        fs::read(cb.join("manifest.csv")).unwrap()
    );
}

#[test]
fn missing_flag_exits_with_usage_error() {
    let o = run(&["synth", "--classes", "x.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--out"), "{}", stderr(&o));
}

#[test]
fn extract_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(dir.path(), 3);
    let f3 = dir.path().join("f3.csv");
    let o = extract(&corpus, 3, &f3);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&f3).unwrap();
    let header = text.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(header.split(',').filter(|c| c.starts_with('f')).count(), 24, "{header}");

    let model = dir.path().join("m.json");
    let o = run(&[
        "-q",
        "train",
        "--features",
        f3.to_str().unwrap(),
        "--classifier",
        "knn:1",
        "--out",
        model.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&[
        "-q",
        "eval",
        "--model",
        model.to_str().unwrap(),
        "--features",
        f3.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["accuracy"].as_f64(), Some(100.0));

    let f4 = dir.path().join("f4.csv");
    assert!(extract(&corpus, 4, &f4).status.success());
    let o = run(&[
        "-q",
        "eval",
        "--model",
        model.to_str().unwrap(),
        "--features",
        f4.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("dimension mismatch"), "{}", stderr(&o));
}

#[test]
fn off_grid_kernel_size_warns() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(dir.path(), 1);
    let out = dir.path().join("f6.csv");
    let o = run(&[
        "extract",
        "--corpus",
        &format!("class_a={}", corpus.join("class_a").display()),
        "--kernel-size",
        "6",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("outside the reference grid"), "{}", stderr(&o));
}

#[test]
fn missing_directory_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let gone = dir.path().join("nowhere");
    let o = run(&[
        "-q",
        "extract",
        "--corpus",
        &format!("a={}", gone.display()),
        "--out",
        dir.path().join("f.csv").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(gone.to_str().unwrap()), "{}", stderr(&o));
}

#[test]
fn malformed_features_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "# kernel_size=3\nlabel,source,f0\na,x,1\n").unwrap();
    let o = run(&[
        "-q",
        "train",
        "--features",
        bad.to_str().unwrap(),
        "--classifier",
        "knn:1",
        "--out",
        dir.path().join("m.json").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(bad.to_str().unwrap()), "{}", stderr(&o));
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let classes = small_classes(dir.path(), 64);
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        format!(
            "seed = 3\n[synth]\nout = \"from_config\"\nclasses = {:?}\ncount = 2\n",
            classes.to_str().unwrap()
        ),
    )
    .unwrap();
    let flag_out = dir.path().join("from_flag");
    let o = run(&[
        "-q",
        "--config",
        cfg.to_str().unwrap(),
        "synth",
        "--out",
        flag_out.to_str().unwrap(),
        "--count",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!dir.path().join("from_config").exists());
    assert_eq!(pngs(&flag_out).len(), 2);

    // Config alone: relative paths resolve against the config file.
    let o = run(&["-q", "--config", cfg.to_str().unwrap(), "synth"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(pngs(&dir.path().join("from_config")).len(), 4);
}

#[test]
fn report_requires_report_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("empty.toml");
    fs::write(&cfg, "seed = 1\n").unwrap();
    let o = run(&["--config", cfg.to_str().unwrap(), "report"]);
    assert_eq!(o.status.code(), Some(2));
}
