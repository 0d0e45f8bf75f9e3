//! JSON model files with a format tag and version number.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassifyError, TrainedClassifier};

pub const MODEL_FORMAT: &str = "convtrace-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize)]
struct Envelope<'a> {
    format: &'a str,
    version: u32,
    classifier: &'a TrainedClassifier,
}

#[derive(Deserialize)]
struct Header {
    format: Option<String>,
    version: Option<serde_json::Value>,
}

#[derive(Deserialize)]
struct Owned {
    classifier: TrainedClassifier,
}

pub fn save_model(model: &TrainedClassifier, path: &Path) -> Result<(), ClassifyError> {
    let env = Envelope {
        format: MODEL_FORMAT,
        version: MODEL_VERSION,
        classifier: model,
    };
    let json = serde_json::to_string_pretty(&env).map_err(|e| ClassifyError::Format(e.to_string()))?;
    fs::write(path, json + "\n").map_err(|source| ClassifyError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_model(path: &Path) -> Result<TrainedClassifier, ClassifyError> {
    let text = fs::read_to_string(path).map_err(|source| ClassifyError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let header: Header = serde_json::from_str(&text).map_err(|e| ClassifyError::Format(e.to_string()))?;
    if header.format.as_deref() != Some(MODEL_FORMAT) {
        return Err(ClassifyError::Format(format!(
            "{} is not a {MODEL_FORMAT} file",
            path.display()
        )));
    }
    match header.version {
        Some(serde_json::Value::Number(n)) if n.as_u64() == Some(MODEL_VERSION as u64) => {}
        other => {
            return Err(ClassifyError::VersionMismatch {
                found: other.map_or_else(|| "missing".to_string(), |v| v.to_string()),
                expected: MODEL_VERSION,
            })
        }
    }
    let owned: Owned = serde_json::from_str(&text).map_err(|e| ClassifyError::Format(e.to_string()))?;
    Ok(owned.classifier)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classify::{train, ClassifierSpec, KernelKind, SvmParams};
    use crate::features::{FeatureSet, FeatureVector};

    fn data() -> FeatureSet {
        let recs = (0..12)
            .map(|i| {
                let label = if i % 2 == 0 { "a" } else { "b" };
                let values = (0..24)
                    .map(|j| ((i * 7 + j * 3) % 11) as f64 * 0.1 + if i % 2 == 0 { 0.0 } else { 0.7 })
                    .collect();
                FeatureVector {
                    kernel_size: 3,
                    values,
                    label: label.into(),
                    source: format!("img{i}"),
                }
            })
            .collect();
        FeatureSet::new(3, recs).unwrap()
    }

    #[test]
    fn round_trip_each_classifier() {
        let dir = tempfile::tempdir().unwrap();
        let fs = data();
        let specs = [
            ClassifierSpec::Knn { k: 3 },
            ClassifierSpec::Lda { shrinkage: 1e-3 },
            ClassifierSpec::Svm(SvmParams::new(KernelKind::Rbf)),
            ClassifierSpec::Svm(SvmParams::new(KernelKind::Linear)),
        ];
        for (i, spec) in specs.iter().enumerate() {
            let m = train(spec, spec.standardize_by_default(), &fs).unwrap();
            let path = dir.path().join(format!("m{i}.json"));
            save_model(&m, &path).unwrap();
            let back = load_model(&path).unwrap();
            assert_eq!(back, m, "{spec}");
            for r in fs.records() {
                assert_eq!(back.predict(&r.values).unwrap(), m.predict(&r.values).unwrap());
            }
        }
    }

    #[test]
    fn rejects_other_versions() {
        let dir = tempfile::tempdir().unwrap();
        let m = train(&ClassifierSpec::Knn { k: 1 }, false, &data()).unwrap();
        let path = dir.path().join("m.json");
        save_model(&m, &path).unwrap();
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("\"version\": 1", "\"version\": 2");
        fs::write(&path, text).unwrap();
        match load_model(&path) {
            Err(ClassifyError::VersionMismatch { found, expected }) => {
                assert_eq!(found, "2");
                assert_eq!(expected, 1);
            }
            other => panic!("{other:?}"),
        }
        fs::write(&path, "{\"format\":\"other\"}").unwrap();
        assert!(matches!(load_model(&path), Err(ClassifyError::Format(_))));
    }
}
