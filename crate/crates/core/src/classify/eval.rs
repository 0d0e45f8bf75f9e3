//! Held-out evaluation: accuracy, per-class recall and a confusion matrix.

use serde::{Deserialize, Serialize};

use super::{ClassifyError, TrainedClassifier};
use crate::features::FeatureSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classifier: String,
    pub kernel_size: usize,
    pub standardized: bool,
    pub split_seed: Option<u64>,
    /// Union of training and test classes, sorted.
    pub classes: Vec<String>,
    /// Percentage in `[0, 100]`.
    pub accuracy: f64,
    /// `None` for classes absent from the test set.
    pub per_class_recall: Vec<Option<f64>>,
    /// `confusion[true][predicted]`, indexed like `classes`.
    pub confusion: Vec<Vec<usize>>,
    pub total: usize,
}

impl EvalReport {
    pub fn correct(&self) -> usize {
        (0..self.classes.len()).map(|i| self.confusion[i][i]).sum()
    }
}

pub fn evaluate(model: &TrainedClassifier, test: &FeatureSet) -> Result<EvalReport, ClassifyError> {
    if !test.is_empty() && test.dim() != model.dim {
        return Err(ClassifyError::DimensionMismatch {
            expected: model.dim,
            got: test.dim(),
        });
    }
    let mut classes = model.classes.clone();
    classes.extend(test.class_names().iter().cloned());
    classes.sort();
    classes.dedup();
    let idx = |c: &str| classes.binary_search_by(|x| x.as_str().cmp(c)).expect("known class");

    let mut confusion = vec![vec![0usize; classes.len()]; classes.len()];
    for r in test.records() {
        let pred = model.predict(&r.values)?;
        confusion[idx(&r.label)][idx(&pred)] += 1;
    }
    let total = test.len();
    let correct: usize = (0..classes.len()).map(|i| confusion[i][i]).sum();
    let accuracy = if total == 0 {
        0.0
    } else {
        100.0 * correct as f64 / total as f64
    };
    let per_class_recall = confusion
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[i] as f64 / n as f64)
        })
        .collect();

    Ok(EvalReport {
        classifier: model.spec.display_name(),
        kernel_size: model.kernel_size,
        standardized: model.standardized(),
        split_seed: None,
        classes,
        accuracy,
        per_class_recall,
        confusion,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classify::{train, ClassifierSpec};
    use crate::features::FeatureVector;

    fn rec(label: &str, x: f64) -> FeatureVector {
        let mut values = vec![0.0; 24];
        values[0] = x;
        FeatureVector {
            kernel_size: 3,
            values,
            label: label.into(),
            source: String::new(),
        }
    }

    #[test]
    fn confusion_and_recall() {
        let tr = FeatureSet::new(3, vec![rec("a", 0.0), rec("b", 10.0)]).unwrap();
        let model = train(&ClassifierSpec::Knn { k: 1 }, false, &tr).unwrap();
        let te = FeatureSet::new(3, vec![rec("a", 1.0), rec("a", 9.0), rec("b", 8.0), rec("b", 7.0)]).unwrap();
        let r = evaluate(&model, &te).unwrap();
        assert_eq!(r.confusion, vec![vec![1, 1], vec![0, 2]]);
        assert_eq!(r.accuracy, 75.0);
        assert_eq!(r.per_class_recall, vec![Some(0.5), Some(1.0)]);
        assert_eq!(r.total, 4);
        assert_eq!(r.correct(), 3);
        assert_eq!(r.classifier, "1-NN");
        assert!(!r.standardized);
    }

    #[test]
    fn absent_class_has_no_recall() {
        let tr = FeatureSet::new(3, vec![rec("a", 0.0), rec("b", 10.0)]).unwrap();
        let model = train(&ClassifierSpec::Knn { k: 1 }, false, &tr).unwrap();
        let te = FeatureSet::new(3, vec![rec("a", 1.0)]).unwrap();
        let r = evaluate(&model, &te).unwrap();
        assert_eq!(r.per_class_recall, vec![Some(1.0), None]);
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<EvalReport>(&json).unwrap(), r);
    }

    #[test]
    fn dimension_mismatch() {
        let tr = FeatureSet::new(3, vec![rec("a", 0.0), rec("b", 10.0)]).unwrap();
        let model = train(&ClassifierSpec::Knn { k: 1 }, false, &tr).unwrap();
        let te = FeatureSet::new(
            4,
            vec![FeatureVector {
                kernel_size: 4,
                values: vec![0.0; 45],
                label: "a".into(),
                source: String::new(),
            }],
        )
        .unwrap();
        assert!(matches!(
            evaluate(&model, &te),
            Err(ClassifyError::DimensionMismatch { expected: 24, got: 45 })
        ));
    }
}
