use serde::{Deserialize, Serialize};

use super::{validate_all, EvalError, LabeledPrediction};
use crate::{InteractionClass, NUM_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Rows divided by true-class counts (recall matrix).
    Truth,
    /// Columns divided by predicted-class counts (precision matrix).
    Prediction,
}

/// Rows index the true class, columns the predicted class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub normalization: Normalization,
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
    pub values: [[f64; NUM_CLASSES]; NUM_CLASSES],
    /// Classes whose normalizing marginal is zero; their row or column is
    /// left at zero.
    pub empty: Vec<InteractionClass>,
}

pub fn confusion(preds: &[LabeledPrediction], normalization: Normalization) -> Result<ConfusionMatrix, EvalError> {
    validate_all(preds)?;
    let mut counts = [[0u64; NUM_CLASSES]; NUM_CLASSES];
    for p in preds {
        counts[p.truth.index()][p.predicted.index()] += 1;
    }
    let mut values = [[0.0; NUM_CLASSES]; NUM_CLASSES];
    let mut empty = Vec::new();
    for k in 0..NUM_CLASSES {
        let marginal: u64 = match normalization {
            Normalization::Truth => counts[k].iter().sum(),
            Normalization::Prediction => (0..NUM_CLASSES).map(|r| counts[r][k]).sum(),
        };
        if marginal == 0 {
            empty.push(InteractionClass::ALL[k]);
            continue;
        }
        for j in 0..NUM_CLASSES {
            match normalization {
                Normalization::Truth => values[k][j] = counts[k][j] as f64 / marginal as f64,
                Normalization::Prediction => values[j][k] = counts[j][k] as f64 / marginal as f64,
            }
        }
    }
    Ok(ConfusionMatrix { normalization, counts, values, empty })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub per_class_precision: [f64; NUM_CLASSES],
    pub per_class_recall: [f64; NUM_CLASSES],
    /// Classes present in the truth labels; only these enter macro means.
    pub classes_in_truth: Vec<InteractionClass>,
    pub warnings: Vec<String>,
}

/// Accuracy and macro/micro precision and recall. A class present in the
/// truth labels but never predicted has precision 0, flagged in `warnings`;
/// classes absent from the truth labels are left out of both macro means.
pub fn aggregate_metrics(preds: &[LabeledPrediction]) -> Result<AggregateMetrics, EvalError> {
    let cm = confusion(preds, Normalization::Truth)?;
    let c = &cm.counts;
    let n = preds.len() as f64;
    let correct: u64 = (0..NUM_CLASSES).map(|k| c[k][k]).sum();
    let mut warnings = Vec::new();
    let mut precision = [0.0; NUM_CLASSES];
    let mut recall = [0.0; NUM_CLASSES];
    let mut present = Vec::new();
    for k in 0..NUM_CLASSES {
        let class = InteractionClass::ALL[k];
        let truth_k: u64 = c[k].iter().sum();
        let pred_k: u64 = (0..NUM_CLASSES).map(|r| c[r][k]).sum();
        if truth_k == 0 {
            warnings.push(format!("{class} absent from truth labels; excluded from macro averages"));
            continue;
        }
        present.push(class);
        recall[k] = c[k][k] as f64 / truth_k as f64;
        if pred_k == 0 {
            warnings.push(format!("{class} never predicted; precision set to 0"));
        } else {
            precision[k] = c[k][k] as f64 / pred_k as f64;
        }
    }
    let macro_mean = |v: &[f64; NUM_CLASSES]| present.iter().map(|c| v[c.index()]).sum::<f64>() / present.len() as f64;
    Ok(AggregateMetrics {
        accuracy: correct as f64 / n,
        macro_precision: macro_mean(&precision),
        macro_recall: macro_mean(&recall),
        // With one label per sample, micro precision and recall both equal accuracy.
        micro_precision: correct as f64 / n,
        micro_recall: correct as f64 / n,
        per_class_precision: precision,
        per_class_recall: recall,
        classes_in_truth: present,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub fn lp(truth: usize, predicted: usize) -> LabeledPrediction {
        let mut confidences = [0.0; 3];
        confidences[predicted] = 1.0;
        LabeledPrediction {
            event_id: 0,
            truth: InteractionClass::ALL[truth],
            predicted: InteractionClass::ALL[predicted],
            confidences,
            latency_ms: 1.0,
        }
    }

    /// Independent tally: counts by scanning each cell separately.
    fn oracle_counts(preds: &[(usize, usize)]) -> [[u64; 3]; 3] {
        let mut m = [[0u64; 3]; 3];
        for (r, row) in m.iter_mut().enumerate() {
            for (c, cell) in row.iter_mut().enumerate() {
                *cell = preds.iter().filter(|&&(t, p)| t == r && p == c).count() as u64;
            }
        }
        m
    }

    #[test]
    fn perfect_predictions_give_identity() {
        let preds: Vec<_> = (0..30).map(|i| lp(i % 3, i % 3)).collect();
        for norm in [Normalization::Truth, Normalization::Prediction] {
            let m = confusion(&preds, norm).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    assert_eq!(m.values[i][j], if i == j { 1.0 } else { 0.0 });
                }
            }
        }
        let a = aggregate_metrics(&preds).unwrap();
        assert_eq!((a.accuracy, a.macro_precision, a.macro_recall), (1.0, 1.0, 1.0));
    }

    #[test]
    fn constant_prediction_against_uniform_truth() {
        let preds: Vec<_> = (0..300).map(|i| lp(i % 3, 0)).collect();
        let m = confusion(&preds, Normalization::Truth).unwrap();
        assert!((0..3).all(|r| m.values[r][0] == 1.0));
        let a = aggregate_metrics(&preds).unwrap();
        // Tally by hand: class 0 precision 100/300, others never predicted.
        let tp0 = preds.iter().filter(|p| p.truth.index() == 0 && p.predicted.index() == 0).count() as f64;
        let pred0 = preds.iter().filter(|p| p.predicted.index() == 0).count() as f64;
        assert!((a.accuracy - 1.0 / 3.0).abs() < 1e-12);
        assert!((a.macro_recall - (1.0 + 0.0 + 0.0) / 3.0).abs() < 1e-12);
        assert!((a.macro_precision - (tp0 / pred0) / 3.0).abs() < 1e-12);
        assert!((a.macro_precision - 1.0 / 9.0).abs() < 1e-12);
        assert_eq!(a.warnings.len(), 2);
        assert!(a.macro_precision.is_finite());
    }

    #[test]
    fn table_fixture_has_equal_macro_values() {
        // 100 events per class, 87 correct, errors sent to the next class.
        let mut preds = Vec::new();
        for c in 0..3 {
            for i in 0..100 {
                preds.push(lp(c, if i < 87 { c } else { (c + 1) % 3 }));
            }
        }
        let a = aggregate_metrics(&preds).unwrap();
        for v in [a.accuracy, a.macro_precision, a.macro_recall] {
            assert!((v - 0.87).abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn class_absent_from_truth_is_excluded() {
        let preds = vec![lp(0, 0), lp(1, 1), lp(0, 2)];
        let a = aggregate_metrics(&preds).unwrap();
        assert_eq!(a.classes_in_truth.len(), 2);
        assert!((a.macro_recall - 0.75).abs() < 1e-12);
        let m = confusion(&preds, Normalization::Truth).unwrap();
        assert_eq!(m.empty, vec![InteractionClass::Nc]);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(matches!(confusion(&[], Normalization::Truth), Err(EvalError::Empty)));
    }

    proptest! {
        #[test]
        fn matrices_match_oracle_and_normalize(pairs in prop::collection::vec((0usize..3, 0usize..3), 1..1000)) {
            let preds: Vec<_> = pairs.iter().map(|&(t, p)| lp(t, p)).collect();
            let rm = confusion(&preds, Normalization::Truth).unwrap();
            let pm = confusion(&preds, Normalization::Prediction).unwrap();
            prop_assert_eq!(rm.counts, oracle_counts(&pairs));
            for k in 0..3 {
                let row: u64 = rm.counts[k].iter().sum();
                if row > 0 {
                    prop_assert!((rm.values[k].iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
                let col: u64 = (0..3).map(|r| pm.counts[r][k]).sum();
                if col > 0 {
                    prop_assert!(((0..3).map(|r| pm.values[r][k]).sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn metrics_are_permutation_invariant(pairs in prop::collection::vec((0usize..3, 0usize..3), 1..200), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let preds: Vec<_> = pairs.iter().map(|&(t, p)| lp(t, p)).collect();
            let mut shuffled = preds.clone();
            shuffled.shuffle(&mut crate::seed::rng(seed, &[]));
            prop_assert_eq!(aggregate_metrics(&preds).unwrap(), aggregate_metrics(&shuffled).unwrap());
        }
    }
}
