use serde::{Deserialize, Serialize};

use super::{validate_all, EvalError, LabeledPrediction};
use crate::InteractionClass;

/// One-vs-rest ROC points, one per distinct score plus the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub class: InteractionClass,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    /// Score threshold of each point after the origin (`score >= t`).
    pub thresholds: Vec<f64>,
}

/// Exact ROC of `confidences[class]` against membership in `class`, with
/// the AUC from trapezoidal integration.
pub fn roc_auc(preds: &[LabeledPrediction], class: InteractionClass) -> Result<(RocCurve, f64), EvalError> {
    validate_all(preds)?;
    let k = class.index();
    let mut scored: Vec<(f64, bool)> = preds.iter().map(|p| (p.confidences[k], p.truth == class)).collect();
    let pos = scored.iter().filter(|s| s.1).count() as u64;
    let neg = scored.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::UndefinedAuc {
            class,
            reason: format!("{pos} positive and {neg} negative samples; both are required"),
        });
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut fpr = vec![0.0];
    let mut tpr = vec![0.0];
    let mut thresholds = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    // Twice the area in units of one positive-negative pair.
    let mut area2 = 0u128;
    let mut i = 0;
    while i < scored.len() {
        let t = scored[i].0;
        let (tp0, fp0) = (tp, fp);
        while i < scored.len() && scored[i].0 == t {
            if scored[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += u128::from(fp - fp0) * u128::from(tp + tp0);
        fpr.push(fp as f64 / neg as f64);
        tpr.push(tp as f64 / pos as f64);
        thresholds.push(t);
    }
    let auc = area2 as f64 / (2.0 * pos as f64 * neg as f64);
    Ok((RocCurve { class, fpr, tpr, thresholds }, auc))
}
