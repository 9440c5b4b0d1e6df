//! Classification metrics, resource profiling and the comparison report.
//!
//! Everything here consumes [`LabeledPrediction`] records only, so models
//! are compared through their predictions files without touching model code.

mod metrics;
mod plot;
mod profile;
mod report;
mod roc;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use metrics::{aggregate_metrics, confusion, AggregateMetrics, ConfusionMatrix, Normalization};
pub use profile::{resource_profile, Classifier, ResourceProfile};
pub use report::{compute_report, read_predictions, read_reports, render_report, render_table, write_predictions, MetricsReport, ReportFiles, TABLE_ROWS};
pub use roc::{roc_auc, RocCurve};

use crate::{InteractionClass, Prediction};

/// Tolerance on the sum of a confidence vector.
pub const CONFIDENCE_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no predictions to evaluate")]
    Empty,
    #[error("AUC undefined for class {class}: {reason}")]
    UndefinedAuc { class: InteractionClass, reason: String },
    #[error("invalid prediction for event {event_id}: {reason}")]
    InvalidPrediction { event_id: u64, reason: String },
    #[error("reports come from different test splits: {a} ({tag_a}) vs {b} ({tag_b})")]
    SplitMismatch { tag_a: String, a: String, tag_b: String, b: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("classifier failed on sample {index}: {reason}")]
    Classifier { index: usize, reason: String },
    #[error("evaluation I/O on {path}: {reason}")]
    Io { path: PathBuf, reason: String },
}

/// One test-set prediction: the record format of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPrediction {
    pub event_id: u64,
    pub truth: InteractionClass,
    pub predicted: InteractionClass,
    pub confidences: [f64; 3],
    pub latency_ms: f64,
}

impl LabeledPrediction {
    pub fn from_prediction(event_id: u64, truth: InteractionClass, p: &Prediction) -> Self {
        Self { event_id, truth, predicted: p.class, confidences: p.confidences, latency_ms: p.latency_ms }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |reason: String| Err(EvalError::InvalidPrediction { event_id: self.event_id, reason });
        if self.confidences.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return bad(format!("confidences {:?} are not a probability vector", self.confidences));
        }
        let sum: f64 = self.confidences.iter().sum();
        if (sum - 1.0).abs() > CONFIDENCE_SUM_TOLERANCE {
            return bad(format!("confidences sum to {sum}"));
        }
        if !(self.latency_ms.is_finite() && self.latency_ms >= 0.0) {
            return bad(format!("latency {} ms", self.latency_ms));
        }
        Ok(())
    }
}

pub(crate) fn validate_all(preds: &[LabeledPrediction]) -> Result<(), EvalError> {
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    preds.iter().try_for_each(LabeledPrediction::validate)
}
