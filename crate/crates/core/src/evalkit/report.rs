use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::plot::{confusion_png, roc_overlay_png};
use super::{
    aggregate_metrics, confusion, roc_auc, validate_all, ConfusionMatrix, EvalError, LabeledPrediction, Normalization,
    ResourceProfile, RocCurve,
};
use crate::{InteractionClass, NUM_CLASSES};

/// Row labels of the comparison table, in order.
pub const TABLE_ROWS: [&str; 6] = [
    "Accuracy",
    "Precision",
    "Recall",
    "AUC-ROC",
    "Inference Memory Usage (MB)",
    "Time per Sample (mSec)",
];

/// Everything reported for one model on one test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model_tag: String,
    pub split_hash: String,
    pub n: usize,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub micro_precision: f64,
    pub micro_recall: f64,
    /// Mean of the one-vs-rest AUCs; absent if any of them is undefined.
    pub macro_auc: Option<f64>,
    pub per_class_auc: [Option<f64>; NUM_CLASSES],
    pub recall_matrix: ConfusionMatrix,
    pub precision_matrix: ConfusionMatrix,
    pub roc_curves: Vec<RocCurve>,
    /// From the resource profile; absent when none was measured.
    pub memory_mb: Option<f64>,
    /// From the resource profile, else the mean recorded latency.
    pub ms_per_sample: f64,
    pub flags: Vec<String>,
}

pub fn compute_report(
    model_tag: &str,
    split_hash: &str,
    preds: &[LabeledPrediction],
    profile: Option<&ResourceProfile>,
) -> Result<MetricsReport, EvalError> {
    validate_all(preds)?;
    let agg = aggregate_metrics(preds)?;
    let mut flags = agg.warnings.clone();
    let mut per_class_auc = [None; NUM_CLASSES];
    let mut roc_curves = Vec::new();
    for class in InteractionClass::ALL {
        match roc_auc(preds, class) {
            Ok((curve, auc)) => {
                per_class_auc[class.index()] = Some(auc);
                roc_curves.push(curve);
            }
            Err(EvalError::UndefinedAuc { reason, .. }) => flags.push(format!("AUC undefined for {class}: {reason}")),
            Err(e) => return Err(e),
        }
    }
    let macro_auc = per_class_auc
        .iter()
        .copied()
        .collect::<Option<Vec<f64>>>()
        .map(|v| v.iter().sum::<f64>() / v.len() as f64);
    let mean_latency = preds.iter().map(|p| p.latency_ms).sum::<f64>() / preds.len() as f64;
    Ok(MetricsReport {
        model_tag: model_tag.to_string(),
        split_hash: split_hash.to_string(),
        n: preds.len(),
        accuracy: agg.accuracy,
        macro_precision: agg.macro_precision,
        macro_recall: agg.macro_recall,
        micro_precision: agg.micro_precision,
        micro_recall: agg.micro_recall,
        macro_auc,
        per_class_auc,
        recall_matrix: confusion(preds, Normalization::Truth)?,
        precision_matrix: confusion(preds, Normalization::Prediction)?,
        roc_curves,
        memory_mb: profile.map(|p| p.memory_mb),
        ms_per_sample: profile.map_or(mean_latency, |p| p.ms_per_sample),
        flags,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub table: PathBuf,
    pub metrics_json: PathBuf,
    pub confusion_pngs: Vec<PathBuf>,
    pub roc_pngs: Vec<PathBuf>,
}

fn cell(row: &str, r: &MetricsReport) -> String {
    let opt = |v: Option<f64>, digits: usize| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.digits$}"));
    match row {
        "Accuracy" => format!("{:.3}", r.accuracy),
        "Precision" => format!("{:.3}", r.macro_precision),
        "Recall" => format!("{:.3}", r.macro_recall),
        "AUC-ROC" => opt(r.macro_auc, 3),
        "Inference Memory Usage (MB)" => opt(r.memory_mb, 1),
        "Time per Sample (mSec)" => format!("{:.2}", r.ms_per_sample),
        _ => unreachable!("unknown table row {row}"),
    }
}

/// Markdown comparison table with one column per report.
pub fn render_table(a: &MetricsReport, b: &MetricsReport) -> String {
    let mut out = format!("| Metric | {} | {} |\n|---|---|---|\n", a.model_tag, b.model_tag);
    for row in TABLE_ROWS {
        out.push_str(&format!("| {row} | {} | {} |\n", cell(row, a), cell(row, b)));
    }
    out
}

fn file_tag(tag: &str) -> String {
    tag.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), EvalError> {
    let io = |e: std::io::Error| EvalError::Io { path: path.to_path_buf(), reason: e.to_string() };
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

/// Writes the comparison table, both reports as JSON, the two confusion
/// matrices of each model and one ROC overlay per class into `out_dir`.
/// Reports computed on different test splits are refused.
pub fn render_report(a: &MetricsReport, b: &MetricsReport, out_dir: &Path) -> Result<ReportFiles, EvalError> {
    if a.split_hash != b.split_hash {
        return Err(EvalError::SplitMismatch {
            tag_a: a.model_tag.clone(),
            a: a.split_hash.clone(),
            tag_b: b.model_tag.clone(),
            b: b.split_hash.clone(),
        });
    }
    fs::create_dir_all(out_dir).map_err(|e| EvalError::Io { path: out_dir.to_path_buf(), reason: e.to_string() })?;
    let short: String = a.split_hash.chars().take(12).collect();
    let stem = format!("{}_vs_{}_{short}", file_tag(&a.model_tag), file_tag(&b.model_tag));

    let table = out_dir.join(format!("{stem}.md"));
    write_atomic(&table, render_table(a, b).as_bytes())?;
    let metrics_json = out_dir.join(format!("{stem}.json"));
    let json = serde_json::to_vec_pretty(&[a, b]).expect("reports serialize");
    write_atomic(&metrics_json, &json)?;

    let mut confusion_pngs = Vec::new();
    for r in [a, b] {
        for (m, kind) in [(&r.recall_matrix, "recall"), (&r.precision_matrix, "precision")] {
            let path = out_dir.join(format!("{}_{short}_confusion_{kind}.png", file_tag(&r.model_tag)));
            confusion_png(m, &path)?;
            confusion_pngs.push(path);
        }
    }
    let mut roc_pngs = Vec::new();
    for class in InteractionClass::ALL {
        let find = |r: &MetricsReport| r.roc_curves.iter().find(|c| c.class == class).cloned();
        if let (Some(ca), Some(cb)) = (find(a), find(b)) {
            let path = out_dir.join(format!("{stem}_roc_{}.png", class.tag()));
            roc_overlay_png(&ca, &cb, &path)?;
            roc_pngs.push(path);
        }
    }
    Ok(ReportFiles { table, metrics_json, confusion_pngs, roc_pngs })
}

/// Reads reports written by [`render_report`].
pub fn read_reports(path: &Path) -> Result<Vec<MetricsReport>, EvalError> {
    let bytes = fs::read(path).map_err(|e| EvalError::Io { path: path.to_path_buf(), reason: e.to_string() })?;
    serde_json::from_slice(&bytes).map_err(|e| EvalError::Io { path: path.to_path_buf(), reason: e.to_string() })
}

/// One JSON object per line.
pub fn write_predictions(path: &Path, preds: &[LabeledPrediction]) -> Result<(), EvalError> {
    let mut buf = Vec::new();
    for p in preds {
        serde_json::to_writer(&mut buf, p).expect("predictions serialize");
        buf.write_all(b"\n").expect("writing to memory");
    }
    write_atomic(path, &buf)
}

pub fn read_predictions(path: &Path) -> Result<Vec<LabeledPrediction>, EvalError> {
    let io = |reason: String| EvalError::Io { path: path.to_path_buf(), reason };
    let file = fs::File::open(path).map_err(|e| io(e.to_string()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: LabeledPrediction = serde_json::from_str(&line).map_err(|e| io(format!("line {}: {e}", i + 1)))?;
        p.validate()?;
        out.push(p);
    }
    Ok(out)
}
