//! Metrics: extraction quality against a ground-truth table, binary
//! classification scores, and fidelity between a model trained on ground
//! truth and one trained on extracted data.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{fit_encoder, split, transform, DatasetError, EncoderState, SplitAssignment, TabularDataset};
use crate::models::{grid_search, GridReport, Model, ModelError, ModelFamily};
use crate::schema::TypedValue;
use crate::vorc::ProvenanceEntry;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const REAL_RELATIVE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("tables do not share a schema: {0}")]
    SchemaMismatch(String),
    #[error("extracted row `{0}` has no ground-truth row")]
    UnknownId(String),
    #[error("no rows in common between the two tables")]
    NoOverlap,
    #[error("{0}")]
    Shape(String),
    #[error("column spaces differ: {0}")]
    ColumnMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionReport {
    pub n_evaluated: usize,
    /// Ground-truth rows with no extracted counterpart (failed records).
    pub n_missing_rows: usize,
    pub record_accuracy: f64,
    pub cell_accuracy: f64,
    pub missing_precision: Option<f64>,
    pub missing_recall: Option<f64>,
    pub vorc_call_rate: Option<f64>,
}

/// Cell equality: Missing only matches Missing, reals match within a
/// relative tolerance of 1e-9, everything else exactly.
pub fn cells_match(a: &TypedValue, b: &TypedValue) -> bool {
    match (a, b) {
        (TypedValue::Real(x), TypedValue::Real(y)) => {
            x == y || (x - y).abs() <= REAL_RELATIVE_TOLERANCE * x.abs().max(y.abs())
        }
        (TypedValue::Real(x), TypedValue::Integer(i)) | (TypedValue::Integer(i), TypedValue::Real(x)) => {
            cells_match(&TypedValue::Real(*x), &TypedValue::Real(*i as f64))
        }
        _ => a == b,
    }
}

/// Compares every extracted row with the ground-truth row of the same id.
/// Missing is the positive class for the missing-value precision/recall.
pub fn extraction_metrics(
    extracted: &TabularDataset,
    truth: &TabularDataset,
    provenance: Option<&[ProvenanceEntry]>,
) -> Result<ExtractionReport, EvalError> {
    let names = |d: &TabularDataset| d.schema.features().iter().map(|f| f.name.clone()).collect::<Vec<_>>();
    if names(extracted) != names(truth) {
        return Err(EvalError::SchemaMismatch(format!(
            "[{}] vs [{}]",
            names(extracted).join(", "),
            names(truth).join(", ")
        )));
    }
    let truth_rows: HashMap<&str, usize> = truth.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut exact_rows = 0usize;
    let mut matching_cells = 0usize;
    let mut total_cells = 0usize;
    let (mut both_missing, mut ext_missing, mut truth_missing) = (0usize, 0usize, 0usize);
    for (r, id) in extracted.ids.iter().enumerate() {
        let t = *truth_rows.get(id.as_str()).ok_or_else(|| EvalError::UnknownId(id.clone()))?;
        let mut all = true;
        for (a, b) in extracted.rows[r].iter().zip(&truth.rows[t]) {
            total_cells += 1;
            if cells_match(a, b) {
                matching_cells += 1;
            } else {
                all = false;
            }
            ext_missing += usize::from(a.is_missing());
            truth_missing += usize::from(b.is_missing());
            both_missing += usize::from(a.is_missing() && b.is_missing());
        }
        exact_rows += usize::from(all);
    }
    let n = extracted.n();
    if n == 0 {
        return Err(EvalError::NoOverlap);
    }
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    Ok(ExtractionReport {
        n_evaluated: n,
        n_missing_rows: truth.n() - n,
        record_accuracy: exact_rows as f64 / n as f64,
        cell_accuracy: if total_cells == 0 {
            1.0
        } else {
            matching_cells as f64 / total_cells as f64
        },
        missing_precision: ratio(both_missing, ext_missing),
        missing_recall: ratio(both_missing, truth_missing),
        vorc_call_rate: provenance.and_then(|p| ratio(p.iter().filter(|e| e.vorc_iterations >= 1).count(), p.len())),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub n: usize,
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub auc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Metrics from hard labels only; AUC is left undefined.
pub fn label_metrics(y_true: &[u8], y_pred: &[u8]) -> Result<ClassificationReport, EvalError> {
    if y_true.len() != y_pred.len() || y_true.is_empty() {
        return Err(EvalError::Shape(format!(
            "{} labels vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let (mut tp, mut fp, mut fneg, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for (&y, &p) in y_true.iter().zip(y_pred) {
        correct += usize::from(y == p);
        match (y, p) {
            (1, 1) => tp += 1,
            (0, 1) => fp += 1,
            (1, 0) => fneg += 1,
            _ => {}
        }
    }
    let precision = (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64);
    let recall = (tp + fneg > 0).then(|| tp as f64 / (tp + fneg) as f64);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    Ok(ClassificationReport {
        n: y_true.len(),
        accuracy: correct as f64 / y_true.len() as f64,
        precision,
        recall,
        f1,
        auc: None,
        note: None,
    })
}

/// Scores are positive when strictly above `threshold`.
pub fn classification_metrics(y_true: &[u8], scores: &[f64], threshold: f64) -> Result<ClassificationReport, EvalError> {
    let pred: Vec<u8> = scores.iter().map(|&s| u8::from(s > threshold)).collect();
    let mut report = label_metrics(y_true, &pred)?;
    report.auc = auc(y_true, scores);
    if report.auc.is_none() {
        report.note = Some("AUC undefined: only one class present".into());
    }
    Ok(report)
}

/// Mann-Whitney AUC with average ranks; tied positive/negative pairs count
/// one half. `None` unless both classes are present. Ranks are kept doubled
/// so the statistic is an exact ratio of integers.
pub fn auc(y: &[u8], scores: &[f64]) -> Option<f64> {
    assert_eq!(y.len(), scores.len(), "labels and scores differ in length");
    let n_pos = y.iter().filter(|&&v| v == 1).count() as u64;
    let n_neg = y.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut doubled_rank_sum = 0u64;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // 1-based ranks start+1..=end average to (start + end + 1) / 2.
        let doubled = (start + end + 1) as u64;
        let pos_in_group = order[start..end].iter().filter(|&&i| y[i] == 1).count() as u64;
        doubled_rank_sum += doubled * pos_in_group;
        start = end;
    }
    let doubled_u = doubled_rank_sum - n_pos * (n_pos + 1);
    Some(doubled_u as f64 / (2 * n_pos * n_neg) as f64)
}

/// Coefficient of determination of `other` against `reference`, with the
/// sum of squares taken about the reference mean. `None` when the reference
/// is constant.
pub fn importance_r2(reference: &[f64], other: &[f64]) -> Option<f64> {
    if reference.len() != other.len() || reference.is_empty() {
        return None;
    }
    let mean = reference.iter().sum::<f64>() / reference.len() as f64;
    let ss_tot: f64 = reference.iter().map(|v| (v - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return None;
    }
    let ss_res: f64 = reference.iter().zip(other).map(|(a, b)| (a - b).powi(2)).sum();
    Some(1.0 - ss_res / ss_tot)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub family: ModelFamily,
    pub acc_gt: f64,
    pub acc_ext: f64,
    pub acc_d: f64,
    pub auc_gt: Option<f64>,
    pub auc_ext: Option<f64>,
    pub auc_d: Option<f64>,
    pub r2: Option<f64>,
}

/// Each model is scored on its own pipeline's test matrix over the same
/// rows; importances are compared with the ground-truth model as reference.
pub fn fidelity(
    model_gt: &Model,
    model_ext: &Model,
    x_test_gt: &[Vec<f64>],
    x_test_ext: &[Vec<f64>],
    y_test: &[u8],
) -> Result<FidelityReport, EvalError> {
    if model_gt.family() != model_ext.family() {
        return Err(EvalError::ColumnMismatch(format!(
            "model families differ ({} vs {})",
            model_gt.family(),
            model_ext.family()
        )));
    }
    if model_gt.n_features() != model_ext.n_features() {
        return Err(EvalError::ColumnMismatch(format!(
            "{} vs {} columns",
            model_gt.n_features(),
            model_ext.n_features()
        )));
    }
    if x_test_gt.len() != y_test.len() || x_test_ext.len() != y_test.len() {
        return Err(EvalError::Shape("test matrices and labels differ in length".into()));
    }
    let s_gt = model_gt.predict_proba(x_test_gt)?;
    let s_ext = model_ext.predict_proba(x_test_ext)?;
    let gt = classification_metrics(y_test, &s_gt, 0.5)?;
    let ext = classification_metrics(y_test, &s_ext, 0.5)?;
    Ok(FidelityReport {
        family: model_gt.family(),
        acc_gt: gt.accuracy,
        acc_ext: ext.accuracy,
        acc_d: (gt.accuracy - ext.accuracy).abs(),
        auc_gt: gt.auc,
        auc_ext: ext.auc,
        auc_d: gt.auc.zip(ext.auc).map(|(a, b)| (a - b).abs()),
        r2: importance_r2(&model_gt.feature_importances(), &model_ext.feature_importances()),
    })
}

/// A grid-searched model together with the encoder fitted on its training rows.
#[derive(Debug, Clone)]
pub struct TrainedPipeline {
    pub encoder: EncoderState,
    pub model: Model,
    pub grid: GridReport,
}

impl TrainedPipeline {
    pub fn score(&self, dataset: &TabularDataset, ids: &[usize]) -> Result<ClassificationReport, EvalError> {
        let m = transform(dataset, &self.encoder, ids)?;
        let scores = self.model.predict_proba(&m.rows)?;
        classification_metrics(m.labels()?, &scores, 0.5)
    }
}

/// Fits the encoder on the training rows, grid-searches `family` against
/// the validation rows, and keeps the selected model.
pub fn train_on_split(
    dataset: &TabularDataset,
    assignment: &SplitAssignment,
    family: ModelFamily,
) -> Result<TrainedPipeline, EvalError> {
    let encoder = fit_encoder(dataset, &assignment.train)?;
    let tr = transform(dataset, &encoder, &assignment.train)?;
    let va = transform(dataset, &encoder, &assignment.val)?;
    let (model, grid) = grid_search(family, &tr.rows, tr.labels()?, &va.rows, va.labels()?)?;
    Ok(TrainedPipeline { encoder, model, grid })
}

/// Restricts both tables to the ground-truth rows that were extracted, in
/// ground-truth order. The extracted copy takes the ground-truth labels.
pub fn align_tables(
    truth: &TabularDataset,
    extracted: &TabularDataset,
) -> Result<(TabularDataset, TabularDataset), EvalError> {
    let truth_ids: HashMap<&str, usize> = truth.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    if let Some(id) = extracted.ids.iter().find(|id| !truth_ids.contains_key(id.as_str())) {
        return Err(EvalError::UnknownId(id.clone()));
    }
    let ext_ids: HashMap<&str, usize> = extracted.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let (ti, ei): (Vec<usize>, Vec<usize>) = truth
        .ids
        .iter()
        .enumerate()
        .filter_map(|(i, id)| ext_ids.get(id.as_str()).map(|&j| (i, j)))
        .unzip();
    if ti.is_empty() {
        return Err(EvalError::NoOverlap);
    }
    let t = truth.select(&ti)?;
    t.labels()?;
    let mut e = extracted.select(&ei)?;
    e.labels = t.labels.clone();
    Ok((t, e))
}

/// Extraction metrics followed by one fidelity report per family. Both
/// tables share one split drawn from the aligned ground truth.
pub fn compare_tables(
    truth: &TabularDataset,
    extracted: &TabularDataset,
    provenance: Option<&[ProvenanceEntry]>,
    families: &[ModelFamily],
    seed: u64,
) -> Result<Vec<NamedReport>, EvalError> {
    let extraction = extraction_metrics(extracted, truth, provenance)?;
    let (t, e) = align_tables(truth, extracted)?;
    let assignment = split(&t, seed)?;
    let mut reports = vec![NamedReport::Extraction {
        name: "extraction".into(),
        report: extraction,
    }];
    for &family in families {
        let gt = train_on_split(&t, &assignment, family)?;
        let ext = train_on_split(&e, &assignment, family)?;
        let x_gt = transform(&t, &gt.encoder, &assignment.test)?;
        let x_ext = transform(&e, &ext.encoder, &assignment.test)?;
        let report = fidelity(&gt.model, &ext.model, &x_gt.rows, &x_ext.rows, x_gt.labels()?)?;
        reports.push(NamedReport::Fidelity {
            name: format!("fidelity_{family}"),
            report,
        });
    }
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NamedReport {
    Extraction { name: String, report: ExtractionReport },
    Classification { name: String, report: ClassificationReport },
    Fidelity { name: String, report: FidelityReport },
}

impl NamedReport {
    pub fn name(&self) -> &str {
        match self {
            NamedReport::Extraction { name, .. }
            | NamedReport::Classification { name, .. }
            | NamedReport::Fidelity { name, .. } => name,
        }
    }

    /// Metric rows in a fixed order; `None` renders as null / empty.
    pub fn metrics(&self) -> Vec<(&'static str, Option<f64>)> {
        match self {
            NamedReport::Extraction { report: r, .. } => vec![
                ("n_evaluated", Some(r.n_evaluated as f64)),
                ("n_missing_rows", Some(r.n_missing_rows as f64)),
                ("record_accuracy", Some(r.record_accuracy)),
                ("cell_accuracy", Some(r.cell_accuracy)),
                ("missing_precision", r.missing_precision),
                ("missing_recall", r.missing_recall),
                ("vorc_call_rate", r.vorc_call_rate),
            ],
            NamedReport::Classification { report: r, .. } => vec![
                ("n", Some(r.n as f64)),
                ("accuracy", Some(r.accuracy)),
                ("precision", r.precision),
                ("recall", r.recall),
                ("f1", r.f1),
                ("auc", r.auc),
            ],
            NamedReport::Fidelity { report: r, .. } => vec![
                ("acc_gt", Some(r.acc_gt)),
                ("acc_ext", Some(r.acc_ext)),
                ("acc_d", Some(r.acc_d)),
                ("auc_gt", r.auc_gt),
                ("auc_ext", r.auc_ext),
                ("auc_d", r.auc_d),
                ("r2", r.r2),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" => Ok(ReportFormat::Text),
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!("unknown report format `{other}`")),
        }
    }
}

#[derive(Serialize)]
struct ReportDocument<'a> {
    schema_version: u32,
    reports: &'a [NamedReport],
}

fn fmt_value(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn render_report(reports: &[NamedReport], format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let doc = ReportDocument {
                schema_version: REPORT_SCHEMA_VERSION,
                reports,
            };
            serde_json::to_string_pretty(&doc).expect("reports serialize") + "\n"
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["report", "metric", "value"]).expect("in-memory write");
            for r in reports {
                for (metric, v) in r.metrics() {
                    w.write_record([r.name(), metric, &fmt_value(v)]).expect("in-memory write");
                }
            }
            String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
        }
        ReportFormat::Text => {
            let mut out = String::new();
            for r in reports {
                let _ = writeln!(out, "{}", r.name());
                for (metric, v) in r.metrics() {
                    let shown = v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
                    let _ = writeln!(out, "  {metric:<18} {shown}");
                }
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[1, 1, 0, 0], &[0.9, 0.8, 0.3, 0.2]), Some(1.0));
        assert_eq!(auc(&[1, 0, 1, 0], &[0.9, 0.8, 0.3, 0.2]), Some(0.75));
        assert_eq!(auc(&[1, 0], &[0.5, 0.5]), Some(0.5));
        assert_eq!(auc(&[1, 1], &[0.5, 0.2]), None);
    }

    #[test]
    fn all_positive_predictions() {
        let r = classification_metrics(&[1, 0, 0, 1, 0], &[1.0; 5], 0.5).unwrap();
        assert_eq!(r.recall, Some(1.0));
        assert_eq!(r.precision, Some(0.4));
    }

    #[test]
    fn r2_rules() {
        assert_eq!(importance_r2(&[0.1, 0.2, 0.7], &[0.1, 0.2, 0.7]), Some(1.0));
        assert_eq!(importance_r2(&[0.5, 0.5], &[0.2, 0.8]), None);
    }

    #[test]
    fn real_tolerance() {
        assert!(cells_match(&TypedValue::Real(1.0), &TypedValue::Real(1.0 + 1e-12)));
        assert!(!cells_match(&TypedValue::Real(1.0), &TypedValue::Real(1.0 + 1e-6)));
        assert!(!cells_match(&TypedValue::Missing, &TypedValue::Real(0.0)));
        assert!(cells_match(&TypedValue::Missing, &TypedValue::Missing));
    }

    #[test]
    fn empty_csv_is_header_only() {
        assert_eq!(render_report(&[], ReportFormat::Csv), "report,metric,value\n");
    }
}
