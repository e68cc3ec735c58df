//! Corpus-level extraction: a bounded worker pool over reports, plus the
//! JSON-lines and CSV file formats around it.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{run_vorc, ExtractionRecord, RepairAction, VorcBudget, VorcError};
use crate::llm_gateway::Provider;
use crate::rextract::PromptTemplates;
use crate::schema::ExtractionSchema;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read corpus {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("duplicate report id `{0}`")]
    DuplicateId(String),
    #[error("parallelism must be at least 1")]
    ZeroParallelism,
    #[error("write failed: {0}")]
    Write(#[from] std::io::Error),
    #[error("CSV write failed: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

/// Reads a JSON-lines corpus; blank lines are skipped and ids must be unique.
pub fn read_corpus_jsonl(path: impl AsRef<Path>) -> Result<Vec<Report>, CorpusError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut reports = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let report: Report = serde_json::from_str(&line).map_err(|e| CorpusError::Line {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(report.id.clone()) {
            return Err(CorpusError::DuplicateId(report.id));
        }
        reports.push(report);
    }
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_reports: usize,
    pub n_records: usize,
    pub n_failures: usize,
    /// Reports with at least one correction prompt, failures included.
    pub n_with_corrections: usize,
    pub correction_prompts_total: u64,
    /// `n_with_corrections / n_reports`; `None` for an empty corpus.
    pub vorc_call_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub id: String,
    pub vorc_iterations: u32,
    pub repairs: Vec<RepairAction>,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug)]
pub struct CorpusOutput {
    /// Successful records in input order.
    pub records: Vec<ExtractionRecord>,
    /// Failed records in input order.
    pub failures: Vec<VorcError>,
    /// One entry per report, in input order.
    pub provenance: Vec<ProvenanceEntry>,
    pub stats: CorpusStats,
}

/// Extracts every report with at most `parallelism` records in flight.
/// Output order follows input order whatever the completion order.
pub fn extract_corpus(
    provider: &Provider,
    reports: &[Report],
    schema: &ExtractionSchema,
    templates: &PromptTemplates,
    budget: VorcBudget,
    parallelism: usize,
) -> Result<CorpusOutput, CorpusError> {
    if parallelism == 0 {
        return Err(CorpusError::ZeroParallelism);
    }
    let mut seen = HashSet::new();
    for r in reports {
        if !seen.insert(r.id.as_str()) {
            return Err(CorpusError::DuplicateId(r.id.clone()));
        }
    }

    let run_one = |report: &Report| -> Result<ExtractionRecord, VorcError> {
        let prompt = templates.render(schema, &report.text).map_err(|e| VorcError::Prompt {
            source_id: report.id.clone(),
            message: e.to_string(),
        })?;
        run_vorc(provider, &prompt, schema, budget, &report.id)
    };

    let mut slots: Vec<Option<Result<ExtractionRecord, VorcError>>> = (0..reports.len()).map(|_| None).collect();
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|scope| {
        for _ in 0..parallelism.min(reports.len()) {
            let tx = tx.clone();
            let next = &next;
            let run_one = &run_one;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(report) = reports.get(i) else { break };
                if tx.send((i, run_one(report))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, outcome) in rx {
            slots[i] = Some(outcome);
        }
    });

    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut provenance = Vec::with_capacity(reports.len());
    let mut n_with_corrections = 0;
    let mut correction_prompts_total = 0u64;
    for (report, slot) in reports.iter().zip(slots) {
        let outcome = slot.expect("every report is processed");
        let iterations = match &outcome {
            Ok(r) => r.vorc_iterations,
            Err(e) => e.vorc_iterations(),
        };
        if iterations >= 1 {
            n_with_corrections += 1;
        }
        correction_prompts_total += u64::from(iterations);
        match outcome {
            Ok(record) => {
                provenance.push(ProvenanceEntry {
                    id: report.id.clone(),
                    vorc_iterations: iterations,
                    repairs: record.repairs.clone(),
                    status: "ok".into(),
                    error: None,
                });
                records.push(record);
            }
            Err(err) => {
                log::warn!("{err}");
                provenance.push(ProvenanceEntry {
                    id: report.id.clone(),
                    vorc_iterations: iterations,
                    repairs: Vec::new(),
                    status: "failed".into(),
                    error: Some(err.to_string()),
                });
                failures.push(err);
            }
        }
    }
    let n = reports.len();
    let stats = CorpusStats {
        n_reports: n,
        n_records: records.len(),
        n_failures: failures.len(),
        n_with_corrections,
        correction_prompts_total,
        vorc_call_rate: (n > 0).then(|| n_with_corrections as f64 / n as f64),
    };
    Ok(CorpusOutput {
        records,
        failures,
        provenance,
        stats,
    })
}

/// Writes the extracted table: `id`, one column per feature, and the label
/// column (taken from the corpus) when the schema defines one.
pub fn write_extracted_csv<W: Write>(
    out: W,
    schema: &ExtractionSchema,
    records: &[ExtractionRecord],
    reports: &[Report],
) -> Result<(), CorpusError> {
    let labels: HashMap<&str, &str> = reports
        .iter()
        .filter_map(|r| r.label.as_deref().map(|l| (r.id.as_str(), l)))
        .collect();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["id".to_string()];
    header.extend(schema.features().iter().map(|f| f.name.clone()));
    if let Some(label) = schema.label() {
        header.push(label.name.clone());
    }
    w.write_record(&header)?;
    for rec in records {
        let mut row = vec![rec.source_id.clone()];
        row.extend(schema.features().iter().map(|f| rec.values[&f.name].to_cell()));
        if schema.label().is_some() {
            row.push(labels.get(rec.source_id.as_str()).map(|s| s.to_string()).unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_provenance_jsonl<W: Write>(mut out: W, entries: &[ProvenanceEntry]) -> Result<(), CorpusError> {
    for e in entries {
        serde_json::to_writer(&mut out, e).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
