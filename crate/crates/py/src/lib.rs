//! Python bindings: schemas, prompt templates, JSON repair, replay-driven
//! extraction, datasets, model training and evaluation.

use std::path::PathBuf;

use pyo3::exceptions::{PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use temed_core::dataset::{self, SplitAssignment, TabularDataset};
use temed_core::evalkit::{self, NamedReport, ReportFormat, TrainedPipeline};
use temed_core::llm_gateway::{Provider, ReplayScript};
use temed_core::models::{ModelDocument, ModelFamily};
use temed_core::rextract::PromptTemplates;
use temed_core::vorc::{self, Report, VorcBudget};
use temed_core::ExtractionSchema;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Hands plain data to Python through the stdlib json module.
fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyResult<serde_json::Value> {
    let text: String = py.import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(value_err)
}

fn family(name: &str) -> PyResult<ModelFamily> {
    name.parse().map_err(value_err)
}

#[pyclass(name = "Schema", frozen)]
struct PySchema {
    inner: ExtractionSchema,
}

#[pymethods]
impl PySchema {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        ExtractionSchema::from_json_str(text).map(|inner| Self { inner }).map_err(value_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        ExtractionSchema::load(path).map(|inner| Self { inner }).map_err(value_err)
    }

    #[getter]
    fn names(&self) -> Vec<String> {
        self.inner.features().iter().map(|f| f.name.clone()).collect()
    }

    #[getter]
    fn label(&self) -> Option<String> {
        self.inner.label().map(|l| l.name.clone())
    }

    fn json_schema_block(&self) -> String {
        self.inner.json_schema_block()
    }

    /// Coerces one raw value to the feature's type; `None` means missing.
    fn canonicalize<'py>(&self, py: Python<'py>, name: &str, value: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
        let spec = self.inner.feature(name).ok_or_else(|| PyKeyError::new_err(name.to_string()))?;
        let typed = spec.canonicalize(&from_py(py, value)?).map_err(value_err)?;
        to_py(py, &typed.to_json())
    }

    fn __len__(&self) -> usize {
        self.inner.m()
    }

    fn __repr__(&self) -> String {
        format!("Schema({} features)", self.inner.m())
    }
}

#[pyclass(name = "Templates", frozen)]
struct PyTemplates {
    inner: PromptTemplates,
}

#[pymethods]
impl PyTemplates {
    /// Loads a template directory and checks its example against `schema`.
    #[staticmethod]
    fn load(dir: PathBuf, schema: &PySchema) -> PyResult<Self> {
        PromptTemplates::load_dir(dir, &schema.inner).map(|inner| Self { inner }).map_err(value_err)
    }

    #[pyo3(signature = (schema, report, reasoning = true))]
    fn render(&self, schema: &PySchema, report: &str, reasoning: bool) -> PyResult<String> {
        let out = if reasoning {
            self.inner.render(&schema.inner, report)
        } else {
            self.inner.render_extract_only(&schema.inner, report)
        };
        out.map_err(value_err)
    }
}

/// Returns the repaired text and the names of the rules that fired.
#[pyfunction]
fn repair_json(raw: &str) -> PyResult<(String, Vec<String>)> {
    let (text, actions) = vorc::repair_json(raw).map_err(value_err)?;
    Ok((text, actions.iter().map(|a| a.kind.as_str().to_string()).collect()))
}

/// Runs extraction over `reports` (a list of dicts with `id` and `text`)
/// against a recorded replay script.
#[pyfunction]
#[pyo3(signature = (schema, templates, reports, replay_script, budget = 3, parallelism = 1, reasoning = true))]
#[allow(clippy::too_many_arguments)]
fn extract<'py>(
    py: Python<'py>,
    schema: &PySchema,
    templates: &PyTemplates,
    reports: &Bound<'py, PyAny>,
    replay_script: PathBuf,
    budget: u32,
    parallelism: usize,
    reasoning: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let reports: Vec<Report> = serde_json::from_value(from_py(py, reports)?).map_err(value_err)?;
    let script = ReplayScript::load(replay_script).map_err(value_err)?;
    let provider = Provider::replay(script);
    let templates = if reasoning { templates.inner.clone() } else { templates.inner.extract_only() };
    let budget = VorcBudget {
        max_correction_prompts: budget,
    };
    let out = py
        .detach(|| vorc::extract_corpus(&provider, &reports, &schema.inner, &templates, budget, parallelism))
        .map_err(value_err)?;
    #[derive(Serialize)]
    struct Out<'a> {
        records: &'a [vorc::ExtractionRecord],
        failures: Vec<(String, String)>,
        provenance: &'a [vorc::ProvenanceEntry],
        stats: &'a vorc::CorpusStats,
    }
    let failures = out.failures.iter().map(|e| (e.source_id().to_string(), e.to_string())).collect();
    to_py(
        py,
        &Out {
            records: &out.records,
            failures,
            provenance: &out.provenance,
            stats: &out.stats,
        },
    )
}

#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    inner: TabularDataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load_csv(path: PathBuf, schema: &PySchema) -> PyResult<Self> {
        TabularDataset::load_csv(path, &schema.inner).map(|inner| Self { inner }).map_err(value_err)
    }

    fn save_csv(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_csv(path).map_err(value_err)
    }

    #[getter]
    fn ids(&self) -> Vec<String> {
        self.inner.ids.clone()
    }

    #[getter]
    fn labels(&self) -> Option<Vec<u32>> {
        self.inner.labels().ok().map(|ys| ys.iter().map(|&y| u32::from(y)).collect())
    }

    /// Rows as lists of Python values, `None` for missing cells.
    fn rows<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let rows: Vec<Vec<serde_json::Value>> =
            self.inner.rows.iter().map(|r| r.iter().map(|v| v.to_json()).collect()).collect();
        to_py(py, &rows)
    }

    /// Stratified train/val/test split as a dict of row indices.
    fn split<'py>(&self, py: Python<'py>, seed: u64) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &dataset::split(&self.inner, seed).map_err(value_err)?)
    }

    fn __len__(&self) -> usize {
        self.inner.n()
    }
}

#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: TrainedPipeline,
    schema: ExtractionSchema,
    seed: u64,
}

#[pymethods]
impl PyModel {
    #[getter]
    fn family(&self) -> &'static str {
        self.inner.model.family().as_str()
    }

    /// Selected hyperparameters and every grid candidate's validation accuracy.
    fn grid<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.grid)
    }

    /// Importance per encoded column, keyed by column name.
    fn feature_importances(&self) -> Vec<(String, f64)> {
        self.inner
            .encoder
            .column_names
            .iter()
            .cloned()
            .zip(self.inner.model.feature_importances())
            .collect()
    }

    fn predict_proba(&self, data: &PyDataset) -> PyResult<Vec<f64>> {
        let all: Vec<usize> = (0..data.inner.n()).collect();
        let x = dataset::transform(&data.inner, &self.inner.encoder, &all).map_err(value_err)?;
        self.inner.model.predict_proba(&x.rows).map_err(value_err)
    }

    /// Classification metrics on the given rows (all rows by default).
    #[pyo3(signature = (data, rows = None))]
    fn score<'py>(&self, py: Python<'py>, data: &PyDataset, rows: Option<Vec<usize>>) -> PyResult<Bound<'py, PyAny>> {
        let rows = rows.unwrap_or_else(|| (0..data.inner.n()).collect());
        to_py(py, &self.inner.score(&data.inner, &rows).map_err(value_err)?)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        ModelDocument::new(
            self.inner.model.clone(),
            self.inner.encoder.clone(),
            self.schema.clone(),
            Some(self.seed),
        )
        .save(path)
        .map_err(value_err)
    }
}

/// Splits with `seed`, fits the encoder on train rows and grid-searches
/// the family against the validation rows.
#[pyfunction]
#[pyo3(signature = (data, family, seed = 0))]
fn train(py: Python<'_>, data: &PyDataset, family: &str, seed: u64) -> PyResult<PyModel> {
    let fam = self::family(family)?;
    let assignment: SplitAssignment = dataset::split(&data.inner, seed).map_err(value_err)?;
    let inner = py
        .detach(|| evalkit::train_on_split(&data.inner, &assignment, fam))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(PyModel {
        inner,
        schema: data.inner.schema.clone(),
        seed,
    })
}

/// Cell-level agreement of an extracted table with the ground truth.
#[pyfunction]
fn extraction_metrics<'py>(py: Python<'py>, truth: &PyDataset, extracted: &PyDataset) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &evalkit::extraction_metrics(&extracted.inner, &truth.inner, None).map_err(value_err)?)
}

/// Extraction metrics plus per-family fidelity of models trained on each table.
#[pyfunction]
#[pyo3(signature = (truth, extracted, families = None, seed = 0, format = "json"))]
fn compare<'py>(
    py: Python<'py>,
    truth: &PyDataset,
    extracted: &PyDataset,
    families: Option<Vec<String>>,
    seed: u64,
    format: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let families = match families {
        None => ModelFamily::ALL.to_vec(),
        Some(names) => names.iter().map(|n| family(n)).collect::<PyResult<_>>()?,
    };
    let reports: Vec<NamedReport> = py
        .detach(|| evalkit::compare_tables(&truth.inner, &extracted.inner, None, &families, seed))
        .map_err(value_err)?;
    match format {
        "json" => to_py(py, &reports),
        "text" => Ok(evalkit::render_report(&reports, ReportFormat::Text).into_pyobject(py)?.into_any()),
        "csv" => Ok(evalkit::render_report(&reports, ReportFormat::Csv).into_pyobject(py)?.into_any()),
        other => Err(value_err(format!("unknown format `{other}`"))),
    }
}

/// Rank AUC with ties worth one half; `None` when a class is absent.
#[pyfunction]
fn auc(labels: Vec<u8>, scores: Vec<f64>) -> PyResult<Option<f64>> {
    if labels.len() != scores.len() {
        return Err(value_err("labels and scores differ in length"));
    }
    Ok(evalkit::auc(&labels, &scores))
}

#[pymodule]
fn temed(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PySchema>()?;
    m.add_class::<PyTemplates>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(repair_json, m)?)?;
    m.add_function(wrap_pyfunction!(extract, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(extraction_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    Ok(())
}
