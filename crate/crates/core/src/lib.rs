//! Schema-driven extraction of tabular records from free-text medical
//! reports with a language model, followed by training and evaluation of
//! interpretable classifiers on the extracted table.

pub mod schema;
pub mod rextract;
pub mod llm_gateway;
pub mod vorc;
pub mod dataset;
pub mod models;
pub mod evalkit;

pub use schema::{ExtractionSchema, FeatureKind, FeatureSpec, LabelSpec, TypedValue};
pub use vorc::{ExtractionRecord, VorcBudget};
