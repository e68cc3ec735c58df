//! Validation-and-correction loop around a single extraction: parse the
//! model response, repair it by rule where possible, validate it against the
//! schema, and re-prompt the model with a targeted correction when that
//! fails.

mod corpus;
pub mod repair;

use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::llm_gateway::{CompletionRequest, GatewayError, Provider};
use crate::rextract::{build_json_correction_prompt, build_type_correction_prompt, DEFAULT_MAX_PROMPT_CHARS};
use crate::schema::{fold_key, CoercionError, ExtractionSchema, TypedValue};

pub use corpus::{
    extract_corpus, read_corpus_jsonl, write_extracted_csv, write_provenance_jsonl, CorpusError, CorpusOutput,
    CorpusStats, ProvenanceEntry, Report,
};
pub use repair::{repair_json, RepairAction, RepairKind, Unrepairable};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("no JSON object found in response")]
    NoJsonFound,
    #[error("invalid JSON at line {line}, column {column} of the object starting at byte {offset}: {message}")]
    StrictParse {
        offset: usize,
        line: usize,
        column: usize,
        message: String,
    },
}

/// Parses the last top-level `{...}` block of a model response.
pub fn parse_response(raw: &str) -> Result<Map<String, Value>, ParseError> {
    let span = repair::last_object_span(raw).ok_or(ParseError::NoJsonFound)?;
    match serde_json::from_str::<Value>(&raw[span.clone()]) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => unreachable!("a brace-delimited block is always an object"),
        Err(e) => Err(ParseError::StrictParse {
            offset: span.start,
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ViolationKind {
    MissingRequiredKey,
    UnknownExtraKey,
    /// Two keys of the object fold to the same feature.
    DuplicateKey,
    Coercion(CoercionError),
}

/// One schema violation. `feature` is the schema name for known features and
/// the raw key otherwise; `received` is the offending value as JSON.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub feature: String,
    pub received: String,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ViolationKind::MissingRequiredKey => write!(f, "{}: required key is missing", self.feature),
            ViolationKind::UnknownExtraKey => write!(f, "{}: unknown key", self.feature),
            ViolationKind::DuplicateKey => write!(f, "{}: key given more than once", self.feature),
            ViolationKind::Coercion(e) => write!(f, "{}: {e}", self.feature),
        }
    }
}

/// One validated row plus how it was obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionRecord {
    pub source_id: String,
    pub values: IndexMap<String, TypedValue>,
    /// Correction prompts sent to the model for this record.
    pub vorc_iterations: u32,
    pub repairs: Vec<RepairAction>,
}

/// Validates and canonicalizes a parsed object. Keys match features after
/// [`fold_key`]. A key naming the schema label is ignored. Every violation is
/// reported, features first in schema order, then unknown keys.
pub fn validate_record(
    obj: &Map<String, Value>,
    schema: &ExtractionSchema,
    source_id: &str,
) -> Result<ExtractionRecord, Vec<Violation>> {
    let label_key = schema.label().map(|l| fold_key(&l.name));
    let mut slots: Vec<Option<&Value>> = vec![None; schema.m()];
    let mut extras = Vec::new();
    for (key, value) in obj {
        match schema.position_folded(key) {
            Some(i) if slots[i].is_none() => slots[i] = Some(value),
            Some(i) => extras.push(Violation {
                feature: schema.features()[i].name.clone(),
                received: value.to_string(),
                kind: ViolationKind::DuplicateKey,
            }),
            None if label_key.as_deref() == Some(fold_key(key).as_str()) => {}
            None => extras.push(Violation {
                feature: key.clone(),
                received: value.to_string(),
                kind: ViolationKind::UnknownExtraKey,
            }),
        }
    }

    let mut violations = Vec::new();
    let mut values = IndexMap::with_capacity(schema.m());
    for (spec, slot) in schema.features().iter().zip(&slots) {
        match slot {
            None if spec.allow_missing => {
                values.insert(spec.name.clone(), TypedValue::Missing);
            }
            None => violations.push(Violation {
                feature: spec.name.clone(),
                received: String::new(),
                kind: ViolationKind::MissingRequiredKey,
            }),
            Some(v) => match spec.canonicalize(v) {
                Ok(tv) => {
                    values.insert(spec.name.clone(), tv);
                }
                Err(e) => violations.push(Violation {
                    feature: spec.name.clone(),
                    received: v.to_string(),
                    kind: ViolationKind::Coercion(e),
                }),
            },
        }
    }
    violations.extend(extras);
    if violations.is_empty() {
        Ok(ExtractionRecord {
            source_id: source_id.to_string(),
            values,
            vorc_iterations: 0,
            repairs: Vec::new(),
        })
    } else {
        Err(violations)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VorcBudget {
    pub max_correction_prompts: u32,
}

impl Default for VorcBudget {
    fn default() -> Self {
        Self {
            max_correction_prompts: 3,
        }
    }
}

/// What was wrong with the last response when the budget ran out.
#[derive(Debug, Clone, PartialEq)]
pub enum FinalProblem {
    Json(String),
    Types(Vec<Violation>),
}

impl fmt::Display for FinalProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FinalProblem::Json(msg) => write!(f, "unparseable JSON: {msg}"),
            FinalProblem::Types(vs) => {
                let parts: Vec<String> = vs.iter().map(ToString::to_string).collect();
                write!(f, "schema violations: {}", parts.join("; "))
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum VorcError {
    #[error("record {source_id}: correction budget exhausted after {vorc_iterations} prompts; {problem}")]
    BudgetExhausted {
        source_id: String,
        vorc_iterations: u32,
        problem: FinalProblem,
    },
    #[error("record {source_id}: provider error after {vorc_iterations} correction prompts: {error}")]
    Provider {
        source_id: String,
        vorc_iterations: u32,
        error: GatewayError,
    },
    #[error("record {source_id}: cannot build prompt: {message}")]
    Prompt { source_id: String, message: String },
}

impl VorcError {
    pub fn source_id(&self) -> &str {
        match self {
            VorcError::BudgetExhausted { source_id, .. }
            | VorcError::Provider { source_id, .. }
            | VorcError::Prompt { source_id, .. } => source_id,
        }
    }

    pub fn vorc_iterations(&self) -> u32 {
        match self {
            VorcError::BudgetExhausted { vorc_iterations, .. } | VorcError::Provider { vorc_iterations, .. } => {
                *vorc_iterations
            }
            VorcError::Prompt { .. } => 0,
        }
    }
}

enum Attempt {
    Valid(ExtractionRecord),
    BadJson { error: String, quoted: String },
    BadTypes { json: String, violations: Vec<Violation> },
}

fn interpret(raw: &str, schema: &ExtractionSchema, source_id: &str) -> Attempt {
    let (obj, json_text, repairs) = match parse_response(raw) {
        Ok(obj) => {
            let span = repair::last_object_span(raw).expect("parsed");
            (obj, raw[span].to_string(), Vec::new())
        }
        Err(parse_err) => match repair_json(raw) {
            Ok((fixed, actions)) => match parse_response(&fixed) {
                Ok(obj) => (obj, fixed, actions),
                Err(e) => {
                    return Attempt::BadJson {
                        error: e.to_string(),
                        quoted: raw.to_string(),
                    }
                }
            },
            Err(_) => {
                return Attempt::BadJson {
                    error: parse_err.to_string(),
                    quoted: raw.to_string(),
                }
            }
        },
    };
    match validate_record(&obj, schema, source_id) {
        Ok(mut record) => {
            record.repairs = repairs;
            Attempt::Valid(record)
        }
        Err(violations) => Attempt::BadTypes {
            json: json_text,
            violations,
        },
    }
}

/// Runs the loop for one record. At most `budget.max_correction_prompts`
/// requests follow the initial one; correction prompts always quote the
/// original extraction prompt, not the previous correction.
pub fn run_vorc(
    provider: &Provider,
    prompt: &str,
    schema: &ExtractionSchema,
    budget: VorcBudget,
    source_id: &str,
) -> Result<ExtractionRecord, VorcError> {
    let mut request = CompletionRequest::new(prompt);
    let mut iterations = 0u32;
    loop {
        let response = provider.complete(&request).map_err(|error| VorcError::Provider {
            source_id: source_id.to_string(),
            vorc_iterations: iterations,
            error,
        })?;
        let next_prompt = match interpret(&response.text, schema, source_id) {
            Attempt::Valid(mut record) => {
                record.vorc_iterations = iterations;
                return Ok(record);
            }
            Attempt::BadJson { error, quoted } => {
                if iterations >= budget.max_correction_prompts {
                    return Err(exhausted(source_id, iterations, FinalProblem::Json(error)));
                }
                log::debug!("{source_id}: JSON correction after: {error}");
                build_json_correction_prompt(prompt, &quoted, &error, DEFAULT_MAX_PROMPT_CHARS)
            }
            Attempt::BadTypes { json, violations } => {
                if iterations >= budget.max_correction_prompts {
                    return Err(exhausted(source_id, iterations, FinalProblem::Types(violations)));
                }
                log::debug!("{source_id}: type correction for {} violations", violations.len());
                build_type_correction_prompt(prompt, &json, &violations, schema, DEFAULT_MAX_PROMPT_CHARS)
            }
        };
        iterations += 1;
        request.prompt = next_prompt;
    }
}

fn exhausted(source_id: &str, iterations: u32, problem: FinalProblem) -> VorcError {
    VorcError::BudgetExhausted {
        source_id: source_id.to_string(),
        vorc_iterations: iterations,
        problem,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm_gateway::ReplayScript;
    use crate::schema::{FeatureKind, FeatureSpec};
    use serde_json::json;

    fn spec(name: &str, kind: FeatureKind) -> FeatureSpec {
        FeatureSpec {
            name: name.into(),
            title: name.into(),
            description: String::new(),
            kind,
            allowed_values: Vec::new(),
            numeric_range: None,
            allow_missing: true,
        }
    }

    fn one_int() -> ExtractionSchema {
        ExtractionSchema::new(vec![spec("a", FeatureKind::Integer)], None).unwrap()
    }

    fn obj(v: Value) -> Map<String, Value> {
        v.as_object().unwrap().clone()
    }

    #[test]
    fn parse_takes_last_block() {
        let m = parse_response("Reasoning: {not this}\nOutput JSON:\n{\"age\": 63}").unwrap();
        assert_eq!(m["age"], json!(63));
        assert!(parse_response("{}").unwrap().is_empty());
        assert_eq!(parse_response("no braces here"), Err(ParseError::NoJsonFound));
        assert!(matches!(parse_response("{'a': 1}"), Err(ParseError::StrictParse { offset: 0, .. })));
    }

    #[test]
    fn parse_ignores_braces_in_strings() {
        let m = parse_response("{\"a\": \"}{\"} trailing").unwrap();
        assert_eq!(m["a"], json!("}{"));
    }

    #[test]
    fn validation_collects_everything() {
        let schema = ExtractionSchema::new(
            vec![
                FeatureSpec {
                    allow_missing: false,
                    ..spec("age", FeatureKind::Integer)
                },
                spec("bmi", FeatureKind::Real),
            ],
            None,
        )
        .unwrap();
        let errs = validate_record(&obj(json!({"Age": "sixty", "BMI": "x", "Extra": 1})), &schema, "r").unwrap_err();
        let kinds: Vec<_> = errs.iter().map(|v| v.feature.as_str()).collect();
        assert_eq!(kinds, ["age", "bmi", "Extra"]);
        assert!(matches!(errs[2].kind, ViolationKind::UnknownExtraKey));

        let errs = validate_record(&obj(json!({})), &schema, "r").unwrap_err();
        assert_eq!(errs.len(), 1);
        assert!(matches!(errs[0].kind, ViolationKind::MissingRequiredKey));

        let rec = validate_record(&obj(json!({"age": 3})), &schema, "r").unwrap();
        assert_eq!(rec.values["bmi"], TypedValue::Missing);
    }

    #[test]
    fn duplicate_folded_keys_are_rejected() {
        let errs = validate_record(&obj(json!({"a": 1, "A": 2})), &one_int(), "r").unwrap_err();
        assert!(matches!(errs[0].kind, ViolationKind::DuplicateKey));
    }

    #[test]
    fn loop_happy_path_and_rule_repair() {
        let p = Provider::replay(ReplayScript::sequential(["{\"a\": 1}"]));
        let rec = run_vorc(&p, "prompt", &one_int(), VorcBudget::default(), "x").unwrap();
        assert_eq!((rec.vorc_iterations, rec.repairs.len()), (0, 0));

        let p = Provider::replay(ReplayScript::sequential(["{'a': 1}"]));
        let rec = run_vorc(&p, "prompt", &one_int(), VorcBudget::default(), "x").unwrap();
        assert_eq!(rec.values["a"], TypedValue::Integer(1));
        assert_eq!(rec.vorc_iterations, 0);
        assert_eq!(rec.repairs[0].kind, RepairKind::SingleToDoubleQuotes);
    }

    #[test]
    fn loop_counts_corrections() {
        let p = Provider::replay(ReplayScript::sequential(["not json", "{\"a\": 1}"]));
        let rec = run_vorc(&p, "prompt", &one_int(), VorcBudget::default(), "x").unwrap();
        assert_eq!(rec.vorc_iterations, 1);

        let p = Provider::replay(ReplayScript::sequential(["{\"a\": \"x\"}", "{\"a\": 2.5}", "{\"a\": 2}"]));
        let rec = run_vorc(&p, "prompt", &one_int(), VorcBudget::default(), "x").unwrap();
        assert_eq!(rec.vorc_iterations, 2);
    }

    #[test]
    fn loop_exhausts_budget() {
        let p = Provider::replay(ReplayScript::sequential(["bad", "bad", "bad", "bad", "{\"a\": 1}"]));
        let err = run_vorc(&p, "prompt", &one_int(), VorcBudget::default(), "x").unwrap_err();
        assert!(matches!(err, VorcError::BudgetExhausted { vorc_iterations: 3, .. }));

        let p = Provider::replay(ReplayScript::sequential(["bad", "bad", "bad"]));
        let budget = VorcBudget {
            max_correction_prompts: 2,
        };
        let err = run_vorc(&p, "prompt", &one_int(), budget, "x").unwrap_err();
        assert!(matches!(err, VorcError::BudgetExhausted { vorc_iterations: 2, .. }));
    }

    #[test]
    fn zero_budget_never_corrects() {
        let p = Provider::replay(ReplayScript::sequential(["bad"]));
        let budget = VorcBudget {
            max_correction_prompts: 0,
        };
        let err = run_vorc(&p, "prompt", &one_int(), budget, "x").unwrap_err();
        assert_eq!(err.vorc_iterations(), 0);
    }

    #[test]
    fn correction_prompt_quotes_original() {
        let script = ReplayScript::from_json_str(
            r#"[{"match_index": 0, "response": "{\"a\": \"x\"}"},
                {"match_substring": "ORIGINAL-PROMPT", "response": "{\"a\": 4}"}]"#,
        )
        .unwrap();
        let p = Provider::replay(script);
        let rec = run_vorc(&p, "ORIGINAL-PROMPT", &one_int(), VorcBudget::default(), "x").unwrap();
        assert_eq!(rec.values["a"], TypedValue::Integer(4));
    }

    #[test]
    fn provider_errors_propagate() {
        let p = Provider::replay(ReplayScript::sequential(Vec::<String>::new()));
        let err = run_vorc(&p, "prompt", &one_int(), VorcBudget::default(), "x").unwrap_err();
        assert!(matches!(err, VorcError::Provider { .. }));
    }
}
