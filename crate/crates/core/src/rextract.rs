//! Prompt assembly: reason-and-extract prompts, correction prompts fed back
//! by the validation loop, and the few-shot classification baseline.
//!
//! Section headings are fixed strings; only the instructions, the worked
//! example and the reasoning guidelines come from per-schema template files.

use std::path::Path;

use thiserror::Error;

use crate::schema::{CoercionError, ExtractionSchema, LabelSpec};
use crate::vorc::{validate_record, Violation, ViolationKind};

pub const DEFAULT_MAX_PROMPT_CHARS: usize = 14_000;
pub const MAX_FEWSHOT_SHOTS: usize = 32;

pub const SCHEMA_HEADING: &str = "Here is the output JSON schema:";
pub const FORMAT_HEADING: &str = "When generating JSON instance follow this format:";
pub const EXAMPLE_HEADING: &str = "Here is an example of a process:";
pub const SEPARATOR: &str =
    "--------------------------------------------------------------------------------";
pub const TRUNCATION_MARKER: &str = "\n[... truncated ...]\n";

const DEFAULT_INSTRUCTIONS: &str = "The output JSON should be formatted as a JSON instance that conforms to the JSON schema from Pydantic.

As an example, for the schema {\"properties\": {\"foo\": {\"title\": \"Foo\", \"description\": \"a list of strings\", \"type\": \"array\", \"items\": {\"type\": \"string\"}}}, \"required\": [\"foo\"]}}
the object {\"foo\": [\"bar\", \"baz\"]} is a well-formatted instance of the schema. The object {\"properties\": {\"foo\": [\"bar\", \"baz\"]}} is not well-formatted.";

const FORMAT_SECTION: &str = "Medical report: the input medical report from which you should extract JSON instance.
Reasoning: give me an explanation of how you assign value for a given key. Thinking step by step for each key before assigning a value to it.
Output JSON: The final output JSON should be formatted as a JSON instance that conforms to the output JSON schema above.";

/// Skeleton of a rendered prompt. `{{SCHEMA_BLOCK}}` and `{{REPORT}}` are
/// the public placeholders; the `{{@...}}` slots are filled from template
/// files. Substitution is single pass, so braces inside inserted text are
/// never re-interpreted.
const PROMPT_SKELETON: &str = "{{@INSTRUCTIONS}}

Here is the output JSON schema:
```
{{SCHEMA_BLOCK}}
```

When generating JSON instance follow this format:

{{@FORMAT}}

Here is an example of a process:
Medical report:
{{@EXAMPLE_REPORT}}
{{@EXAMPLE_REASONING}}
Output JSON:
{{@EXAMPLE_OUTPUT}}
--------------------------------------------------------------------------------
Medical report: {{REPORT}}";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("cannot read template file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("example output is not valid JSON: {0}")]
    ExampleNotJson(String),
    #[error("example output does not validate against the schema: {}", format_violations(.0))]
    ExampleSchemaMismatch(Vec<Violation>),
    #[error("report text is empty")]
    EmptyReport,
    #[error("few-shot prompts need between 1 and {MAX_FEWSHOT_SHOTS} shots, got {0}")]
    ShotCount(usize),
    #[error("shot {index} has label `{label}`, which is neither `{positive}` nor `{negative}`")]
    InvalidShotLabel {
        index: usize,
        label: String,
        positive: String,
        negative: String,
    },
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct OneShotExample {
    pub report_text: String,
    pub reasoning_text: String,
    pub output_json_text: String,
}

impl OneShotExample {
    /// Checks that the example output parses and validates against `schema`.
    pub fn check(&self, schema: &ExtractionSchema) -> Result<(), PromptError> {
        let value: serde_json::Value = serde_json::from_str(&self.output_json_text)
            .map_err(|e| PromptError::ExampleNotJson(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| PromptError::ExampleNotJson("top-level value is not an object".into()))?;
        validate_record(obj, schema, "example")
            .map(|_| ())
            .map_err(PromptError::ExampleSchemaMismatch)
    }

    /// Same example with the reasoning removed.
    pub fn without_reasoning(&self) -> Self {
        Self {
            reasoning_text: String::new(),
            ..self.clone()
        }
    }
}

/// Per-schema template set as loaded from a template directory.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplates {
    pub instructions: String,
    pub example: OneShotExample,
    pub guidelines: String,
}

impl PromptTemplates {
    /// Loads `instructions.txt`, `example_report.txt`, `example_reasoning.txt`,
    /// `example_output.json` and `guidelines.txt` from `dir`, then validates
    /// the example output against `schema`. A missing `instructions.txt`
    /// falls back to the built-in preamble; the other files are required.
    pub fn load_dir(dir: impl AsRef<Path>, schema: &ExtractionSchema) -> Result<Self, PromptError> {
        let dir = dir.as_ref();
        let read = |name: &str| -> Result<String, PromptError> {
            let path = dir.join(name);
            std::fs::read_to_string(&path)
                .map(|s| s.trim_end().to_string())
                .map_err(|source| PromptError::Io {
                    path: path.display().to_string(),
                    source,
                })
        };
        let instructions = if dir.join("instructions.txt").exists() {
            read("instructions.txt")?
        } else {
            DEFAULT_INSTRUCTIONS.to_string()
        };
        let example = OneShotExample {
            report_text: read("example_report.txt")?,
            reasoning_text: read("example_reasoning.txt")?,
            output_json_text: read("example_output.json")?,
        };
        example.check(schema)?;
        Ok(Self {
            instructions,
            example,
            guidelines: read("guidelines.txt")?,
        })
    }

    /// Renders the reason-and-extract prompt for one report.
    pub fn render(&self, schema: &ExtractionSchema, report: &str) -> Result<String, PromptError> {
        render_prompt(&self.instructions, schema, &self.example, &self.guidelines, report)
    }

    /// Template set for the ablated prompt: no guidelines, no example reasoning.
    pub fn extract_only(&self) -> Self {
        Self {
            instructions: self.instructions.clone(),
            example: self.example.without_reasoning(),
            guidelines: String::new(),
        }
    }

    /// Renders the ablated prompt: no guidelines, no example reasoning.
    pub fn render_extract_only(&self, schema: &ExtractionSchema, report: &str) -> Result<String, PromptError> {
        render_prompt(&self.instructions, schema, &self.example.without_reasoning(), "", report)
    }
}

/// Builds a reason-and-extract prompt with the default instruction preamble.
pub fn build_rextract_prompt(
    schema: &ExtractionSchema,
    example: &OneShotExample,
    guidelines: &str,
    report: &str,
) -> Result<String, PromptError> {
    example.check(schema)?;
    render_prompt(DEFAULT_INSTRUCTIONS, schema, example, guidelines, report)
}

fn render_prompt(
    instructions: &str,
    schema: &ExtractionSchema,
    example: &OneShotExample,
    guidelines: &str,
    report: &str,
) -> Result<String, PromptError> {
    if report.trim().is_empty() {
        return Err(PromptError::EmptyReport);
    }
    let reasoning = reasoning_block(guidelines, &example.reasoning_text);
    let schema_block = schema.json_schema_block();
    let slots: [(&str, &str); 7] = [
        ("{{@INSTRUCTIONS}}", instructions),
        ("{{SCHEMA_BLOCK}}", &schema_block),
        ("{{@FORMAT}}", FORMAT_SECTION),
        ("{{@EXAMPLE_REPORT}}", &example.report_text),
        ("{{@EXAMPLE_REASONING}}", &reasoning),
        ("{{@EXAMPLE_OUTPUT}}", &example.output_json_text),
        ("{{REPORT}}", report),
    ];
    Ok(fill_placeholders(PROMPT_SKELETON, &slots))
}

/// The `Reasoning:` section of the worked example. Empty when there are
/// neither guidelines nor example reasoning, which yields the extract-only
/// prompt.
fn reasoning_block(guidelines: &str, reasoning: &str) -> String {
    let parts: Vec<&str> = [guidelines.trim(), reasoning.trim()]
        .into_iter()
        .filter(|s| !s.is_empty())
        .collect();
    if parts.is_empty() {
        return String::new();
    }
    format!("\nReasoning:\n{}\n", parts.join("\n"))
}

/// Single-pass placeholder substitution over `template`.
pub fn fill_placeholders(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + slots.iter().map(|(_, v)| v.len()).sum::<usize>());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let tail = &rest[start..];
        match slots.iter().find(|(key, _)| tail.starts_with(key)) {
            Some((key, value)) => {
                out.push_str(value);
                rest = &tail[key.len()..];
            }
            None => {
                out.push_str("{{");
                rest = &tail[2..];
            }
        }
    }
    out.push_str(rest);
    out
}

/// Shortens `text` to at most `budget` characters by keeping its head and
/// tail around [`TRUNCATION_MARKER`]. Text within budget is returned as is.
pub fn truncate_middle(text: &str, budget: usize) -> String {
    let len = text.chars().count();
    if len <= budget {
        return text.to_string();
    }
    let marker_len = TRUNCATION_MARKER.chars().count();
    if budget <= marker_len {
        return text.chars().take(budget).collect();
    }
    let keep = budget - marker_len;
    let head = keep.div_ceil(2);
    let tail = keep - head;
    let mut out: String = text.chars().take(head).collect();
    out.push_str(TRUNCATION_MARKER);
    out.extend(text.chars().skip(len - tail));
    out
}

/// Minimum number of response characters kept in a correction prompt, even
/// when the original prompt alone exceeds the limit.
const MIN_RESPONSE_CHARS: usize = 512;

fn response_budget(max_prompt_chars: usize, fixed: usize) -> usize {
    max_prompt_chars.saturating_sub(fixed).max(MIN_RESPONSE_CHARS)
}

const JSON_CORRECTION_INTRO: &str = "Your previous response could not be parsed as a JSON instance.";
const JSON_CORRECTION_INSTRUCTION: &str = "Extract the JSON data once more. Respond with only the corrected JSON instance that conforms to the output JSON schema, with no other text.";

/// Prompt sent back to the model after a response whose JSON could not be
/// parsed or repaired. The response is shortened around its middle when the
/// whole prompt would exceed `max_prompt_chars`.
pub fn build_json_correction_prompt(
    original_prompt: &str,
    response: &str,
    error: &str,
    max_prompt_chars: usize,
) -> String {
    let assemble = |resp: &str| {
        format!(
            "{JSON_CORRECTION_INTRO}\n\nOriginal prompt:\n{original_prompt}\n\nResponse:\n{resp}\n\nError:\n{error}\n\n{JSON_CORRECTION_INSTRUCTION}"
        )
    };
    let fixed = assemble("").chars().count();
    assemble(&truncate_middle(response, response_budget(max_prompt_chars, fixed)))
}

const TYPE_CORRECTION_INTRO: &str = "Your previous response contains values that do not match the output JSON schema.";
const TYPE_CORRECTION_INSTRUCTION: &str = "Make the necessary corrections and respond with only the corrected JSON instance that conforms to the output JSON schema, with no other text.";

/// Prompt listing each schema violation with the received value and what
/// the schema expects. Violations keep their input order.
pub fn build_type_correction_prompt(
    original_prompt: &str,
    response_json: &str,
    violations: &[Violation],
    schema: &ExtractionSchema,
    max_prompt_chars: usize,
) -> String {
    let mut problems = String::new();
    for v in violations {
        problems.push_str("- ");
        problems.push_str(&describe_violation(v, schema));
        problems.push('\n');
    }
    let assemble = |resp: &str| {
        format!(
            "{TYPE_CORRECTION_INTRO}\n\nOriginal prompt:\n{original_prompt}\n\nResponse:\n{resp}\n\nErrors:\n{problems}\n{TYPE_CORRECTION_INSTRUCTION}"
        )
    };
    let fixed = assemble("").chars().count();
    assemble(&truncate_middle(response_json, response_budget(max_prompt_chars, fixed)))
}

fn describe_violation(v: &Violation, schema: &ExtractionSchema) -> String {
    let spec = schema.feature(&v.feature);
    let expected = spec.map(|s| s.expectation()).unwrap_or_default();
    match &v.kind {
        ViolationKind::MissingRequiredKey => {
            format!("\"{}\": key is missing; expected {expected}", v.feature)
        }
        ViolationKind::UnknownExtraKey => {
            format!("\"{}\": key is not part of the output JSON schema; remove it", v.feature)
        }
        ViolationKind::DuplicateKey => {
            format!("\"{}\": key appears more than once; give it once", v.feature)
        }
        ViolationKind::Coercion(err) => {
            let received = match err {
                CoercionError::MissingNotAllowed => "no value".to_string(),
                _ => v.received.clone(),
            };
            format!("\"{}\": received {received}; expected {expected}", v.feature)
        }
    }
}

/// Few-shot classification prompt: `shots` labeled reports followed by the
/// query report and an empty answer slot.
pub fn build_fewshot_classifier_prompt(
    shots: &[(String, String)],
    report: &str,
    label: &LabelSpec,
) -> Result<String, PromptError> {
    if shots.is_empty() || shots.len() > MAX_FEWSHOT_SHOTS {
        return Err(PromptError::ShotCount(shots.len()));
    }
    if report.trim().is_empty() {
        return Err(PromptError::EmptyReport);
    }
    let mut out = format!(
        "Classify each medical report by its \"{}\" value. Answer with exactly one of: {} or {}.\n",
        label.name, label.positive_value, label.negative_value
    );
    for (index, (text, answer)) in shots.iter().enumerate() {
        if label.encode(answer).is_none() {
            return Err(PromptError::InvalidShotLabel {
                index,
                label: answer.clone(),
                positive: label.positive_value.clone(),
                negative: label.negative_value.clone(),
            });
        }
        out.push_str(&format!("\nMedical report: {}\nAnswer: {}\n", text.trim(), answer.trim()));
    }
    out.push_str(&format!("\nMedical report: {}\nAnswer:", report.trim()));
    Ok(out)
}

/// Parses a few-shot answer by exact match (after trimming) against the two
/// label strings. Anything else is an abstention.
pub fn parse_fewshot_answer(text: &str, label: &LabelSpec) -> Option<u8> {
    let first = text.trim().lines().next().unwrap_or("").trim();
    label.encode(first)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{FeatureKind, FeatureSpec};

    fn one_feature() -> ExtractionSchema {
        ExtractionSchema::from_json_str(r#"{"features": [{"name": "age", "kind": "integer"}]}"#).unwrap()
    }

    fn example() -> OneShotExample {
        OneShotExample {
            report_text: "A 40-year-old.".into(),
            reasoning_text: "The report says 40, therefore \"age\": 40.".into(),
            output_json_text: "{\"age\": 40}".into(),
        }
    }

    #[test]
    fn report_slot_is_last() {
        let p = build_rextract_prompt(&one_feature(), &example(), "", "x").unwrap();
        assert!(p.ends_with("Medical report: x"), "{p}");
    }

    #[test]
    fn sections_in_order_exactly_once() {
        let p = build_rextract_prompt(&one_feature(), &example(), "Look for ages.", "report").unwrap();
        let heads = [SCHEMA_HEADING, FORMAT_HEADING, EXAMPLE_HEADING, "Reasoning:\n", "Output JSON:\n", SEPARATOR];
        let mut last = 0;
        for h in heads {
            assert_eq!(p.matches(h).count(), 1, "{h}");
            let at = p.find(h).unwrap();
            assert!(at >= last, "{h} out of order");
            last = at;
        }
    }

    #[test]
    fn example_mismatch_rejected() {
        let bad = OneShotExample {
            output_json_text: "{\"age\": \"old\"}".into(),
            ..example()
        };
        assert!(matches!(
            build_rextract_prompt(&one_feature(), &bad, "", "r"),
            Err(PromptError::ExampleSchemaMismatch(_))
        ));
    }

    #[test]
    fn braces_in_report_are_not_templated() {
        let p = build_rextract_prompt(&one_feature(), &example(), "", "{{SCHEMA_BLOCK}} {{REPORT}}").unwrap();
        assert!(p.ends_with("Medical report: {{SCHEMA_BLOCK}} {{REPORT}}"));
    }

    #[test]
    fn json_correction_embeds_inputs() {
        let p = build_json_correction_prompt("P", "not json", "expected '}' at {1:2}", DEFAULT_MAX_PROMPT_CHARS);
        assert!(p.contains("\nP\n"));
        assert!(p.contains("not json"));
        assert!(p.contains("expected '}' at {1:2}"));
    }

    #[test]
    fn truncation_keeps_head_and_tail() {
        let text: String = (0..1000).map(|i| char::from(b'a' + (i % 26) as u8)).collect();
        let t = truncate_middle(&text, 100);
        assert_eq!(t.chars().count(), 100);
        let keep = 100 - TRUNCATION_MARKER.len();
        assert!(t.starts_with(&text[..keep.div_ceil(2)]));
        assert!(t.ends_with(&text[1000 - keep / 2..]));
        assert_eq!(truncate_middle(&text, 1000), text);
    }

    #[test]
    fn type_correction_lists_in_order() {
        let schema = ExtractionSchema::new(
            vec![
                FeatureSpec {
                    name: "max_hr".into(),
                    title: "Max Hr".into(),
                    description: String::new(),
                    kind: FeatureKind::Integer,
                    allowed_values: vec![],
                    numeric_range: Some((60.0, 202.0)),
                    allow_missing: true,
                },
                FeatureSpec {
                    name: "sex".into(),
                    title: "Sex".into(),
                    description: String::new(),
                    kind: FeatureKind::Categorical,
                    allowed_values: vec!["M".into(), "F".into()],
                    numeric_range: None,
                    allow_missing: true,
                },
            ],
            None,
        )
        .unwrap();
        let obj = serde_json::json!({"max_hr": 250, "sex": "X"});
        let violations = validate_record(obj.as_object().unwrap(), &schema, "r").unwrap_err();
        let p = build_type_correction_prompt("P", &obj.to_string(), &violations, &schema, DEFAULT_MAX_PROMPT_CHARS);
        let a = p.find("\"max_hr\": received 250").expect("max_hr listed");
        let b = p.find("\"sex\": received \"X\"").expect("sex listed");
        assert!(a < b);
        assert!(p.contains("between 60 and 202"));
        assert!(p.contains("one of [M, F]"));
    }

    #[test]
    fn fewshot_shapes() {
        let label = LabelSpec {
            name: "HeartDisease".into(),
            positive_value: "1".into(),
            negative_value: "0".into(),
        };
        let shots: Vec<(String, String)> = (0..10).map(|i| (format!("report {i}"), (i % 2).to_string())).collect();
        let p = build_fewshot_classifier_prompt(&shots, "query", &label).unwrap();
        assert_eq!(p.matches("Answer:").count(), 11);
        assert!(p.ends_with("Medical report: query\nAnswer:"));

        let one = build_fewshot_classifier_prompt(&shots[..1], "q", &label).unwrap();
        assert_eq!(one.matches("Answer:").count(), 2);

        let bad = vec![("r".to_string(), "maybe".to_string())];
        assert!(matches!(
            build_fewshot_classifier_prompt(&bad, "q", &label),
            Err(PromptError::InvalidShotLabel { .. })
        ));
        assert!(matches!(build_fewshot_classifier_prompt(&[], "q", &label), Err(PromptError::ShotCount(0))));

        assert_eq!(parse_fewshot_answer(" 1\n", &label), Some(1));
        assert_eq!(parse_fewshot_answer("yes", &label), None);
    }
}
