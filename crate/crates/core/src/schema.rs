//! Typed feature schemas.
//!
//! A schema lists the flat scalar columns to pull out of a report. It drives
//! the JSON-schema block embedded in prompts, the coercion rules applied to
//! model output, and the column layout of the encoded design matrix.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Strings that coerce to [`TypedValue::Missing`], compared case-insensitively
/// after trimming. JSON `null` is always missing as well.
pub const MISSING_SENTINELS: [&str; 4] = ["none", "", "n/a", "nan"];

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("cannot read schema file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("schema parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("duplicate feature name `{0}`")]
    DuplicateName(String),
    #[error("feature `{name}` has invalid kind `{kind}` (expected integer, real, text or categorical)")]
    InvalidKind { name: String, kind: String },
    #[error("categorical feature `{0}` has no allowed values")]
    EmptyAllowedValues(String),
    #[error("categorical feature `{name}` lists `{value}` more than once")]
    DuplicateAllowedValue { name: String, value: String },
    #[error("feature name must be nonempty")]
    EmptyName,
    #[error("feature `{0}` has a range with min > max")]
    InvalidRange(String),
    #[error("feature `{0}` declares a range but is not numeric")]
    RangeOnNonNumeric(String),
    #[error("feature `{0}` declares allowed values but is not categorical")]
    AllowedValuesOnNonCategorical(String),
    #[error("schema must declare at least one feature")]
    NoFeatures,
    #[error("label `{0}` collides with a feature name")]
    LabelCollision(String),
    #[error("label positive and negative values must differ (both `{0}`)")]
    DegenerateLabel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Integer,
    Real,
    Text,
    Categorical,
}

impl FeatureKind {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "integer" => Some(Self::Integer),
            "real" => Some(Self::Real),
            "text" => Some(Self::Text),
            "categorical" => Some(Self::Categorical),
            _ => None,
        }
    }

    /// JSON-schema `type` emitted into prompts.
    pub fn json_type(self) -> &'static str {
        match self {
            Self::Integer => "integer",
            Self::Real => "number",
            Self::Text | Self::Categorical => "string",
        }
    }

    pub fn is_numeric(self) -> bool {
        matches!(self, Self::Integer | Self::Real)
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Integer => "integer",
            Self::Real => "real",
            Self::Text => "text",
            Self::Categorical => "categorical",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub title: String,
    pub description: String,
    pub kind: FeatureKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub allowed_values: Vec<String>,
    #[serde(default, rename = "range", skip_serializing_if = "Option::is_none")]
    pub numeric_range: Option<(f64, f64)>,
    pub allow_missing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSpec {
    pub name: String,
    #[serde(rename = "positive")]
    pub positive_value: String,
    #[serde(rename = "negative")]
    pub negative_value: String,
}

impl LabelSpec {
    /// Maps a raw label string onto {0, 1}; exact match after trimming.
    pub fn encode(&self, raw: &str) -> Option<u8> {
        let raw = raw.trim();
        if raw == self.positive_value {
            Some(1)
        } else if raw == self.negative_value {
            Some(0)
        } else {
            None
        }
    }

    pub fn decode(&self, label: u8) -> &str {
        if label == 1 {
            &self.positive_value
        } else {
            &self.negative_value
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionSchema {
    features: Vec<FeatureSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<LabelSpec>,
}

/// One canonicalized cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TypedValue {
    Integer(i64),
    Real(f64),
    /// Categorical and text values both carry their canonical string.
    Text(String),
    Missing,
}

impl TypedValue {
    pub fn is_missing(&self) -> bool {
        matches!(self, TypedValue::Missing)
    }

    /// The JSON scalar this value round-trips through.
    pub fn to_json(&self) -> Value {
        match self {
            TypedValue::Integer(i) => Value::from(*i),
            TypedValue::Real(x) => serde_json::Number::from_f64(*x)
                .map(Value::Number)
                .unwrap_or(Value::Null),
            TypedValue::Text(s) => Value::String(s.clone()),
            TypedValue::Missing => Value::Null,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            TypedValue::Integer(i) => Some(*i as f64),
            TypedValue::Real(x) => Some(*x),
            _ => None,
        }
    }

    /// CSV cell rendering; Missing is the empty string.
    pub fn to_cell(&self) -> String {
        match self {
            TypedValue::Integer(i) => i.to_string(),
            TypedValue::Real(x) => format!("{x:?}"),
            TypedValue::Text(s) => s.clone(),
            TypedValue::Missing => String::new(),
        }
    }
}

impl fmt::Display for TypedValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TypedValue::Missing => f.write_str("None"),
            other => f.write_str(&other.to_cell()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CoercionError {
    #[error("expected {expected}, got {received}")]
    TypeMismatch { received: String, expected: String },
    #[error("value {value} is outside [{min}, {max}]")]
    OutOfRange { value: f64, min: f64, max: f64 },
    #[error("a value is required but none was given")]
    MissingNotAllowed,
    #[error("`{received}` is not one of [{}]", allowed.join(", "))]
    UnknownCategory {
        received: String,
        allowed: Vec<String>,
    },
}

/// Key folding used everywhere a column or JSON key is matched against a
/// feature name: lowercase, with spaces, underscores and hyphens removed.
pub fn fold_key(key: &str) -> String {
    key.chars()
        .filter(|c| !matches!(c, ' ' | '_' | '-'))
        .flat_map(char::to_lowercase)
        .collect()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFeature {
    name: String,
    #[serde(default)]
    title: Option<String>,
    #[serde(default)]
    description: String,
    kind: String,
    #[serde(default)]
    allowed_values: Option<Vec<String>>,
    #[serde(default)]
    range: Option<(f64, f64)>,
    #[serde(default)]
    allow_missing: Option<bool>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchema {
    features: Vec<RawFeature>,
    #[serde(default)]
    label: Option<LabelSpec>,
}

impl ExtractionSchema {
    /// Builds a schema, checking every invariant.
    pub fn new(features: Vec<FeatureSpec>, label: Option<LabelSpec>) -> Result<Self, SchemaError> {
        if features.is_empty() {
            return Err(SchemaError::NoFeatures);
        }
        let mut seen = HashSet::new();
        for f in &features {
            if f.name.trim().is_empty() {
                return Err(SchemaError::EmptyName);
            }
            if !seen.insert(fold_key(&f.name)) {
                return Err(SchemaError::DuplicateName(f.name.clone()));
            }
            if f.kind == FeatureKind::Categorical {
                if f.allowed_values.is_empty() {
                    return Err(SchemaError::EmptyAllowedValues(f.name.clone()));
                }
                let mut vals = HashSet::new();
                for v in &f.allowed_values {
                    if !vals.insert(v.trim().to_lowercase()) {
                        return Err(SchemaError::DuplicateAllowedValue {
                            name: f.name.clone(),
                            value: v.clone(),
                        });
                    }
                }
            } else if !f.allowed_values.is_empty() {
                return Err(SchemaError::AllowedValuesOnNonCategorical(f.name.clone()));
            }
            if let Some((lo, hi)) = f.numeric_range {
                if !f.kind.is_numeric() {
                    return Err(SchemaError::RangeOnNonNumeric(f.name.clone()));
                }
                if lo.partial_cmp(&hi).is_none_or(|o| o.is_gt()) {
                    return Err(SchemaError::InvalidRange(f.name.clone()));
                }
            }
        }
        if let Some(label) = &label {
            if seen.contains(&fold_key(&label.name)) {
                return Err(SchemaError::LabelCollision(label.name.clone()));
            }
            if label.positive_value == label.negative_value {
                return Err(SchemaError::DegenerateLabel(label.positive_value.clone()));
            }
        }
        Ok(Self { features, label })
    }

    pub fn from_json_str(text: &str) -> Result<Self, SchemaError> {
        let raw: RawSchema = serde_json::from_str(text).map_err(|e| SchemaError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        let mut features = Vec::with_capacity(raw.features.len());
        for rf in raw.features {
            let kind = FeatureKind::parse(rf.kind.trim()).ok_or_else(|| SchemaError::InvalidKind {
                name: rf.name.clone(),
                kind: rf.kind.clone(),
            })?;
            features.push(FeatureSpec {
                title: rf.title.unwrap_or_else(|| default_title(&rf.name)),
                name: rf.name,
                description: rf.description,
                kind,
                allowed_values: rf.allowed_values.unwrap_or_default(),
                numeric_range: rf.range,
                allow_missing: rf.allow_missing.unwrap_or(true),
            });
        }
        Self::new(features, raw.label)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SchemaError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| SchemaError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&text)
    }

    pub fn features(&self) -> &[FeatureSpec] {
        &self.features
    }

    pub fn label(&self) -> Option<&LabelSpec> {
        self.label.as_ref()
    }

    /// Number of features (the dimension of the raw feature space).
    pub fn m(&self) -> usize {
        self.features.len()
    }

    pub fn feature(&self, name: &str) -> Option<&FeatureSpec> {
        self.features.iter().find(|f| f.name == name)
    }

    /// Index of the feature whose folded name equals the folded `key`.
    pub fn position_folded(&self, key: &str) -> Option<usize> {
        let k = fold_key(key);
        self.features.iter().position(|f| fold_key(&f.name) == k)
    }

    /// Single-line JSON object `{"properties": {...}}` in the style used in
    /// extraction prompts. Keys follow feature order.
    pub fn json_schema_block(&self) -> String {
        let mut out = String::from("{\"properties\": {");
        for (i, f) in self.features.iter().enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            out.push_str(&json_str(&f.name));
            out.push_str(": {\"title\": ");
            out.push_str(&json_str(&f.title));
            out.push_str(", \"description\": ");
            out.push_str(&json_str(&f.description));
            out.push_str(", \"type\": ");
            out.push_str(&json_str(f.kind.json_type()));
            out.push('}');
        }
        out.push_str("}}");
        out
    }
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization is infallible")
}

fn default_title(name: &str) -> String {
    name.split(['_', ' '])
        .filter(|w| !w.is_empty())
        .map(|w| {
            let mut cs = w.chars();
            match cs.next() {
                Some(c) => c.to_uppercase().chain(cs.flat_map(char::to_lowercase)).collect(),
                None => String::new(),
            }
        })
        .collect::<Vec<String>>()
        .join(" ")
}

fn is_missing_sentinel(s: &str) -> bool {
    let t = s.trim().to_lowercase();
    MISSING_SENTINELS.contains(&t.as_str())
}

fn describe_json(raw: &Value) -> String {
    match raw {
        Value::String(s) => format!("{s:?}"),
        other => other.to_string(),
    }
}

/// Numeral-string parsing shared by integer and real coercion. Accepts a
/// single comma as decimal separator when no dot is present.
fn parse_numeral(s: &str) -> Option<f64> {
    let t = s.trim();
    let normalized;
    let t = if !t.contains('.') && t.matches(',').count() == 1 {
        normalized = t.replace(',', ".");
        normalized.as_str()
    } else {
        t
    };
    // Rust accepts "inf"/"nan" spellings; those are not numerals here.
    if !t.chars().any(|c| c.is_ascii_digit()) {
        return None;
    }
    t.parse::<f64>().ok().filter(|x| x.is_finite())
}

impl FeatureSpec {
    /// Coerces a JSON scalar into this feature's typed domain.
    pub fn canonicalize(&self, raw: &Value) -> Result<TypedValue, CoercionError> {
        let missing = match raw {
            Value::Null => true,
            Value::String(s) => is_missing_sentinel(s),
            _ => false,
        };
        if missing {
            return if self.allow_missing {
                Ok(TypedValue::Missing)
            } else {
                Err(CoercionError::MissingNotAllowed)
            };
        }
        let mismatch = |expected: &str| CoercionError::TypeMismatch {
            received: describe_json(raw),
            expected: expected.to_string(),
        };
        match self.kind {
            FeatureKind::Integer => {
                let x = match raw {
                    Value::Number(n) => n.as_i64().map(|i| i as f64).or_else(|| n.as_f64()),
                    Value::String(s) => parse_numeral(s),
                    _ => None,
                }
                .ok_or_else(|| mismatch("an integer"))?;
                if x.fract() != 0.0 || x.abs() > 9.007_199_254_740_992e15 {
                    return Err(mismatch("an integer"));
                }
                self.check_range(x)?;
                Ok(TypedValue::Integer(x as i64))
            }
            FeatureKind::Real => {
                let x = match raw {
                    Value::Number(n) => n.as_f64(),
                    Value::String(s) => parse_numeral(s),
                    _ => None,
                }
                .ok_or_else(|| mismatch("a number"))?;
                self.check_range(x)?;
                Ok(TypedValue::Real(x))
            }
            FeatureKind::Categorical => {
                let s = scalar_string(raw).ok_or_else(|| mismatch("a string"))?;
                let needle = s.trim().to_lowercase();
                self.allowed_values
                    .iter()
                    .find(|v| v.trim().to_lowercase() == needle)
                    .map(|v| TypedValue::Text(v.clone()))
                    .ok_or_else(|| CoercionError::UnknownCategory {
                        received: s,
                        allowed: self.allowed_values.clone(),
                    })
            }
            FeatureKind::Text => scalar_string(raw)
                .map(TypedValue::Text)
                .ok_or_else(|| mismatch("a string")),
        }
    }

    fn check_range(&self, x: f64) -> Result<(), CoercionError> {
        match self.numeric_range {
            Some((min, max)) if x < min || x > max => Err(CoercionError::OutOfRange { value: x, min, max }),
            _ => Ok(()),
        }
    }

    /// Human-readable description of what a valid value looks like, used in
    /// type-correction prompts.
    pub fn expectation(&self) -> String {
        let mut s = match self.kind {
            FeatureKind::Integer => "an integer".to_string(),
            FeatureKind::Real => "a number".to_string(),
            FeatureKind::Text => "a string".to_string(),
            FeatureKind::Categorical => format!("one of [{}]", self.allowed_values.join(", ")),
        };
        if let Some((lo, hi)) = self.numeric_range {
            s.push_str(&format!(" between {} and {}", fmt_num(lo), fmt_num(hi)));
        }
        if self.allow_missing {
            s.push_str(", or null if not stated");
        }
        s
    }
}

pub(crate) fn fmt_num(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

fn scalar_string(raw: &Value) -> Option<String> {
    match raw {
        Value::String(s) => Some(s.clone()),
        Value::Bool(b) => Some(b.to_string()),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                Some(i.to_string())
            } else {
                n.as_f64().map(fmt_num)
            }
        }
        _ => None,
    }
}
