//! Tabular datasets: CSV ingestion, stratified splitting, and the
//! train-fitted encoder (mean imputation, z-scoring, one-hot).

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::schema::{fold_key, CoercionError, ExtractionSchema, FeatureKind, TypedValue};
use crate::vorc::ExtractionRecord;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("header mismatch: {0}")]
    Header(String),
    #[error("row {row}, column `{column}`: {source}")]
    Cell {
        row: usize,
        column: String,
        #[source]
        source: CoercionError,
    },
    #[error("row {row}: label `{value}` is neither `{positive}` nor `{negative}`")]
    Label {
        row: usize,
        value: String,
        positive: String,
        negative: String,
    },
    #[error("duplicate row id `{0}`")]
    DuplicateId(String),
    #[error("dataset has {0} rows; at least 10 are needed to split")]
    TooSmall(usize),
    #[error("class {class} has {count} rows; at least 3 are needed to stratify")]
    ThinClass { class: u8, count: usize },
    #[error("dataset has no labels")]
    Unlabeled,
    #[error("no training rows given")]
    EmptyTrain,
    #[error("row index {0} is out of bounds")]
    BadIndex(usize),
    #[error("feature `{feature}`: category `{value}` has no encoded column")]
    UnseenCategory { feature: String, value: String },
    #[error("row {row}: value for `{feature}` does not match its kind")]
    KindMismatch { row: usize, feature: String },
    #[error("{0}")]
    Shape(String),
}

/// Rows of canonical values in schema feature order, with ids and
/// optional binary labels (1 = positive value).
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    pub schema: ExtractionSchema,
    pub ids: Vec<String>,
    pub rows: Vec<Vec<TypedValue>>,
    pub labels: Option<Vec<u8>>,
}

impl TabularDataset {
    pub fn new(
        schema: ExtractionSchema,
        ids: Vec<String>,
        rows: Vec<Vec<TypedValue>>,
        labels: Option<Vec<u8>>,
    ) -> Result<Self, DatasetError> {
        if ids.len() != rows.len() {
            return Err(DatasetError::Shape(format!("{} ids for {} rows", ids.len(), rows.len())));
        }
        if let Some(l) = &labels {
            if l.len() != rows.len() || l.iter().any(|&y| y > 1) {
                return Err(DatasetError::Shape("labels must be 0/1, one per row".into()));
            }
        }
        let mut seen = HashSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(DatasetError::DuplicateId(id.clone()));
            }
        }
        for (r, row) in rows.iter().enumerate() {
            if row.len() != schema.m() {
                return Err(DatasetError::Shape(format!("row {r} has {} values, expected {}", row.len(), schema.m())));
            }
            for (spec, v) in schema.features().iter().zip(row) {
                let ok = match (spec.kind, v) {
                    (_, TypedValue::Missing) => spec.allow_missing,
                    (FeatureKind::Integer, TypedValue::Integer(_)) | (FeatureKind::Real, TypedValue::Real(_)) => true,
                    (FeatureKind::Categorical, TypedValue::Text(s)) => spec.allowed_values.contains(s),
                    (FeatureKind::Text, TypedValue::Text(_)) => true,
                    _ => false,
                };
                if !ok {
                    return Err(DatasetError::KindMismatch {
                        row: r,
                        feature: spec.name.clone(),
                    });
                }
            }
        }
        Ok(Self {
            schema,
            ids,
            rows,
            labels,
        })
    }

    /// Builds a dataset from extracted records; `label_of` maps a record id
    /// to its raw label string.
    pub fn from_records<'a>(
        schema: &ExtractionSchema,
        records: &[ExtractionRecord],
        label_of: Option<&dyn Fn(&str) -> Option<&'a str>>,
    ) -> Result<Self, DatasetError> {
        let ids: Vec<String> = records.iter().map(|r| r.source_id.clone()).collect();
        let rows = records
            .iter()
            .map(|r| schema.features().iter().map(|f| r.values[&f.name].clone()).collect())
            .collect();
        let labels = match (label_of, schema.label()) {
            (Some(f), Some(spec)) => Some(
                records
                    .iter()
                    .enumerate()
                    .map(|(i, r)| {
                        let raw = f(&r.source_id).unwrap_or("");
                        spec.encode(raw).ok_or_else(|| DatasetError::Label {
                            row: i,
                            value: raw.to_string(),
                            positive: spec.positive_value.clone(),
                            negative: spec.negative_value.clone(),
                        })
                    })
                    .collect::<Result<Vec<u8>, _>>()?,
            ),
            _ => None,
        };
        Self::new(schema.clone(), ids, rows, labels)
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn labels(&self) -> Result<&[u8], DatasetError> {
        self.labels.as_deref().ok_or(DatasetError::Unlabeled)
    }

    /// Row positions keyed by id.
    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Sub-dataset of the given row positions, in the given order.
    pub fn select(&self, idx: &[usize]) -> Result<Self, DatasetError> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.n()) {
            return Err(DatasetError::BadIndex(bad));
        }
        Ok(Self {
            schema: self.schema.clone(),
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
        })
    }

    pub fn load_csv(path: impl AsRef<Path>, schema: &ExtractionSchema) -> Result<Self, DatasetError> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::read_csv(file, schema)
    }

    /// Reads a CSV whose header names every schema feature (matched after key
    /// folding), optionally an `id` column and the label column. Rows
    /// without an id column get their 0-based row number as id.
    pub fn read_csv<R: Read>(input: R, schema: &ExtractionSchema) -> Result<Self, DatasetError> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
        let header = reader.headers()?.clone();
        let label_key = schema.label().map(|l| fold_key(&l.name));
        let mut feature_col = vec![None; schema.m()];
        let mut id_col = None;
        let mut label_col = None;
        for (c, name) in header.iter().enumerate() {
            let key = fold_key(name);
            if let Some(i) = schema.position_folded(name) {
                if feature_col[i].replace(c).is_some() {
                    return Err(DatasetError::Header(format!("feature `{}` appears twice", schema.features()[i].name)));
                }
            } else if label_key.as_deref() == Some(key.as_str()) && label_col.is_none() {
                label_col = Some(c);
            } else if key == "id" && id_col.is_none() {
                id_col = Some(c);
            } else {
                return Err(DatasetError::Header(format!("column `{name}` is not in the schema")));
            }
        }
        if let Some(i) = feature_col.iter().position(Option::is_none) {
            return Err(DatasetError::Header(format!("no column for feature `{}`", schema.features()[i].name)));
        }

        let mut ids = Vec::new();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (r, record) in reader.records().enumerate() {
            let record = record?;
            ids.push(match id_col {
                Some(c) => record.get(c).unwrap_or("").to_string(),
                None => r.to_string(),
            });
            let mut row = Vec::with_capacity(schema.m());
            for (spec, col) in schema.features().iter().zip(&feature_col) {
                let cell = record.get(col.expect("checked")).unwrap_or("");
                let v = spec
                    .canonicalize(&Value::String(cell.to_string()))
                    .map_err(|source| DatasetError::Cell {
                        row: r,
                        column: spec.name.clone(),
                        source,
                    })?;
                row.push(v);
            }
            rows.push(row);
            if let (Some(c), Some(spec)) = (label_col, schema.label()) {
                let raw = record.get(c).unwrap_or("");
                labels.push(spec.encode(raw).ok_or_else(|| DatasetError::Label {
                    row: r,
                    value: raw.to_string(),
                    positive: spec.positive_value.clone(),
                    negative: spec.negative_value.clone(),
                })?);
            }
        }
        let labels = label_col.map(|_| labels);
        Self::new(schema.clone(), ids, rows, labels)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.write_csv(file)
    }

    /// Writes `id`, the features, and the label column when labels exist.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DatasetError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["id".to_string()];
        header.extend(self.schema.features().iter().map(|f| f.name.clone()));
        let label = self.schema.label().filter(|_| self.labels.is_some());
        if let Some(l) = label {
            header.push(l.name.clone());
        }
        w.write_record(&header)?;
        for (i, row) in self.rows.iter().enumerate() {
            let mut cells = vec![self.ids[i].clone()];
            cells.extend(row.iter().map(TypedValue::to_cell));
            if let (Some(l), Some(ys)) = (label, &self.labels) {
                cells.push(l.decode(ys[i]).to_string());
            }
            w.write_record(&cells)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

const LCG_MULTIPLIER: u64 = 6_364_136_223_846_793_005;
const LCG_INCREMENT: u64 = 1_442_695_040_888_963_407;

/// 64-bit linear congruential generator,
/// `state <- state * 6364136223846793005 + 1442695040888963407 (mod 2^64)`,
/// seeded with the split seed itself. Draws use the high 32 bits.
#[derive(Debug, Clone)]
pub struct Lcg64 {
    state: u64,
}

impl Lcg64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_mul(LCG_MULTIPLIER).wrapping_add(LCG_INCREMENT);
        self.state
    }

    /// Uniform-ish integer in `0..bound` by multiply-shift on the high word.
    pub fn below(&mut self, bound: usize) -> usize {
        let hi = self.next_u64() >> 32;
        ((hi * bound as u64) >> 32) as usize
    }

    /// Fisher-Yates, walking from the last position down.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitAssignment {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain data")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Rounds `n * num / den` half up.
fn round_frac(n: usize, num: usize, den: usize) -> usize {
    (2 * n * num + den) / (2 * den)
}

/// Apportions `total` across classes proportionally to `counts * num / den`
/// by largest remainder; ties go to the lower class index.
fn apportion(counts: &[usize], num: usize, den: usize, total: usize) -> Vec<usize> {
    let mut quota: Vec<usize> = counts.iter().map(|&c| c * num / den).collect();
    let mut rest: Vec<(usize, usize)> = counts.iter().map(|&c| c * num % den).enumerate().collect();
    rest.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut left = total.saturating_sub(quota.iter().sum());
    for (k, _) in rest.iter().cycle().take(counts.len() * 2) {
        if left == 0 {
            break;
        }
        if quota[*k] < counts[*k] {
            quota[*k] += 1;
            left -= 1;
        }
    }
    quota
}

/// Per-class (train, val, test) sizes for class counts `counts`.
pub fn split_sizes(counts: &[usize]) -> Vec<(usize, usize, usize)> {
    let n: usize = counts.iter().sum();
    let test = apportion(counts, 2, 10, round_frac(n, 2, 10));
    let remaining: Vec<usize> = counts.iter().zip(&test).map(|(c, t)| c - t).collect();
    let val_target = round_frac(n, 1, 10);
    let mut val = apportion(counts, 1, 10, val_target);
    for (v, r) in val.iter_mut().zip(&remaining) {
        *v = (*v).min(*r);
    }
    counts
        .iter()
        .zip(test.iter().zip(&val))
        .map(|(&c, (&t, &v))| (c - t - v, v, t))
        .collect()
}

/// Stratified 70/10/20 split. Within each class (class 0 first), row
/// positions in dataset order are shuffled by one shared [`Lcg64`] stream and
/// cut into test, validation, then training. Output lists are sorted.
/// Unlabeled datasets are treated as a single class.
pub fn split(dataset: &TabularDataset, seed: u64) -> Result<SplitAssignment, DatasetError> {
    let n = dataset.n();
    if n < 10 {
        return Err(DatasetError::TooSmall(n));
    }
    let classes: Vec<Vec<usize>> = match &dataset.labels {
        Some(ys) => (0..=1u8).map(|c| (0..n).filter(|&i| ys[i] == c).collect()).collect(),
        None => vec![(0..n).collect()],
    };
    for (c, members) in classes.iter().enumerate() {
        if members.len() < 3 {
            return Err(DatasetError::ThinClass {
                class: c as u8,
                count: members.len(),
            });
        }
    }
    let counts: Vec<usize> = classes.iter().map(Vec::len).collect();
    let sizes = split_sizes(&counts);
    let mut rng = Lcg64::new(seed);
    let mut out = SplitAssignment {
        seed,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (mut members, (_, v, t)) in classes.into_iter().zip(sizes) {
        rng.shuffle(&mut members);
        out.test.extend_from_slice(&members[..t]);
        out.val.extend_from_slice(&members[t..t + v]);
        out.train.extend_from_slice(&members[t + v..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnEncoder {
    /// Missing becomes `mean`; output is `(x - mean) / scale`.
    Numeric { feature: String, mean: f64, scale: f64 },
    /// One column per allowed value; Missing becomes `mode`.
    OneHot {
        feature: String,
        values: Vec<String>,
        mode: String,
    },
}

/// Encoder fitted on training rows only. Text features are not encoded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderState {
    pub encoders: Vec<ColumnEncoder>,
    pub column_names: Vec<String>,
    /// Schema position of each encoder's feature.
    pub positions: Vec<usize>,
}

impl EncoderState {
    pub fn d(&self) -> usize {
        self.column_names.len()
    }

    /// Encoded column indices belonging to each feature, keyed by name.
    pub fn feature_columns(&self) -> Vec<(String, Vec<usize>)> {
        let mut col = 0;
        self.encoders
            .iter()
            .map(|e| match e {
                ColumnEncoder::Numeric { feature, .. } => {
                    col += 1;
                    (feature.clone(), vec![col - 1])
                }
                ColumnEncoder::OneHot { feature, values, .. } => {
                    let cols = (col..col + values.len()).collect();
                    col += values.len();
                    (feature.clone(), cols)
                }
            })
            .collect()
    }
}

/// Dense row-major design matrix with its column names.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedMatrix {
    pub column_names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub labels: Option<Vec<u8>>,
}

impl EncodedMatrix {
    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn d(&self) -> usize {
        self.column_names.len()
    }

    pub fn labels(&self) -> Result<&[u8], DatasetError> {
        self.labels.as_deref().ok_or(DatasetError::Unlabeled)
    }
}

pub fn fit_encoder(dataset: &TabularDataset, train_ids: &[usize]) -> Result<EncoderState, DatasetError> {
    if train_ids.is_empty() {
        return Err(DatasetError::EmptyTrain);
    }
    if let Some(&bad) = train_ids.iter().find(|&&i| i >= dataset.n()) {
        return Err(DatasetError::BadIndex(bad));
    }
    let mut encoders = Vec::new();
    let mut column_names = Vec::new();
    let mut positions = Vec::new();
    for (j, spec) in dataset.schema.features().iter().enumerate() {
        match spec.kind {
            FeatureKind::Integer | FeatureKind::Real => {
                let present: Vec<f64> = train_ids.iter().filter_map(|&i| dataset.rows[i][j].as_f64()).collect();
                let mean = if present.is_empty() {
                    0.0
                } else {
                    present.iter().sum::<f64>() / present.len() as f64
                };
                // Imputed rows contribute zero deviation.
                let var = present.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / train_ids.len() as f64;
                let std = var.sqrt();
                let scale = if std > 0.0 && std.is_finite() { std } else { 1.0 };
                encoders.push(ColumnEncoder::Numeric {
                    feature: spec.name.clone(),
                    mean,
                    scale,
                });
                column_names.push(spec.name.clone());
            }
            FeatureKind::Categorical => {
                let mut counts = vec![0usize; spec.allowed_values.len()];
                for &i in train_ids {
                    if let TypedValue::Text(s) = &dataset.rows[i][j] {
                        if let Some(k) = spec.allowed_values.iter().position(|v| v == s) {
                            counts[k] += 1;
                        }
                    }
                }
                let best = counts.iter().enumerate().fold(0, |b, (k, &c)| if c > counts[b] { k } else { b });
                encoders.push(ColumnEncoder::OneHot {
                    feature: spec.name.clone(),
                    values: spec.allowed_values.clone(),
                    mode: spec.allowed_values[best].clone(),
                });
                column_names.extend(spec.allowed_values.iter().map(|v| format!("{}_{}", spec.name, v)));
            }
            FeatureKind::Text => continue,
        }
        positions.push(j);
    }
    Ok(EncoderState {
        encoders,
        column_names,
        positions,
    })
}

/// Applies a fitted encoder to the given rows. Never refits.
pub fn transform(dataset: &TabularDataset, state: &EncoderState, ids: &[usize]) -> Result<EncodedMatrix, DatasetError> {
    let mut rows = Vec::with_capacity(ids.len());
    for &i in ids {
        let src = dataset.rows.get(i).ok_or(DatasetError::BadIndex(i))?;
        let mut out = Vec::with_capacity(state.d());
        for (enc, &j) in state.encoders.iter().zip(&state.positions) {
            let v = &src[j];
            match enc {
                ColumnEncoder::Numeric { mean, scale, feature } => {
                    let x = match v {
                        TypedValue::Missing => *mean,
                        other => other.as_f64().ok_or_else(|| DatasetError::KindMismatch {
                            row: i,
                            feature: feature.clone(),
                        })?,
                    };
                    out.push((x - mean) / scale);
                }
                ColumnEncoder::OneHot { feature, values, mode } => {
                    let s = match v {
                        TypedValue::Missing => mode.as_str(),
                        TypedValue::Text(s) => s.as_str(),
                        _ => {
                            return Err(DatasetError::KindMismatch {
                                row: i,
                                feature: feature.clone(),
                            })
                        }
                    };
                    let k = values.iter().position(|x| x == s).ok_or_else(|| DatasetError::UnseenCategory {
                        feature: feature.clone(),
                        value: s.to_string(),
                    })?;
                    out.extend((0..values.len()).map(|q| if q == k { 1.0 } else { 0.0 }));
                }
            }
        }
        rows.push(out);
    }
    Ok(EncodedMatrix {
        column_names: state.column_names.clone(),
        rows,
        labels: dataset.labels.as_ref().map(|l| ids.iter().map(|&i| l[i]).collect()),
    })
}
