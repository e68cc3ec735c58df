//! Interpretable binary classifiers, the hyperparameter grids they are tuned
//! over, feature importances, and model persistence.

pub mod gbdt;
pub mod logreg;
pub mod tree;

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::EncoderState;
use crate::schema::ExtractionSchema;

pub use gbdt::{train_gbdt, GbdtModel};
pub use logreg::{train_logreg, LogRegModel};
pub use tree::{train_dtree, TreeModel, TreeNode};

pub const LOGREG_C_GRID: [f64; 6] = [0.001, 0.01, 0.1, 1.0, 10.0, 100.0];
pub const DTREE_DEPTH_GRID: [usize; 3] = [3, 4, 5];
pub const DTREE_MIN_SPLIT_GRID: [usize; 6] = [2, 3, 4, 5, 7, 10];
pub const GBDT_N_GRID: [usize; 3] = [50, 100, 200];
pub const GBDT_LR_GRID: [f64; 3] = [0.01, 0.1, 0.3];

pub const MODEL_FORMAT: &str = "temed-model";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("training set is empty")]
    Empty,
    #[error("labels must be 0/1 with one per row ({labels} labels for {rows} rows)")]
    BadLabels { labels: usize, rows: usize },
    #[error("rows have inconsistent widths")]
    Ragged,
    #[error("expected {expected} columns, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("training set contains a single class")]
    SingleClass,
    #[error("loss became non-finite")]
    NonFinite,
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("unknown model family `{0}` (expected logreg, dtree or gbdt)")]
    UnknownFamily(String),
    #[error("model is not a decision tree")]
    NotATree,
    #[error("cannot read or write model file {path}: {message}")]
    Io { path: String, message: String },
    #[error("unsupported model document: {0}")]
    Format(String),
}

pub(crate) fn check_labels(y: &[u8], n: usize) -> Result<(), ModelError> {
    if n == 0 {
        return Err(ModelError::Empty);
    }
    if y.len() != n || y.iter().any(|&v| v > 1) {
        return Err(ModelError::BadLabels {
            labels: y.len(),
            rows: n,
        });
    }
    Ok(())
}

pub(crate) fn check_dims(x: &[Vec<f64>]) -> Result<usize, ModelError> {
    let d = x.first().map_or(0, Vec::len);
    if x.iter().any(|r| r.len() != d) {
        return Err(ModelError::Ragged);
    }
    Ok(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelFamily {
    Logreg,
    Dtree,
    Gbdt,
}

impl ModelFamily {
    pub const ALL: [ModelFamily; 3] = [ModelFamily::Logreg, ModelFamily::Dtree, ModelFamily::Gbdt];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelFamily::Logreg => "logreg",
            ModelFamily::Dtree => "dtree",
            ModelFamily::Gbdt => "gbdt",
        }
    }
}

impl fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelFamily {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "logreg" => Ok(ModelFamily::Logreg),
            "dtree" => Ok(ModelFamily::Dtree),
            "gbdt" => Ok(ModelFamily::Gbdt),
            other => Err(ModelError::UnknownFamily(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Model {
    Logreg(LogRegModel),
    Dtree(TreeModel),
    Gbdt(GbdtModel),
}

impl Model {
    pub fn family(&self) -> ModelFamily {
        match self {
            Model::Logreg(_) => ModelFamily::Logreg,
            Model::Dtree(_) => ModelFamily::Dtree,
            Model::Gbdt(_) => ModelFamily::Gbdt,
        }
    }

    pub fn n_features(&self) -> usize {
        match self {
            Model::Logreg(m) => m.weights.len(),
            Model::Dtree(m) => m.n_features,
            Model::Gbdt(m) => m.n_features,
        }
    }

    /// Positive-class probability per row.
    pub fn predict_proba(&self, x: &[Vec<f64>]) -> Result<Vec<f64>, ModelError> {
        let d = self.n_features();
        if let Some(bad) = x.iter().find(|r| r.len() != d) {
            return Err(ModelError::Dimension {
                expected: d,
                got: bad.len(),
            });
        }
        Ok(x
            .iter()
            .map(|row| match self {
                Model::Logreg(m) => m.predict_row(row),
                Model::Dtree(m) => m.predict_row(row),
                Model::Gbdt(m) => m.predict_row(row),
            })
            .collect())
    }

    /// Hard labels: positive when the probability exceeds 0.5.
    pub fn predict(&self, x: &[Vec<f64>]) -> Result<Vec<u8>, ModelError> {
        Ok(self.predict_proba(x)?.into_iter().map(|p| u8::from(p > 0.5)).collect())
    }

    /// Signed weights for logistic regression; normalized impurity (or
    /// squared-error) decrease for trees and ensembles, all zeros when the
    /// model never split.
    pub fn feature_importances(&self) -> Vec<f64> {
        match self {
            Model::Logreg(m) => m.weights.clone(),
            Model::Dtree(m) => normalize(&m.impurity_decrease),
            Model::Gbdt(m) => normalize(&m.split_gains()),
        }
    }

    pub fn hyperparams(&self) -> Hyperparams {
        match self {
            Model::Logreg(m) => Hyperparams::Logreg { c: m.c },
            Model::Dtree(m) => Hyperparams::Dtree {
                max_depth: m.max_depth,
                min_samples_split: m.min_samples_split,
            },
            Model::Gbdt(m) => Hyperparams::Gbdt {
                n_estimators: m.n_estimators,
                learning_rate: m.learning_rate,
            },
        }
    }
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter().map(|x| x / s).collect()
    } else {
        vec![0.0; v.len()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Hyperparams {
    Logreg {
        #[serde(rename = "C")]
        c: f64,
    },
    Dtree {
        max_depth: usize,
        min_samples_split: usize,
    },
    Gbdt {
        n_estimators: usize,
        learning_rate: f64,
    },
}

impl fmt::Display for Hyperparams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Hyperparams::Logreg { c } => write!(f, "C={c}"),
            Hyperparams::Dtree {
                max_depth,
                min_samples_split,
            } => write!(f, "max_depth={max_depth} min_samples_split={min_samples_split}"),
            Hyperparams::Gbdt {
                n_estimators,
                learning_rate,
            } => write!(f, "n_estimators={n_estimators} learning_rate={learning_rate}"),
        }
    }
}

pub fn train(hp: Hyperparams, x: &[Vec<f64>], y: &[u8]) -> Result<Model, ModelError> {
    Ok(match hp {
        Hyperparams::Logreg { c } => Model::Logreg(train_logreg(x, y, c)?),
        Hyperparams::Dtree {
            max_depth,
            min_samples_split,
        } => Model::Dtree(train_dtree(x, y, max_depth, min_samples_split)?),
        Hyperparams::Gbdt {
            n_estimators,
            learning_rate,
        } => Model::Gbdt(train_gbdt(x, y, n_estimators, learning_rate)?),
    })
}

/// Grid points in tie-break order: the first entry is the most regularized,
/// so a stable argmax over this order prefers regularization.
pub fn grid(family: ModelFamily) -> Vec<Hyperparams> {
    match family {
        ModelFamily::Logreg => LOGREG_C_GRID.iter().map(|&c| Hyperparams::Logreg { c }).collect(),
        ModelFamily::Dtree => DTREE_DEPTH_GRID
            .iter()
            .flat_map(|&max_depth| {
                DTREE_MIN_SPLIT_GRID.iter().rev().map(move |&min_samples_split| Hyperparams::Dtree {
                    max_depth,
                    min_samples_split,
                })
            })
            .collect(),
        ModelFamily::Gbdt => GBDT_N_GRID
            .iter()
            .flat_map(|&n_estimators| {
                GBDT_LR_GRID.iter().map(move |&learning_rate| Hyperparams::Gbdt {
                    n_estimators,
                    learning_rate,
                })
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCandidate {
    pub hyperparams: Hyperparams,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub family: ModelFamily,
    pub candidates: Vec<GridCandidate>,
    pub best_index: usize,
}

impl GridReport {
    pub fn best(&self) -> &GridCandidate {
        &self.candidates[self.best_index]
    }

    /// CSV with columns `family,hyperparams,val_accuracy,selected`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("family,hyperparams,val_accuracy,selected\n");
        for (i, c) in self.candidates.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                self.family,
                c.hyperparams,
                c.val_accuracy,
                i == self.best_index
            );
        }
        s
    }
}

pub fn accuracy(pred: &[u8], y: &[u8]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    pred.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64
}

/// Trains every grid point on the training rows, scores validation
/// accuracy, and returns the first candidate with the best score. Boosted
/// ensembles are grown once per learning rate to the largest size and cut.
pub fn grid_search(
    family: ModelFamily,
    x_train: &[Vec<f64>],
    y_train: &[u8],
    x_val: &[Vec<f64>],
    y_val: &[u8],
) -> Result<(Model, GridReport), ModelError> {
    let points = grid(family);
    let mut models = Vec::with_capacity(points.len());
    match family {
        ModelFamily::Gbdt => {
            let n_max = *GBDT_N_GRID.iter().max().expect("nonempty grid");
            let full: Vec<GbdtModel> = GBDT_LR_GRID
                .iter()
                .map(|&lr| train_gbdt(x_train, y_train, n_max, lr))
                .collect::<Result<_, _>>()?;
            for hp in &points {
                let Hyperparams::Gbdt {
                    n_estimators,
                    learning_rate,
                } = *hp
                else {
                    unreachable!()
                };
                let k = GBDT_LR_GRID.iter().position(|&lr| lr == learning_rate).expect("grid lr");
                models.push(Model::Gbdt(full[k].truncated(n_estimators)));
            }
        }
        _ => {
            for hp in &points {
                models.push(train(*hp, x_train, y_train)?);
            }
        }
    }
    let mut candidates = Vec::with_capacity(points.len());
    let mut best_index = 0;
    for (i, (hp, m)) in points.iter().zip(&models).enumerate() {
        let acc = accuracy(&m.predict(x_val)?, y_val);
        if acc > candidates.get(best_index).map_or(f64::NEG_INFINITY, |c: &GridCandidate| c.val_accuracy) {
            best_index = i;
        }
        candidates.push(GridCandidate {
            hyperparams: *hp,
            val_accuracy: acc,
        });
    }
    let best = models.swap_remove(best_index);
    Ok((
        best,
        GridReport {
            family,
            candidates,
            best_index,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TreeFormat {
    Text,
    Dot,
}

impl FromStr for TreeFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" => Ok(TreeFormat::Text),
            "dot" => Ok(TreeFormat::Dot),
            other => Err(format!("unknown tree format `{other}` (expected text or dot)")),
        }
    }
}

/// Renders a decision tree. Column names fall back to `x<index>`.
pub fn export_tree(model: &TreeModel, column_names: &[String], format: TreeFormat) -> String {
    let name = |c: usize| column_names.get(c).cloned().unwrap_or_else(|| format!("x{c}"));
    let mut out = String::new();
    match format {
        TreeFormat::Text => {
            fn walk(model: &TreeModel, k: usize, depth: usize, name: &dyn Fn(usize) -> String, out: &mut String) {
                let indent = "  ".repeat(depth);
                let node = &model.nodes[k];
                let c = node.counts();
                match node {
                    TreeNode::Split {
                        column,
                        threshold,
                        left,
                        right,
                        ..
                    } => {
                        let _ = writeln!(
                            out,
                            "{indent}[{k}] {} <= {threshold} (samples={}, value=[{}, {}])",
                            name(*column),
                            c[0] + c[1],
                            c[0],
                            c[1]
                        );
                        walk(model, *left, depth + 1, name, out);
                        walk(model, *right, depth + 1, name, out);
                    }
                    TreeNode::Leaf { proba, .. } => {
                        let _ = writeln!(
                            out,
                            "{indent}[{k}] leaf (samples={}, value=[{}, {}], p={proba})",
                            c[0] + c[1],
                            c[0],
                            c[1]
                        );
                    }
                }
            }
            walk(model, 0, 0, &name, &mut out);
        }
        TreeFormat::Dot => {
            out.push_str("digraph tree {\n  node [shape=box];\n");
            for (k, node) in model.nodes.iter().enumerate() {
                let c = node.counts();
                let label = match node {
                    TreeNode::Split { column, threshold, .. } => format!("{} <= {threshold}\\n", name(*column)),
                    TreeNode::Leaf { proba, .. } => format!("p = {proba}\\n"),
                };
                let label = format!("{label}samples = {}\\nvalue = [{}, {}]", c[0] + c[1], c[0], c[1]);
                let _ = writeln!(out, "  n{k} [label=\"{}\"];", label.replace('"', "\\\""));
                if let TreeNode::Split { left, right, .. } = node {
                    let _ = writeln!(out, "  n{k} -> n{left} [label=\"True\"];");
                    let _ = writeln!(out, "  n{k} -> n{right} [label=\"False\"];");
                }
            }
            out.push_str("}\n");
        }
    }
    out
}

/// Self-contained persisted model: the fitted encoder and schema travel
/// with the parameters so prediction needs nothing else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format: String,
    pub version: u32,
    pub seed: Option<u64>,
    pub schema: ExtractionSchema,
    pub encoder: EncoderState,
    pub model: Model,
}

impl ModelDocument {
    pub fn new(model: Model, encoder: EncoderState, schema: ExtractionSchema, seed: Option<u64>) -> Self {
        Self {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_FORMAT_VERSION,
            seed,
            schema,
            encoder,
            model,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model documents serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let doc: ModelDocument = serde_json::from_str(text).map_err(|e| ModelError::Format(e.to_string()))?;
        if doc.format != MODEL_FORMAT || doc.version != MODEL_FORMAT_VERSION {
            return Err(ModelError::Format(format!("{} version {}", doc.format, doc.version)));
        }
        if doc.model.n_features() != doc.encoder.d() {
            return Err(ModelError::Dimension {
                expected: doc.encoder.d(),
                got: doc.model.n_features(),
            });
        }
        Ok(doc)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| ModelError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ModelError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_sizes_and_order() {
        assert_eq!(grid(ModelFamily::Logreg).len(), 6);
        assert_eq!(grid(ModelFamily::Dtree).len(), 18);
        assert_eq!(grid(ModelFamily::Gbdt).len(), 9);
        assert_eq!(
            grid(ModelFamily::Dtree)[0],
            Hyperparams::Dtree {
                max_depth: 3,
                min_samples_split: 10
            }
        );
    }

    #[test]
    fn ties_pick_most_regularized() {
        // A constant column gives every candidate the same accuracy.
        let x: Vec<Vec<f64>> = (0..10).map(|_| vec![1.0]).collect();
        let y: Vec<u8> = (0..10).map(|i| u8::from(i < 3)).collect();
        for fam in ModelFamily::ALL {
            let (_, rep) = grid_search(fam, &x, &y, &x, &y).unwrap();
            assert_eq!(rep.best_index, 0, "{fam}");
        }
    }

    #[test]
    fn stump_importance_and_export() {
        let x: Vec<Vec<f64>> = (0..8).map(|i| vec![0.0, 1.0, 2.0, i as f64]).collect();
        let y: Vec<u8> = (0..8).map(|i| u8::from(i >= 4)).collect();
        let m = Model::Dtree(train_dtree(&x, &y, 3, 2).unwrap());
        assert_eq!(m.feature_importances(), vec![0.0, 0.0, 0.0, 1.0]);
        let Model::Dtree(t) = &m else { unreachable!() };
        let names: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let text = export_tree(t, &names, TreeFormat::Text);
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("[0] d <= 3.5 (samples=8, value=[4, 4])"));
        let dot = export_tree(t, &names, TreeFormat::Dot);
        assert_eq!(dot.matches("->").count(), 2);
        assert_eq!(dot, export_tree(t, &names, TreeFormat::Dot));
    }

    #[test]
    fn dimension_mismatch() {
        let m = Model::Logreg(LogRegModel {
            weights: vec![0.0; 2],
            bias: 0.0,
            c: 1.0,
            iterations: 0,
        });
        assert!(matches!(m.predict_proba(&[vec![1.0]]), Err(ModelError::Dimension { .. })));
    }
}
