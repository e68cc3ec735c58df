//! Gradient-boosted trees on binary log-loss.

use serde::{Deserialize, Serialize};

use super::logreg::{sigmoid, softplus};
use super::tree::{fit_regression_tree, Presorted, RegNode, RegTree};
use super::{check_dims, check_labels, ModelError};

pub const DEFAULT_TREE_DEPTH: usize = 6;
const MIN_HESSIAN: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub trees: Vec<RegTree>,
    pub learning_rate: f64,
    pub n_estimators: usize,
    pub initial_log_odds: f64,
    pub max_depth: usize,
    pub n_features: usize,
}

impl GbdtModel {
    pub fn raw_score(&self, row: &[f64]) -> f64 {
        self.initial_log_odds + self.learning_rate * self.trees.iter().map(|t| t.predict_row(row)).sum::<f64>()
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        sigmoid(self.raw_score(row))
    }

    /// The same ensemble cut to its first `n` trees.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.trees.len());
        Self {
            trees: self.trees[..n].to_vec(),
            n_estimators: n,
            ..self.clone()
        }
    }

    /// Summed squared-error decrease per column over all trees.
    pub fn split_gains(&self) -> Vec<f64> {
        let mut g = vec![0.0; self.n_features];
        for t in &self.trees {
            for node in &t.nodes {
                if let RegNode::Split { column, gain, .. } = node {
                    g[*column] += gain;
                }
            }
        }
        g
    }
}

/// Mean log-loss of raw scores `f`.
pub fn log_loss(f: &[f64], y: &[u8]) -> f64 {
    f.iter().zip(y).map(|(&fi, &yi)| softplus(fi) - f64::from(yi) * fi).sum::<f64>() / f.len() as f64
}

pub fn train_gbdt(x: &[Vec<f64>], y: &[u8], n_estimators: usize, learning_rate: f64) -> Result<GbdtModel, ModelError> {
    train_gbdt_with_depth(x, y, n_estimators, learning_rate, DEFAULT_TREE_DEPTH)
}

pub fn train_gbdt_with_depth(
    x: &[Vec<f64>],
    y: &[u8],
    n_estimators: usize,
    learning_rate: f64,
    max_depth: usize,
) -> Result<GbdtModel, ModelError> {
    if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
        return Err(ModelError::InvalidHyperparameter(format!("learning rate {learning_rate}")));
    }
    check_labels(y, x.len())?;
    let d = check_dims(x)?;
    let pos = y.iter().filter(|&&v| v == 1).count();
    if pos == 0 || pos == y.len() {
        return Err(ModelError::SingleClass);
    }
    let base = pos as f64 / y.len() as f64;
    let init = (base / (1.0 - base)).ln();
    let mut f = vec![init; x.len()];
    let mut trees = Vec::with_capacity(n_estimators);
    let presorted = Presorted::new(x);
    for _ in 0..n_estimators {
        let p: Vec<f64> = f.iter().map(|&v| sigmoid(v)).collect();
        let r: Vec<f64> = y.iter().zip(&p).map(|(&yi, pi)| f64::from(yi) - pi).collect();
        let leaf = |rows: &[usize]| {
            let num: f64 = rows.iter().map(|&i| r[i]).sum();
            let den: f64 = rows.iter().map(|&i| p[i] * (1.0 - p[i])).sum();
            if den < MIN_HESSIAN {
                0.0
            } else {
                num / den
            }
        };
        let tree = fit_regression_tree(x, &r, &presorted, max_depth, &leaf);
        for (fi, row) in f.iter_mut().zip(x) {
            *fi += learning_rate * tree.predict_row(row);
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        trees.push(tree);
    }
    Ok(GbdtModel {
        trees,
        learning_rate,
        n_estimators,
        initial_log_odds: init,
        max_depth,
        n_features: d,
    })
}
