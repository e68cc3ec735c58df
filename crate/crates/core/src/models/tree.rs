//! CART classification trees (Gini) and the least-squares regression trees
//! used as boosting stages.
//!
//! Both growers keep, per node, every column's row indices sorted by value
//! (ties by row index) and split those lists stably, so no node re-sorts.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::{check_dims, check_labels, ModelError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TreeNode {
    Split {
        column: usize,
        threshold: f64,
        left: usize,
        right: usize,
        counts: [u64; 2],
    },
    Leaf {
        counts: [u64; 2],
        proba: f64,
    },
}

impl TreeNode {
    pub fn counts(&self) -> [u64; 2] {
        match self {
            TreeNode::Split { counts, .. } | TreeNode::Leaf { counts, .. } => *counts,
        }
    }
}

/// Nodes are stored in preorder; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeModel {
    pub nodes: Vec<TreeNode>,
    pub max_depth: usize,
    pub min_samples_split: usize,
    pub n_features: usize,
    /// Unnormalized weighted Gini decrease per column.
    pub impurity_decrease: Vec<f64>,
}

pub fn gini(counts: [u64; 2]) -> f64 {
    let n = (counts[0] + counts[1]) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let p = counts[1] as f64 / n;
    1.0 - p * p - (1.0 - p) * (1.0 - p)
}

/// Threshold between consecutive distinct sorted values: the midpoint, or
/// the lower value when the midpoint rounds up to the upper one.
pub fn midpoint(lo: f64, hi: f64) -> f64 {
    let m = lo + (hi - lo) / 2.0;
    if m >= hi {
        lo
    } else {
        m
    }
}

/// Per-column row orders for a node.
#[derive(Debug, Clone)]
pub struct Presorted {
    cols: Vec<Vec<usize>>,
}

impl Presorted {
    pub fn new(x: &[Vec<f64>]) -> Self {
        let d = x.first().map_or(0, Vec::len);
        Self::for_rows(x, &(0..x.len()).collect::<Vec<_>>(), d)
    }

    fn for_rows(x: &[Vec<f64>], idx: &[usize], d: usize) -> Self {
        let cols = (0..d)
            .map(|c| {
                let mut o = idx.to_vec();
                o.sort_by(|&a, &b| x[a][c].total_cmp(&x[b][c]).then(a.cmp(&b)));
                o
            })
            .collect();
        Self { cols }
    }

    fn rows(&self) -> &[usize] {
        self.cols.first().map_or(&[], Vec::as_slice)
    }

    fn len(&self) -> usize {
        self.rows().len()
    }

    /// Stable split into (x <= threshold, rest).
    fn split(&self, x: &[Vec<f64>], column: usize, threshold: f64, mask: &mut [bool]) -> (Self, Self) {
        for &i in &self.cols[column] {
            mask[i] = x[i][column] <= threshold;
        }
        let (l, r) = self
            .cols
            .iter()
            .map(|o| o.iter().partition::<Vec<usize>, _>(|&&i| mask[i]))
            .unzip();
        (Self { cols: l }, Self { cols: r })
    }
}

/// Exact split score `(aL^2 + bL^2) / nL + (aR^2 + bR^2) / nR` held as a
/// fraction. Larger means lower weighted Gini.
#[derive(Debug, Clone, Copy)]
struct GiniScore {
    num: u128,
    den: u128,
}

impl GiniScore {
    fn new(left: [u64; 2], right: [u64; 2]) -> Self {
        let nl = u128::from(left[0] + left[1]);
        let nr = u128::from(right[0] + right[1]);
        Self {
            num: sq(left) * nr + sq(right) * nl,
            den: nl * nr,
        }
    }

    /// Score of the unsplit node on the same scale.
    fn parent(counts: [u64; 2]) -> Self {
        Self {
            num: sq(counts),
            den: u128::from(counts[0] + counts[1]),
        }
    }

    fn cmp(&self, other: &Self) -> Ordering {
        (self.num * other.den).cmp(&(other.num * self.den))
    }
}

fn sq(c: [u64; 2]) -> u128 {
    u128::from(c[0]) * u128::from(c[0]) + u128::from(c[1]) * u128::from(c[1])
}

fn class_counts(y: &[u8], rows: &[usize]) -> [u64; 2] {
    let mut c = [0u64; 2];
    for &i in rows {
        c[usize::from(y[i])] += 1;
    }
    c
}

/// Best split of rows `idx` as (column, threshold), or `None` when no split
/// lowers the weighted Gini. Ties go to the lower column, then the lower
/// threshold.
pub fn best_gini_split(x: &[Vec<f64>], y: &[u8], idx: &[usize]) -> Option<(usize, f64)> {
    let d = x.first().map_or(0, Vec::len);
    best_gini_split_sorted(x, y, &Presorted::for_rows(x, idx, d))
}

fn best_gini_split_sorted(x: &[Vec<f64>], y: &[u8], node: &Presorted) -> Option<(usize, f64)> {
    let total = class_counts(y, node.rows());
    let parent = GiniScore::parent(total);
    let mut best: Option<(GiniScore, usize, f64)> = None;
    for (col, order) in node.cols.iter().enumerate() {
        let mut left = [0u64; 2];
        for k in 0..order.len().saturating_sub(1) {
            left[usize::from(y[order[k]])] += 1;
            let (lo, hi) = (x[order[k]][col], x[order[k + 1]][col]);
            if lo == hi {
                continue;
            }
            let right = [total[0] - left[0], total[1] - left[1]];
            let score = GiniScore::new(left, right);
            if score.cmp(&parent) != Ordering::Greater {
                continue;
            }
            if best.as_ref().is_none_or(|(b, _, _)| score.cmp(b) == Ordering::Greater) {
                best = Some((score, col, midpoint(lo, hi)));
            }
        }
    }
    best.map(|(_, c, t)| (c, t))
}

pub fn train_dtree(x: &[Vec<f64>], y: &[u8], max_depth: usize, min_samples_split: usize) -> Result<TreeModel, ModelError> {
    if max_depth < 1 || min_samples_split < 2 {
        return Err(ModelError::InvalidHyperparameter(format!(
            "max_depth {max_depth} must be >= 1 and min_samples_split {min_samples_split} >= 2"
        )));
    }
    check_labels(y, x.len())?;
    let d = check_dims(x)?;
    let mut model = TreeModel {
        nodes: Vec::new(),
        max_depth,
        min_samples_split,
        n_features: d,
        impurity_decrease: vec![0.0; d],
    };
    let all: Vec<usize> = (0..x.len()).collect();
    if d == 0 {
        let counts = class_counts(y, &all);
        model.nodes.push(TreeNode::Leaf {
            counts,
            proba: counts[1] as f64 / x.len() as f64,
        });
        return Ok(model);
    }
    let root = Presorted::for_rows(x, &all, d);
    let mut mask = vec![false; x.len()];
    ClassGrower {
        x,
        y,
        n_total: x.len() as f64,
        mask: &mut mask,
        model: &mut model,
    }
    .grow(&root, 0);
    Ok(model)
}

struct ClassGrower<'a> {
    x: &'a [Vec<f64>],
    y: &'a [u8],
    n_total: f64,
    mask: &'a mut [bool],
    model: &'a mut TreeModel,
}

impl ClassGrower<'_> {
    fn grow(&mut self, node: &Presorted, depth: usize) -> usize {
        let counts = class_counts(self.y, node.rows());
        let n = node.len();
        let me = self.model.nodes.len();
        self.model.nodes.push(TreeNode::Leaf {
            counts,
            proba: counts[1] as f64 / n as f64,
        });
        let pure = counts[0] == 0 || counts[1] == 0;
        if depth >= self.model.max_depth || n < self.model.min_samples_split || pure {
            return me;
        }
        let Some((column, threshold)) = best_gini_split_sorted(self.x, self.y, node) else {
            return me;
        };
        let (l, r) = node.split(self.x, column, threshold, self.mask);
        let (lc, rc) = (class_counts(self.y, l.rows()), class_counts(self.y, r.rows()));
        let nf = n as f64;
        let decrease = nf / self.n_total
            * (gini(counts) - l.len() as f64 / nf * gini(lc) - r.len() as f64 / nf * gini(rc));
        self.model.impurity_decrease[column] += decrease.max(0.0);
        let left = self.grow(&l, depth + 1);
        let right = self.grow(&r, depth + 1);
        self.model.nodes[me] = TreeNode::Split {
            column,
            threshold,
            left,
            right,
            counts,
        };
        me
    }
}

impl TreeModel {
    pub fn leaf_for(&self, row: &[f64]) -> &TreeNode {
        let mut k = 0;
        loop {
            match &self.nodes[k] {
                TreeNode::Split {
                    column,
                    threshold,
                    left,
                    right,
                    ..
                } => k = if row[*column] <= *threshold { *left } else { *right },
                leaf => return leaf,
            }
        }
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        match self.leaf_for(row) {
            TreeNode::Leaf { proba, .. } => *proba,
            TreeNode::Split { .. } => unreachable!(),
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], k: usize) -> usize {
            match &nodes[k] {
                TreeNode::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
                TreeNode::Leaf { .. } => 0,
            }
        }
        walk(&self.nodes, 0)
    }
}

/// Regression tree node for boosting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RegNode {
    Split {
        column: usize,
        threshold: f64,
        left: usize,
        right: usize,
        /// Squared-error decrease of this split.
        gain: f64,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegTree {
    pub nodes: Vec<RegNode>,
}

impl RegTree {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut k = 0;
        loop {
            match &self.nodes[k] {
                RegNode::Split {
                    column,
                    threshold,
                    left,
                    right,
                    ..
                } => k = if row[*column] <= *threshold { *left } else { *right },
                RegNode::Leaf { value } => return *value,
            }
        }
    }
}

/// Best least-squares split on residuals `r`: maximizes
/// `SL^2/nL + SR^2/nR - S^2/n`. Returns (column, threshold, gain).
fn best_sse_split(x: &[Vec<f64>], r: &[f64], node: &Presorted) -> Option<(usize, f64, f64)> {
    let n = node.len() as f64;
    let total: f64 = node.rows().iter().map(|&i| r[i]).sum();
    let base = total * total / n;
    let mut best: Option<(usize, f64, f64)> = None;
    for (col, order) in node.cols.iter().enumerate() {
        let mut sl = 0.0;
        for k in 0..order.len().saturating_sub(1) {
            sl += r[order[k]];
            let (lo, hi) = (x[order[k]][col], x[order[k + 1]][col]);
            if lo == hi {
                continue;
            }
            let nl = (k + 1) as f64;
            let sr = total - sl;
            let gain = sl * sl / nl + sr * sr / (n - nl) - base;
            if gain > 1e-12 * (1.0 + base.abs()) && best.is_none_or(|(_, _, g)| gain > g) {
                best = Some((col, midpoint(lo, hi), gain));
            }
        }
    }
    best
}

/// Fits a regression tree of depth at most `max_depth` to residuals `r`.
/// `presorted` must come from [`Presorted::new`] on the same `x`. Leaves
/// take `leaf_value(rows)`.
pub fn fit_regression_tree(
    x: &[Vec<f64>],
    r: &[f64],
    presorted: &Presorted,
    max_depth: usize,
    leaf_value: &dyn Fn(&[usize]) -> f64,
) -> RegTree {
    let mut nodes = Vec::new();
    if presorted.cols.is_empty() {
        let all: Vec<usize> = (0..x.len()).collect();
        nodes.push(RegNode::Leaf { value: leaf_value(&all) });
        return RegTree { nodes };
    }
    let mut mask = vec![false; x.len()];
    RegGrower {
        x,
        r,
        max_depth,
        leaf_value,
        mask: &mut mask,
        nodes: &mut nodes,
    }
    .grow(presorted, 0);
    RegTree { nodes }
}

struct RegGrower<'a> {
    x: &'a [Vec<f64>],
    r: &'a [f64],
    max_depth: usize,
    leaf_value: &'a dyn Fn(&[usize]) -> f64,
    mask: &'a mut [bool],
    nodes: &'a mut Vec<RegNode>,
}

impl RegGrower<'_> {
    fn grow(&mut self, node: &Presorted, depth: usize) -> usize {
        let me = self.nodes.len();
        self.nodes.push(RegNode::Leaf { value: 0.0 });
        let split = if depth < self.max_depth && node.len() >= 2 {
            best_sse_split(self.x, self.r, node)
        } else {
            None
        };
        match split {
            None => {
                self.nodes[me] = RegNode::Leaf {
                    value: (self.leaf_value)(node.rows()),
                };
            }
            Some((column, threshold, gain)) => {
                let (l, r) = node.split(self.x, column, threshold, self.mask);
                let left = self.grow(&l, depth + 1);
                let right = self.grow(&r, depth + 1);
                self.nodes[me] = RegNode::Split {
                    column,
                    threshold,
                    left,
                    right,
                    gain,
                };
            }
        }
        me
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gini_values() {
        assert_eq!(gini([5, 5]), 0.5);
        assert_eq!(gini([4, 0]), 0.0);
    }

    #[test]
    fn pure_node_is_leaf() {
        let m = train_dtree(&[vec![1.0], vec![2.0]], &[1, 1], 3, 2).unwrap();
        assert_eq!(m.nodes.len(), 1);
    }

    #[test]
    fn single_leaf_fraction() {
        let x = vec![vec![0.0]; 4];
        let m = train_dtree(&x, &[0, 0, 1, 0], 3, 2).unwrap();
        assert_eq!(m.predict_row(&[9.0]), 0.25);
    }

    #[test]
    fn stump_picks_separating_column() {
        let x = vec![
            vec![0.0, 1.0, 5.0, 0.0],
            vec![0.0, 2.0, 5.0, 1.0],
            vec![0.0, 1.0, 5.0, 2.0],
            vec![0.0, 2.0, 5.0, 3.0],
        ];
        let m = train_dtree(&x, &[0, 0, 1, 1], 1, 2).unwrap();
        let TreeNode::Split { column, threshold, .. } = m.nodes[0] else { panic!() };
        assert_eq!((column, threshold), (3, 1.5));
    }

    #[test]
    fn midpoint_fallback() {
        let lo = 1.0f64;
        let hi = f64::from_bits(lo.to_bits() + 1);
        assert_eq!(midpoint(lo, hi), lo);
        assert_eq!(midpoint(1.0, 2.0), 1.5);
    }

    #[test]
    fn ties_prefer_lower_column() {
        let x = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        let m = train_dtree(&x, &[0, 1], 2, 2).unwrap();
        let TreeNode::Split { column, .. } = m.nodes[0] else { panic!() };
        assert_eq!(column, 0);
    }

    #[test]
    fn depth_and_min_split_respected() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64, (i * 13 % 7) as f64]).collect();
        let y: Vec<u8> = (0..40).map(|i| u8::from((i * 13 % 7) > 3 || i % 5 == 0)).collect();
        let m = train_dtree(&x, &y, 3, 10).unwrap();
        assert!(m.depth() <= 3);
        for node in &m.nodes {
            if let TreeNode::Split { counts, .. } = node {
                assert!(counts[0] + counts[1] >= 10);
            }
        }
    }
}
