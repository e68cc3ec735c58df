//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use temed_core::models::logreg::objective;

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// Where the public datasets are looked up: `$TEMED_DATA_DIR` or `<repo>/data`.
pub fn data_dir() -> PathBuf {
    std::env::var_os("TEMED_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| repo_root().join("data"))
}

/// Pairwise AUC: every positive/negative pair, ties worth one half.
pub fn brute_auc(y: &[u8], s: &[f64]) -> Option<f64> {
    let (mut wins2, mut pairs) = (0u64, 0u64);
    for i in 0..y.len() {
        for j in 0..y.len() {
            if y[i] == 1 && y[j] == 0 {
                pairs += 1;
                wins2 += if s[i] > s[j] {
                    2
                } else if s[i] == s[j] {
                    1
                } else {
                    0
                };
            }
        }
    }
    (pairs > 0).then(|| wins2 as f64 / (2 * pairs) as f64)
}

/// Central differences of the penalized logistic objective; the bias
/// derivative is last.
pub fn finite_difference_gradient(x: &[Vec<f64>], y: &[u8], w: &[f64], b: f64, c: f64, h: f64) -> Vec<f64> {
    let mut g = Vec::with_capacity(w.len() + 1);
    for j in 0..w.len() {
        let mut wp = w.to_vec();
        let mut wm = w.to_vec();
        wp[j] += h;
        wm[j] -= h;
        g.push((objective(x, y, &wp, b, c) - objective(x, y, &wm, b, c)) / (2.0 * h));
    }
    g.push((objective(x, y, w, b + h, c) - objective(x, y, w, b - h, c)) / (2.0 * h));
    g
}

/// Exhaustive root split. Every column and every threshold halfway between
/// consecutive distinct values is scored by the weighted child Gini,
/// compared as exact fractions. Ties keep the lower column, then the lower
/// threshold. `None` when no split beats the parent.
pub fn brute_root_split(x: &[Vec<f64>], y: &[u8]) -> Option<(usize, f64)> {
    // Weighted child Gini times n equals n - sum_child (a^2 + b^2) / n_child,
    // so the best split maximizes P = sum_child (a^2 + b^2) / n_child,
    // held here as the fraction (num, den).
    let n = y.len() as i128;
    let pos = y.iter().filter(|&&v| v == 1).count() as i128;
    let parent = ((pos * pos + (n - pos) * (n - pos)), n);
    let mut best: Option<((i128, i128), usize, f64)> = None;
    let d = x.first().map_or(0, |r| r.len());
    for col in 0..d {
        let mut vals: Vec<f64> = x.iter().map(|r| r[col]).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        for pair in vals.windows(2) {
            let (lo, hi) = (pair[0], pair[1]);
            let mid = lo + (hi - lo) / 2.0;
            let t = if mid >= hi { lo } else { mid };
            let (mut l, mut lp, mut r, mut rp) = (0i128, 0i128, 0i128, 0i128);
            for (row, &yi) in x.iter().zip(y) {
                if row[col] <= t {
                    l += 1;
                    lp += i128::from(yi);
                } else {
                    r += 1;
                    rp += i128::from(yi);
                }
            }
            let score = (
                (lp * lp + (l - lp) * (l - lp)) * r + (rp * rp + (r - rp) * (r - rp)) * l,
                l * r,
            );
            let better = match &best {
                None => true,
                Some((b, _, _)) => score.0 * b.1 > b.0 * score.1,
            };
            if better {
                best = Some((score, col, t));
            }
        }
    }
    let (score, col, t) = best?;
    (score.0 * parent.1 > parent.0 * score.1).then_some((col, t))
}
