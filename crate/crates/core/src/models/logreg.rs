//! L2-regularized logistic regression fitted by damped Newton iterations.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{check_dims, check_labels, ModelError};

pub const MAX_ITER: usize = 100;
pub const GRAD_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRegModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    #[serde(rename = "C")]
    pub c: f64,
    pub iterations: usize,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Penalized objective split into its data and penalty parts:
/// mean log-loss, and `|w|^2 / (2 C n)`. The bias is not penalized.
pub fn objective_parts(x: &[Vec<f64>], y: &[u8], w: &[f64], b: f64, c: f64) -> (f64, f64) {
    let n = x.len() as f64;
    let data = x
        .iter()
        .zip(y)
        .map(|(row, &yi)| {
            let z = dot(row, w) + b;
            softplus(z) - f64::from(yi) * z
        })
        .sum::<f64>()
        / n;
    let penalty = w.iter().map(|v| v * v).sum::<f64>() / (2.0 * c * n);
    (data, penalty)
}

pub fn objective(x: &[Vec<f64>], y: &[u8], w: &[f64], b: f64, c: f64) -> f64 {
    let (d, p) = objective_parts(x, y, w, b, c);
    d + p
}

/// Gradient of [`objective`]; the last entry is the bias component.
pub fn gradient(x: &[Vec<f64>], y: &[u8], w: &[f64], b: f64, c: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let d = w.len();
    let mut g = vec![0.0; d + 1];
    for (row, &yi) in x.iter().zip(y) {
        let r = sigmoid(dot(row, w) + b) - f64::from(yi);
        for (gj, xj) in g.iter_mut().zip(row) {
            *gj += r * xj;
        }
        g[d] += r;
    }
    for j in 0..d {
        g[j] = g[j] / n + w[j] / (c * n);
    }
    g[d] /= n;
    g
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn train_logreg(x: &[Vec<f64>], y: &[u8], c: f64) -> Result<LogRegModel, ModelError> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(ModelError::InvalidHyperparameter(format!("C must be positive, got {c}")));
    }
    check_labels(y, x.len())?;
    let d = check_dims(x)?;
    let n = x.len() as f64;
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut f = objective(x, y, &w, b, c);
    let mut iterations = 0;
    while iterations < MAX_ITER {
        let g = gradient(x, y, &w, b, c);
        if norm(&g) <= GRAD_TOL {
            break;
        }
        iterations += 1;

        // Hessian of the mean loss plus the ridge on the weight block.
        let mut h = DMatrix::<f64>::zeros(d + 1, d + 1);
        for row in x {
            let p = sigmoid(dot(row, &w) + b);
            let s = p * (1.0 - p) / n;
            for i in 0..=d {
                let xi = if i < d { row[i] } else { 1.0 };
                if xi == 0.0 {
                    continue;
                }
                for j in 0..=i {
                    let xj = if j < d { row[j] } else { 1.0 };
                    h[(i, j)] += s * xi * xj;
                }
            }
        }
        for i in 0..=d {
            for j in 0..i {
                h[(j, i)] = h[(i, j)];
            }
        }
        for j in 0..d {
            h[(j, j)] += 1.0 / (c * n);
        }
        h[(d, d)] += 1e-12;
        let gv = DVector::from_column_slice(&g);
        let step = h
            .clone()
            .cholesky()
            .map(|ch| ch.solve(&gv))
            .or_else(|| h.lu().solve(&gv))
            .unwrap_or_else(|| gv.clone());

        // Backtracking on the Armijo condition.
        let slope = -gv.dot(&step);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let w_new: Vec<f64> = w.iter().zip(step.iter()).map(|(wj, sj)| wj - t * sj).collect();
            let b_new = b - t * step[d];
            let f_new = objective(x, y, &w_new, b_new, c);
            if !f_new.is_finite() {
                return Err(ModelError::NonFinite);
            }
            if f_new <= f + 1e-4 * t * slope {
                w = w_new;
                b = b_new;
                f = f_new;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if !f.is_finite() {
        return Err(ModelError::NonFinite);
    }
    Ok(LogRegModel {
        weights: w,
        bias: b,
        c,
        iterations,
    })
}

impl LogRegModel {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        sigmoid(dot(row, &self.weights) + self.bias)
    }
}
