//! Linear anchor-weight estimation on a fixed support: closed-form least
//! squares and coordinate-descent least absolute deviations.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::matrix::ScoreMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    L2,
    L1,
}

/// Sparse linear estimator: weights live on `support` only.
/// Weights may be negative.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearEstimator {
    pub support: Vec<usize>,
    pub weights: Vec<f64>,
    pub objective: Objective,
    /// Residual norm at the fitted weights: ||Aw - y||_2 for L2,
    /// sum of |r_i| for L1.
    pub objective_value: f64,
}

impl LinearEstimator {
    /// Estimates for the given rows of a score matrix.
    pub fn predict_rows(&self, matrix: &ScoreMatrix, rows: &[usize]) -> Array1<f64> {
        let scores = matrix.scores();
        Array1::from_iter(rows.iter().map(|&r| {
            self.support
                .iter()
                .zip(self.weights.iter())
                .map(|(&j, &w)| scores[(r, j)] * w)
                .sum()
        }))
    }
}

/// Fit a linear estimator of the full-benchmark mean score on the support
/// columns, over every model row.
pub fn linear_fit(
    matrix: &ScoreMatrix,
    support: &[usize],
    objective: Objective,
) -> Result<LinearEstimator> {
    let targets = matrix.true_scores();
    fit_columns(matrix.scores(), targets.view(), support, objective)
}

/// Fit on an explicit design: `scores` rows are observations, the target is
/// approximated by a weighted sum of the `support` columns.
pub fn fit_columns(
    scores: ArrayView2<'_, f64>,
    targets: ArrayView1<'_, f64>,
    support: &[usize],
    objective: Objective,
) -> Result<LinearEstimator> {
    if support.is_empty() {
        return Err(Error::InvalidArgument("empty support".into()));
    }
    let n = scores.ncols();
    let mut seen = vec![false; n];
    for &j in support {
        if j >= n {
            return Err(Error::IndexOutOfRange {
                what: "item",
                index: j,
                len: n,
            });
        }
        if seen[j] {
            return Err(Error::DuplicateId {
                kind: "support item",
                id: j.to_string(),
            });
        }
        seen[j] = true;
    }

    let a = linalg::gather_columns(scores, support);
    let w_l2 = linalg::min_norm_least_squares(a.view(), targets)?;
    match objective {
        Objective::L2 => {
            let r = &a.dot(&w_l2) - &targets;
            Ok(LinearEstimator {
                support: support.to_vec(),
                weights: w_l2.to_vec(),
                objective: Objective::L2,
                objective_value: r.dot(&r).sqrt(),
            })
        }
        Objective::L1 => {
            let (w, value) = lad_coordinate_descent(&a, targets, w_l2);
            Ok(LinearEstimator {
                support: support.to_vec(),
                weights: w.to_vec(),
                objective: Objective::L1,
                objective_value: value,
            })
        }
    }
}

/// Coordinate descent for least absolute deviations, warm-started from the
/// least-squares solution. Each coordinate update is the exact weighted
/// median minimizer; a vertex-refinement step finishes the solve.
fn lad_coordinate_descent(
    a: &Array2<f64>,
    y: ArrayView1<'_, f64>,
    start: Array1<f64>,
) -> (Array1<f64>, f64) {
    let (m, p) = a.dim();
    let mut w = start;
    let mut r = &a.dot(&w) - &y;

    let tol = 1e-8;
    let max_passes = 500;
    for _ in 0..max_passes {
        let mut max_change = 0.0_f64;
        for j in 0..p {
            let col = a.column(j);
            // residual with coordinate j removed
            let mut candidates: Vec<(f64, f64)> = Vec::with_capacity(m);
            let mut total = 0.0;
            for i in 0..m {
                let aij = col[i];
                if aij != 0.0 {
                    let base = r[i] - aij * w[j];
                    candidates.push((-base / aij, aij.abs()));
                    total += aij.abs();
                }
            }
            if total == 0.0 {
                continue;
            }
            candidates.sort_by(|x, z| x.0.partial_cmp(&z.0).unwrap());
            let mut cum = 0.0;
            let mut t = candidates[candidates.len() - 1].0;
            for &(value, weight) in &candidates {
                cum += weight;
                if cum >= total / 2.0 {
                    t = value;
                    break;
                }
            }
            let delta = t - w[j];
            if delta != 0.0 {
                for i in 0..m {
                    r[i] += col[i] * delta;
                }
                w[j] = t;
                max_change = max_change.max(delta.abs());
            }
        }
        if max_change < tol {
            break;
        }
    }

    // Coordinate descent can stall on LAD (the non-smooth terms couple the
    // coordinates), so finish with a vertex local search: an optimal solution
    // interpolates rank(A) rows, and single-row pivots between interpolation
    // vertices reach it from a stalled point.
    let value = r.iter().map(|v| v.abs()).sum::<f64>();
    let rank = linalg::column_rank(a.view(), 1e-10);
    if rank == 0 || rank > m {
        return (w, value);
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| r[i].abs().partial_cmp(&r[j].abs()).unwrap());
    let mut active: Vec<usize> = order[..rank].to_vec();
    active.sort_unstable();

    let mut best = (w, value);
    if let Some((w0, v0)) = interpolate(a, y, &active) {
        if v0 < best.1 {
            best = (w0, v0);
        }
        let mut current = (active.clone(), v0);
        for _ in 0..200 {
            let mut improved: Option<(Vec<usize>, Array1<f64>, f64)> = None;
            for (slot, &_out_row) in current.0.clone().iter().enumerate() {
                for new_row in 0..m {
                    if current.0.contains(&new_row) {
                        continue;
                    }
                    let mut candidate = current.0.clone();
                    candidate[slot] = new_row;
                    candidate.sort_unstable();
                    if let Some((wc, vc)) = interpolate(a, y, &candidate) {
                        let best_so_far = improved.as_ref().map(|x| x.2).unwrap_or(current.1);
                        if vc < best_so_far - 1e-14 {
                            improved = Some((candidate, wc, vc));
                        }
                    }
                }
            }
            match improved {
                Some((set, wc, vc)) => {
                    current = (set, vc);
                    if vc < best.1 {
                        best = (wc, vc);
                    }
                }
                None => break,
            }
        }
    }
    best
}

/// Weights interpolating the given rows exactly, with the full objective,
/// when the row subsystem is consistent.
fn interpolate(a: &Array2<f64>, y: ArrayView1<'_, f64>, rows: &[usize]) -> Option<(Array1<f64>, f64)> {
    let a_sub = linalg::gather_rows(a.view(), rows);
    let y_sub = Array1::from_iter(rows.iter().map(|&i| y[i]));
    let w = linalg::min_norm_least_squares(a_sub.view(), y_sub.view()).ok()?;
    let fit = a_sub.dot(&w);
    let consistent = fit
        .iter()
        .zip(y_sub.iter())
        .all(|(f, t)| (f - t).abs() <= 1e-9 * (1.0 + t.abs()));
    if !consistent {
        return None;
    }
    let r = &a.dot(&w) - &y;
    Some((w, r.iter().map(|v| v.abs()).sum()))
}
