//! Independent brute-force oracles for subset reconstruction error and the
//! two structural properties of the linear setting: nested-support
//! monotonicity and one-round refinement improvement.
//!
//! These deliberately avoid the estimator's code paths: the L2 route projects
//! onto an orthonormal basis instead of solving normal equations, and the L1
//! route enumerates interpolation vertices (falling back to smoothed
//! iteratively reweighted least squares on larger instances).

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchors;
use crate::error::{Error, Result};
use crate::linalg;
use crate::linear::Objective;
use crate::matrix::ScoreMatrix;
use crate::refine::{self, LinearProxyConfig, RefineOptions};

const ORACLE_MAX_MODELS: usize = 50;
const ENUMERATION_CAP: usize = 200_000;

/// Exact optimal reconstruction error over weights supported on `support`:
/// min ||Sw - mu||. The empty support is the zero-weight convention ||mu||.
pub fn oracle_subset_error(
    matrix: &ScoreMatrix,
    support: &[usize],
    objective: Objective,
) -> Result<f64> {
    let targets = matrix.true_scores();
    oracle_subset_error_on(matrix.scores(), targets.view(), support, objective)
}

/// Oracle on an explicit design matrix and target vector.
pub fn oracle_subset_error_on(
    scores: ArrayView2<'_, f64>,
    targets: ArrayView1<'_, f64>,
    support: &[usize],
    objective: Objective,
) -> Result<f64> {
    let m = scores.nrows();
    if m > ORACLE_MAX_MODELS {
        return Err(Error::InvalidArgument(format!(
            "oracle handles at most {ORACLE_MAX_MODELS} models, got {m}"
        )));
    }
    for &j in support {
        if j >= scores.ncols() {
            return Err(Error::IndexOutOfRange {
                what: "item",
                index: j,
                len: scores.ncols(),
            });
        }
    }
    if support.is_empty() {
        return Ok(match objective {
            Objective::L2 => targets.dot(&targets).sqrt(),
            Objective::L1 => targets.iter().map(|v| v.abs()).sum(),
        });
    }
    let a = linalg::gather_columns(scores, support);
    match objective {
        Objective::L2 => Ok(linalg::projection_residual_norm(a.view(), targets)),
        Objective::L1 => Ok(lad_optimum(&a, targets)),
    }
}

/// Exact least-absolute-deviations optimum.
///
/// An optimal solution interpolates rank(A) rows, so enumerating all row
/// subsets of that size and solving each interpolation visits an optimal
/// vertex. When the enumeration would be too large, smoothed IRLS with a
/// vertex polish takes over.
fn lad_optimum(a: &Array2<f64>, y: ArrayView1<'_, f64>) -> f64 {
    let m = a.nrows();
    let rank = linalg::column_rank(a.view(), 1e-10);
    if rank == 0 {
        return y.iter().map(|v| v.abs()).sum();
    }
    let zero_value: f64 = y.iter().map(|v| v.abs()).sum();

    if binomial(m, rank).map(|c| c <= ENUMERATION_CAP) == Some(true) {
        let mut best = zero_value;
        let mut rows: Vec<usize> = (0..rank).collect();
        loop {
            if let Some(value) = interpolation_value(a, y, &rows) {
                if value < best {
                    best = value;
                }
            }
            if !next_combination(&mut rows, m) {
                break;
            }
        }
        best
    } else {
        irls_lad(a, y).min(zero_value)
    }
}

/// Objective of the weight vector interpolating the given rows, when the
/// row subsystem is consistent.
fn interpolation_value(a: &Array2<f64>, y: ArrayView1<'_, f64>, rows: &[usize]) -> Option<f64> {
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
    Some(r.iter().map(|v| v.abs()).sum())
}

/// Smoothed iteratively reweighted least squares for LAD, followed by a
/// vertex polish on the smallest residuals.
fn irls_lad(a: &Array2<f64>, y: ArrayView1<'_, f64>) -> f64 {
    let (m, p) = a.dim();
    let eps = 1e-12;
    let mut w = linalg::min_norm_least_squares(a.view(), y).unwrap_or_else(|_| Array1::zeros(p));
    let mut value = f64::INFINITY;
    for _ in 0..300 {
        let r = &a.dot(&w) - &y;
        let new_value: f64 = r.iter().map(|v| v.abs()).sum();
        if (value - new_value).abs() <= 1e-14 * (1.0 + new_value) {
            value = new_value;
            break;
        }
        value = new_value;
        // weighted least squares with weights 1/sqrt(r^2 + eps)
        let mut aw = Array2::zeros((m, p));
        let mut yw = Array1::zeros(m);
        for i in 0..m {
            let s = 1.0 / (r[i] * r[i] + eps).sqrt().sqrt();
            for j in 0..p {
                aw[(i, j)] = a[(i, j)] * s;
            }
            yw[i] = y[i] * s;
        }
        match linalg::min_norm_least_squares(aw.view(), yw.view()) {
            Ok(next) => w = next,
            Err(_) => break,
        }
    }

    // polish: interpolate the rank rows with the smallest residuals
    let rank = linalg::column_rank(a.view(), 1e-10);
    let r = &a.dot(&w) - &y;
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| r[i].abs().partial_cmp(&r[j].abs()).unwrap());
    if rank > 0 && rank <= m {
        if let Some(v) = interpolation_value(a, y, &order[..rank]) {
            if v < value {
                value = v;
            }
        }
    }
    value
}

fn binomial(n: usize, k: usize) -> Option<usize> {
    if k > n {
        return Some(0);
    }
    let mut acc = 1usize;
    for i in 0..k {
        acc = acc.checked_mul(n - i)?;
        acc /= i + 1;
        if acc > ENUMERATION_CAP * 64 {
            return None;
        }
    }
    Some(acc)
}

/// Advance `rows` to the next k-combination of 0..n. False when exhausted.
fn next_combination(rows: &mut [usize], n: usize) -> bool {
    let k = rows.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if rows[i] < n - (k - i) {
            rows[i] += 1;
            for j in (i + 1)..k {
                rows[j] = rows[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// One nested-pair violation found by the monotonicity check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prop1Violation {
    pub subset_small: Vec<usize>,
    pub subset_large: Vec<usize>,
    pub objective: Objective,
    pub error_small: f64,
    pub error_large: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prop1Report {
    pub subsets_checked: usize,
    pub pairs_checked: usize,
    pub violations: Vec<Prop1Violation>,
}

/// Check that every nested subset pair A ⊆ B (sizes up to `max_subset`)
/// satisfies E(B) <= E(A) + 1e-9 for both objectives.
pub fn check_prop1(matrix: &ScoreMatrix, max_subset: usize) -> Result<Prop1Report> {
    let n = matrix.n_items();
    if n > 14 && max_subset > 5 {
        return Err(Error::InvalidArgument(format!(
            "refusing to enumerate subsets of size {max_subset} over {n} items"
        )));
    }
    let targets = matrix.true_scores();
    let scores = matrix.scores();

    // all subsets of size <= max_subset as sorted index lists
    let mut subsets: Vec<Vec<usize>> = vec![Vec::new()];
    for size in 1..=max_subset.min(n) {
        let mut rows: Vec<usize> = (0..size).collect();
        loop {
            subsets.push(rows.clone());
            if !next_combination(&mut rows, n) {
                break;
            }
        }
    }

    let errors: Vec<(f64, f64)> = subsets
        .par_iter()
        .map(|s| {
            let l1 = oracle_subset_error_on(scores, targets.view(), s, Objective::L1).unwrap();
            let l2 = oracle_subset_error_on(scores, targets.view(), s, Objective::L2).unwrap();
            (l1, l2)
        })
        .collect();

    let mut violations = Vec::new();
    let mut pairs_checked = 0usize;
    let tol = 1e-9;
    for (bi, b) in subsets.iter().enumerate() {
        for (ai, a) in subsets.iter().enumerate() {
            if ai == bi || a.len() >= b.len() {
                continue;
            }
            if !a.iter().all(|x| b.contains(x)) {
                continue;
            }
            pairs_checked += 1;
            let (a_l1, a_l2) = errors[ai];
            let (b_l1, b_l2) = errors[bi];
            if b_l1 > a_l1 + tol {
                violations.push(Prop1Violation {
                    subset_small: a.clone(),
                    subset_large: b.clone(),
                    objective: Objective::L1,
                    error_small: a_l1,
                    error_large: b_l1,
                });
            }
            if b_l2 > a_l2 + tol {
                violations.push(Prop1Violation {
                    subset_small: a.clone(),
                    subset_large: b.clone(),
                    objective: Objective::L2,
                    error_small: a_l2,
                    error_large: b_l2,
                });
            }
        }
    }
    Ok(Prop1Report {
        subsets_checked: subsets.len(),
        pairs_checked,
        violations,
    })
}

/// Outcome of one seeded one-round linear-proxy refinement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prop2Case {
    pub seed: u64,
    pub error_before: f64,
    pub error_after: f64,
    pub removed: usize,
    pub added: usize,
    /// |s_{j*}^T r| > |s_{i*}^T r| and s_{j*} outside the anchor span.
    pub strict_hypothesis: bool,
    pub weak_holds: bool,
    pub strict_holds: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prop2Report {
    pub cases: Vec<Prop2Case>,
    pub weak_violations: usize,
    pub strict_violations: usize,
}

/// Run one-round linear-proxy refinement per seed on the given matrix and
/// measure the optimal L2 reconstruction error before and after the swap
/// with the independent oracle.
pub fn check_prop2(matrix: &ScoreMatrix, k: usize, seeds: &[u64]) -> Result<Prop2Report> {
    let cases: Vec<Prop2Case> = seeds
        .par_iter()
        .map(|&seed| prop2_single(matrix, k, seed))
        .collect::<Result<Vec<_>>>()?;
    let weak_violations = cases.iter().filter(|c| !c.weak_holds).count();
    let strict_violations = cases
        .iter()
        .filter(|c| c.strict_hypothesis && !c.strict_holds)
        .count();
    Ok(Prop2Report {
        cases,
        weak_violations,
        strict_violations,
    })
}

fn prop2_single(matrix: &ScoreMatrix, k: usize, seed: u64) -> Result<Prop2Case> {
    let n = matrix.n_items();
    let initial = anchors::random_items(n, k, seed)?;
    let options = RefineOptions::linear(LinearProxyConfig::default(), seed);
    let (refined, trace) = refine::refine(matrix, &initial, 1, &options)?;
    let round = &trace.rounds[0];

    let error_before = oracle_subset_error(matrix, initial.indices(), Objective::L2)?;
    let error_after = oracle_subset_error(matrix, refined.indices(), Objective::L2)?;

    // strictness hypothesis: CIS of the added beats AIS of the removed, and
    // the added column is independent of the anchor columns
    let removed_pos = round
        .anchor_items
        .iter()
        .position(|&i| i == round.removed)
        .expect("removed is an anchor");
    let ais_removed = round.ais_per_anchor[removed_pos];
    let cis_added = round
        .cis_top_candidates
        .iter()
        .find(|&&(i, _)| i == round.added)
        .map(|&(_, v)| v)
        .expect("added is the top candidate");

    let anchor_cols = linalg::gather_columns(matrix.scores(), initial.indices());
    let mut augmented = vec![0usize; 0];
    augmented.extend_from_slice(initial.indices());
    augmented.push(round.added);
    let aug_cols = linalg::gather_columns(matrix.scores(), &augmented);
    let outside_span =
        linalg::column_rank(aug_cols.view(), 1e-8) > linalg::column_rank(anchor_cols.view(), 1e-8);

    let strict_hypothesis = cis_added > ais_removed && outside_span;
    let weak_holds = error_after <= error_before + 1e-10;
    let strict_holds = error_before - error_after >= 1e-10;

    Ok(Prop2Case {
        seed,
        error_before,
        error_after,
        removed: round.removed,
        added: round.added,
        strict_hypothesis,
        weak_holds,
        strict_holds,
    })
}
