//! Evaluation metrics: accuracy-scale MAE and tie-corrected Kendall's tau.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean absolute error on the accuracy scale, in percentage points.
/// Both inputs are mean scores in [-1, 1]; each is mapped to (s + 1) / 2
/// before differencing.
pub fn mae(truth: &[f64], estimate: &[f64]) -> Result<f64> {
    if truth.len() != estimate.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: estimate.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::InvalidArgument("mae of empty vectors".into()));
    }
    let total: f64 = truth
        .iter()
        .zip(estimate.iter())
        .map(|(t, e)| ((t + 1.0) / 2.0 - (e + 1.0) / 2.0).abs())
        .sum();
    Ok(total / truth.len() as f64 * 100.0)
}

/// Tie-corrected Kendall rank correlation (tau-b) in O(n log n).
///
/// tau_b = (C - D) / sqrt((n0 - t1)(n0 - t2)) with n0 = n(n-1)/2 and t1, t2
/// the tie-pair counts of each input. Returns NaN when either side is fully
/// tied (the coefficient is undefined there).
pub fn kendall_tau(truth: &[f64], estimate: &[f64]) -> Result<f64> {
    if truth.len() != estimate.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: estimate.len(),
        });
    }
    let n = truth.len();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "kendall tau needs at least 2 observations".into(),
        ));
    }
    for &v in truth.iter().chain(estimate.iter()) {
        if v.is_nan() {
            return Err(Error::InvalidArgument("kendall tau input contains NaN".into()));
        }
    }

    let mut pairs: Vec<(f64, f64)> = truth
        .iter()
        .copied()
        .zip(estimate.iter().copied())
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.partial_cmp(&b.1).unwrap()));

    let n0 = n * (n - 1) / 2;
    let mut ties_x = 0usize; // pairs tied in truth
    let mut ties_xy = 0usize; // pairs tied in both
    let mut run_x = 1usize;
    let mut run_xy = 1usize;
    for i in 1..n {
        if pairs[i].0 == pairs[i - 1].0 {
            run_x += 1;
            if pairs[i].1 == pairs[i - 1].1 {
                run_xy += 1;
            } else {
                ties_xy += run_xy * (run_xy - 1) / 2;
                run_xy = 1;
            }
        } else {
            ties_x += run_x * (run_x - 1) / 2;
            run_x = 1;
            ties_xy += run_xy * (run_xy - 1) / 2;
            run_xy = 1;
        }
    }
    ties_x += run_x * (run_x - 1) / 2;
    ties_xy += run_xy * (run_xy - 1) / 2;

    // merge sort on the second coordinate counts discordant swaps
    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = vec![0.0; n];
    let swaps = merge_count(&mut ys, &mut buf);

    let mut ties_y = 0usize;
    let mut run_y = 1usize;
    for i in 1..n {
        if ys[i] == ys[i - 1] {
            run_y += 1;
        } else {
            ties_y += run_y * (run_y - 1) / 2;
            run_y = 1;
        }
    }
    ties_y += run_y * (run_y - 1) / 2;

    let denom = ((n0 - ties_x) as f64) * ((n0 - ties_y) as f64);
    if denom <= 0.0 {
        return Ok(f64::NAN);
    }
    let concordant_minus_discordant =
        n0 as f64 - ties_x as f64 - ties_y as f64 + ties_xy as f64 - 2.0 * swaps as f64;
    Ok((concordant_minus_discordant / denom.sqrt()).clamp(-1.0, 1.0))
}

/// Bottom-up merge sort that counts inversions. Equal elements never count
/// as inversions (stable merge takes from the left run first).
fn merge_count(data: &mut [f64], buf: &mut [f64]) -> usize {
    let n = data.len();
    let mut swaps = 0usize;
    let mut width = 1usize;
    while width < n {
        let mut start = 0usize;
        while start < n {
            let mid = (start + width).min(n);
            let end = (start + 2 * width).min(n);
            let (mut i, mut j, mut k) = (start, mid, start);
            while i < mid || j < end {
                if i < mid && (j >= end || data[i] <= data[j]) {
                    buf[k] = data[i];
                    i += 1;
                } else {
                    buf[k] = data[j];
                    j += 1;
                    swaps += mid - i;
                }
                k += 1;
            }
            start = end;
        }
        data[..n].copy_from_slice(&buf[..n]);
        width *= 2;
    }
    swaps
}

/// Per-model evaluation row, all values on the accuracy scale [0, 1].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerModelEval {
    pub model_id: String,
    pub true_score: f64,
    pub estimate: f64,
    pub residual: f64,
}

/// Evaluation summary for one model subset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub mae_percent: f64,
    /// None when undefined (all true or all estimated scores tied).
    pub kendall_tau: Option<f64>,
    pub per_model: Vec<PerModelEval>,
    pub n_models: usize,
    pub config_fingerprint: String,
    pub wall_time_seconds: f64,
}

impl EvalReport {
    /// Build a report from mean-score-scale truths and estimates.
    /// Estimates are clamped to [-1, 1] at this reporting boundary.
    pub fn from_scores(
        k: usize,
        model_ids: &[String],
        truth: &[f64],
        estimate: &[f64],
        config_fingerprint: String,
        wall_time_seconds: f64,
    ) -> Result<Self> {
        if model_ids.len() != truth.len() {
            return Err(Error::DimensionMismatch {
                expected: truth.len(),
                got: model_ids.len(),
            });
        }
        let clamped: Vec<f64> = estimate.iter().map(|e| e.clamp(-1.0, 1.0)).collect();
        let mae_percent = mae(truth, &clamped)?;
        let tau = kendall_tau(truth, &clamped)?;
        let per_model = model_ids
            .iter()
            .zip(truth.iter().zip(clamped.iter()))
            .map(|(id, (t, e))| {
                let true_acc = (t + 1.0) / 2.0;
                let est_acc = (e + 1.0) / 2.0;
                PerModelEval {
                    model_id: id.clone(),
                    true_score: true_acc,
                    estimate: est_acc,
                    residual: est_acc - true_acc,
                }
            })
            .collect();
        Ok(Self {
            k,
            mae_percent,
            kendall_tau: if tau.is_nan() { None } else { Some(tau) },
            per_model,
            n_models: truth.len(),
            config_fingerprint,
            wall_time_seconds,
        })
    }
}
