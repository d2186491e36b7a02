//! Item-item and model-model cosine similarity plus block-structure summaries.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::ScoreMatrix;
use crate::spectral::ClusterReport;

/// Which axis of the score matrix a similarity matrix describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityAxis {
    Item,
    Model,
}

/// Symmetric cosine-similarity matrix with unit diagonal.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    values: Array2<f64>,
    axis: SimilarityAxis,
    labels: Vec<String>,
}

impl SimilarityMatrix {
    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn axis(&self) -> SimilarityAxis {
        self.axis
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Cosine similarity between every pair of item columns.
pub fn item_similarity(matrix: &ScoreMatrix) -> Result<SimilarityMatrix> {
    if matrix.n_models() == 0 || matrix.n_items() == 0 {
        return Err(Error::InvalidArgument("empty matrix".into()));
    }
    let scores = matrix.scores();
    let vectors: Vec<ArrayView1<'_, f64>> =
        (0..matrix.n_items()).map(|j| scores.column(j)).collect();
    Ok(SimilarityMatrix {
        values: cosine_matrix(&vectors),
        axis: SimilarityAxis::Item,
        labels: matrix.item_ids().to_vec(),
    })
}

/// Cosine similarity between every pair of model rows.
pub fn model_similarity(matrix: &ScoreMatrix) -> Result<SimilarityMatrix> {
    if matrix.n_models() == 0 || matrix.n_items() == 0 {
        return Err(Error::InvalidArgument("empty matrix".into()));
    }
    let scores = matrix.scores();
    let vectors: Vec<ArrayView1<'_, f64>> =
        (0..matrix.n_models()).map(|i| scores.row(i)).collect();
    Ok(SimilarityMatrix {
        values: cosine_matrix(&vectors),
        axis: SimilarityAxis::Model,
        labels: matrix.model_ids().to_vec(),
    })
}

fn cosine_matrix(vectors: &[ArrayView1<'_, f64>]) -> Array2<f64> {
    let p = vectors.len();
    let norms: Vec<f64> = vectors.iter().map(|v| v.dot(v).sqrt()).collect();
    let mut values = Array2::zeros((p, p));
    for i in 0..p {
        values[(i, i)] = 1.0;
        for j in (i + 1)..p {
            let cos = (vectors[i].dot(&vectors[j]) / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            values[(i, j)] = cos;
            values[(j, i)] = cos;
        }
    }
    values
}

/// Block-structure statistics and the plot-ready permuted similarity table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparsitySummary {
    pub c: usize,
    pub intra_similarity: f64,
    pub inter_similarity: f64,
    pub gap: f64,
}

/// Statistics of a clustering against the similarity matrix it was built from.
pub fn sparsity_summary(report: &ClusterReport, sim: &SimilarityMatrix) -> Result<SparsitySummary> {
    if report.assignments.len() != sim.len() {
        return Err(Error::DimensionMismatch {
            expected: sim.len(),
            got: report.assignments.len(),
        });
    }
    Ok(SparsitySummary {
        c: report.c,
        intra_similarity: report.intra_similarity,
        inter_similarity: report.inter_similarity,
        gap: report.intra_similarity - report.inter_similarity,
    })
}

/// The similarity matrix reordered by the report's block-diagonalizing
/// permutation, with labels in permuted order.
pub fn permuted_similarity(
    report: &ClusterReport,
    sim: &SimilarityMatrix,
) -> Result<(Vec<String>, Array2<f64>)> {
    let p = sim.len();
    if report.permutation.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: report.permutation.len(),
        });
    }
    let perm = &report.permutation;
    let values = sim.values();
    let mut out = Array2::zeros((p, p));
    for a in 0..p {
        for b in 0..p {
            out[(a, b)] = values[(perm[a], perm[b])];
        }
    }
    let labels = perm.iter().map(|&i| sim.labels()[i].clone()).collect();
    Ok((labels, out))
}

/// Mean within-cluster and across-cluster similarity over unordered pairs.
/// Conventions: no intra pairs -> 1.0, no inter pairs -> 0.0.
pub fn intra_inter_means(assignments: &[usize], values: ArrayView2<'_, f64>) -> (f64, f64) {
    let p = assignments.len();
    let mut intra_sum = 0.0;
    let mut intra_n = 0usize;
    let mut inter_sum = 0.0;
    let mut inter_n = 0usize;
    for i in 0..p {
        for j in (i + 1)..p {
            if assignments[i] == assignments[j] {
                intra_sum += values[(i, j)];
                intra_n += 1;
            } else {
                inter_sum += values[(i, j)];
                inter_n += 1;
            }
        }
    }
    let intra = if intra_n == 0 {
        1.0
    } else {
        intra_sum / intra_n as f64
    };
    let inter = if inter_n == 0 {
        0.0
    } else {
        inter_sum / inter_n as f64
    };
    (intra, inter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::{generate_synthetic, ScoreMatrix, SyntheticSpec};
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;

    fn matrix_from(rows: Vec<Vec<f64>>) -> ScoreMatrix {
        let m = rows.len();
        let n = rows[0].len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        ScoreMatrix::new(
            Array2::from_shape_vec((m, n), flat).unwrap(),
            (0..m).map(|i| format!("m{i}")).collect(),
            (0..n).map(|j| format!("i{j}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn item_similarity_trivial_cases() {
        // columns: identical / orthogonal / negated
        let m = matrix_from(vec![
            vec![1.0, 1.0, 1.0, -1.0],
            vec![1.0, 1.0, -1.0, -1.0],
            vec![-1.0, -1.0, 1.0, 1.0],
            vec![-1.0, -1.0, -1.0, 1.0],
        ]);
        let sim = item_similarity(&m).unwrap();
        let v = sim.values();
        assert_abs_diff_eq!(v[(0, 1)], 1.0, epsilon = 1e-12); // identical
        assert_abs_diff_eq!(v[(0, 2)], 0.0, epsilon = 1e-12); // orthogonal
        assert_abs_diff_eq!(v[(0, 3)], -1.0, epsilon = 1e-12); // negation
        for i in 0..4 {
            assert_eq!(v[(i, i)], 1.0);
        }
    }

    #[test]
    fn model_similarity_trivial_cases() {
        let m = matrix_from(vec![
            vec![1.0, -1.0, 1.0, 1.0],
            vec![1.0, -1.0, 1.0, 1.0],
            vec![-1.0, 1.0, -1.0, -1.0],
        ]);
        let sim = model_similarity(&m).unwrap();
        let v = sim.values();
        assert_abs_diff_eq!(v[(0, 1)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[(0, 2)], -1.0, epsilon = 1e-12);
        assert_eq!(v[(2, 2)], 1.0);
    }

    #[test]
    fn similarity_is_symmetric_with_unit_diagonal() {
        let spec = SyntheticSpec {
            m: 25,
            c: 3,
            n: 12,
            flip_prob: 0.2,
            difficulty_spread: 0.8,
            seed: 4,
        };
        let mat = generate_synthetic(&spec).unwrap();
        let sim = item_similarity(&mat).unwrap();
        let v = sim.values();
        for i in 0..sim.len() {
            assert_abs_diff_eq!(v[(i, i)], 1.0, epsilon = 1e-9);
            for j in 0..sim.len() {
                assert_abs_diff_eq!(v[(i, j)], v[(j, i)], epsilon = 1e-9);
                assert!(v[(i, j)] >= -1.0 && v[(i, j)] <= 1.0);
            }
        }
    }

    #[test]
    fn permuting_items_permutes_similarity_consistently() {
        let spec = SyntheticSpec {
            m: 20,
            c: 3,
            n: 9,
            flip_prob: 0.25,
            difficulty_spread: 0.6,
            seed: 14,
        };
        let mat = generate_synthetic(&spec).unwrap();
        // reversed item order
        let perm: Vec<usize> = (0..spec.n).rev().collect();
        let mut scores = Array2::zeros((spec.m, spec.n));
        for (new_j, &old_j) in perm.iter().enumerate() {
            scores.column_mut(new_j).assign(&mat.column(old_j));
        }
        let permuted = ScoreMatrix::new(
            scores,
            mat.model_ids().to_vec(),
            perm.iter().map(|&j| mat.item_ids()[j].clone()).collect(),
        )
        .unwrap();

        let sim = item_similarity(&mat).unwrap();
        let sim_perm = item_similarity(&permuted).unwrap();
        for a in 0..spec.n {
            for b in 0..spec.n {
                assert_eq!(sim_perm.values()[(a, b)], sim.values()[(perm[a], perm[b])]);
            }
        }

        // intra/inter statistics are invariant under a consistent relabeling
        let assignments: Vec<usize> = (0..spec.n).map(|j| j % 3).collect();
        let relabeled: Vec<usize> = (0..spec.n).map(|j| assignments[perm[j]]).collect();
        let (intra, inter) = intra_inter_means(&assignments, sim.values());
        let (intra_p, inter_p) = intra_inter_means(&relabeled, sim_perm.values());
        assert_abs_diff_eq!(intra, intra_p, epsilon = 1e-12);
        assert_abs_diff_eq!(inter, inter_p, epsilon = 1e-12);
    }

    #[test]
    fn noiseless_synthetic_columns_match_prototypes_exactly() {
        let spec = SyntheticSpec {
            m: 30,
            c: 4,
            n: 16,
            flip_prob: 0.0,
            difficulty_spread: 0.7,
            seed: 8,
        };
        let mat = generate_synthetic(&spec).unwrap();
        let sim = item_similarity(&mat).unwrap();
        let v = sim.values();
        for a in 0..spec.n {
            for b in 0..spec.n {
                if a % spec.c == b % spec.c {
                    assert_abs_diff_eq!(v[(a, b)], 1.0, epsilon = 1e-12);
                }
            }
        }
    }
}
