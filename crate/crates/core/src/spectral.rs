//! Spectral clustering of a similarity matrix via the normalized Laplacian.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kmeans::{self, KMeansConfig};
use crate::linalg;
use crate::similarity::{intra_inter_means, SimilarityMatrix};

/// Outcome of clustering the elements behind a similarity matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterReport {
    /// Cluster index in [0, c) per element.
    pub assignments: Vec<usize>,
    pub c: usize,
    /// Mean pairwise similarity within clusters (1.0 when no pair exists).
    pub intra_similarity: f64,
    /// Mean pairwise similarity across clusters (0.0 when no pair exists).
    pub inter_similarity: f64,
    /// Element order that block-diagonalizes the similarity matrix:
    /// elements sorted by (cluster, original index).
    pub permutation: Vec<usize>,
}

/// Shift similarities into a nonnegative affinity: (sim + 1) / 2.
/// Anti-correlated elements stay maximally dissimilar instead of being
/// clipped to the same affinity as uncorrelated ones.
pub fn affinity_from_similarity(sim: &SimilarityMatrix) -> Array2<f64> {
    sim.values().mapv(|v| (v + 1.0) / 2.0)
}

/// Symmetric normalized Laplacian I - D^{-1/2} A D^{-1/2} of an affinity.
pub fn normalized_laplacian(affinity: &Array2<f64>) -> Array2<f64> {
    let p = affinity.nrows();
    let mut inv_sqrt_deg = Array1::zeros(p);
    for i in 0..p {
        let d: f64 = affinity.row(i).sum();
        inv_sqrt_deg[i] = if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 };
    }
    let mut l = Array2::zeros((p, p));
    for i in 0..p {
        for j in 0..p {
            let norm = -affinity[(i, j)] * inv_sqrt_deg[i] * inv_sqrt_deg[j];
            l[(i, j)] = if i == j { 1.0 + norm } else { norm };
        }
    }
    // exact symmetry for the eigensolver
    for i in 0..p {
        for j in (i + 1)..p {
            let v = 0.5 * (l[(i, j)] + l[(j, i)]);
            l[(i, j)] = v;
            l[(j, i)] = v;
        }
    }
    l
}

/// Cluster the elements of a similarity matrix into `c` groups.
///
/// Embeds every element by the `c` eigenvectors of the normalized Laplacian
/// with smallest eigenvalues, row-normalizes the embedding, and runs seeded
/// k-means (10 restarts) on the rows.
pub fn spectral_cluster(sim: &SimilarityMatrix, c: usize, seed: u64) -> Result<ClusterReport> {
    let p = sim.len();
    if c < 2 || c > p {
        return Err(Error::InvalidArgument(format!(
            "cluster count {c} must be in 2..={p}"
        )));
    }
    if c == p {
        // forced: every element its own cluster
        return report_from_assignments((0..p).collect(), c, sim);
    }

    let affinity = affinity_from_similarity(sim);
    let laplacian = normalized_laplacian(&affinity);
    let (_, vectors) = linalg::smallest_eigenpairs(laplacian.view(), c, seed)?;

    let mut embedding = vectors;
    for mut row in embedding.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 1e-300 {
            row.mapv_inplace(|v| v / norm);
        }
    }

    let km = kmeans::cluster(embedding.view(), &KMeansConfig::new(c, seed))?;
    report_from_assignments(km.assignments, c, sim)
}

pub(crate) fn report_from_assignments(
    assignments: Vec<usize>,
    c: usize,
    sim: &SimilarityMatrix,
) -> Result<ClusterReport> {
    let p = sim.len();
    let (intra, inter) = intra_inter_means(&assignments, sim.values());
    let mut permutation: Vec<usize> = (0..p).collect();
    permutation.sort_by_key(|&i| (assignments[i], i));
    Ok(ClusterReport {
        assignments,
        c,
        intra_similarity: intra,
        inter_similarity: inter,
        permutation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::{generate_synthetic, SyntheticSpec};
    use crate::similarity::{item_similarity, sparsity_summary};
    use approx::assert_abs_diff_eq;

    /// Exhaustive search over all 2-partitions of p <= 10 elements for the
    /// one maximizing mean intra-cluster similarity. Independent of the
    /// spectral path; used as the recovery oracle.
    fn best_two_partition(sim: &SimilarityMatrix) -> Vec<usize> {
        let p = sim.len();
        assert!(p <= 10);
        let values = sim.values();
        let mut best_mask = 1usize;
        let mut best_score = f64::NEG_INFINITY;
        for mask in 1..(1usize << p) - 1 {
            let assignments: Vec<usize> = (0..p).map(|i| (mask >> i) & 1).collect();
            let (intra, _) = intra_inter_means(&assignments, values);
            if intra > best_score {
                best_score = intra;
                best_mask = mask;
            }
        }
        (0..p).map(|i| (best_mask >> i) & 1).collect()
    }

    fn same_partition(a: &[usize], b: &[usize]) -> bool {
        // equal up to label swap for 2 clusters
        let direct = a == b;
        let flipped: Vec<usize> = b.iter().map(|&x| 1 - x).collect();
        direct || a == flipped.as_slice()
    }

    #[test]
    fn recovers_two_exact_blocks() {
        let spec = SyntheticSpec {
            m: 40,
            c: 2,
            n: 8,
            flip_prob: 0.0,
            difficulty_spread: 0.6,
            seed: 13,
        };
        let mat = generate_synthetic(&spec).unwrap();
        let sim = item_similarity(&mat).unwrap();
        let report = spectral_cluster(&sim, 2, 99).unwrap();
        let oracle = best_two_partition(&sim);
        assert!(
            same_partition(&report.assignments, &oracle),
            "spectral {:?} vs oracle {:?}",
            report.assignments,
            oracle
        );
        // items sharing a prototype must share a cluster
        for a in 0..8 {
            for b in 0..8 {
                if a % 2 == b % 2 {
                    assert_eq!(report.assignments[a], report.assignments[b]);
                }
            }
        }
    }

    #[test]
    fn disconnected_components_give_zero_eigenvalue_multiplicity_two() {
        // block-diagonal affinity: two components
        let mut affinity = Array2::zeros((6, 6));
        for i in 0..3 {
            for j in 0..3 {
                affinity[(i, j)] = 1.0;
                affinity[(i + 3, j + 3)] = 1.0;
            }
        }
        let l = normalized_laplacian(&affinity);
        let (vals, _) = linalg::symmetric_eigen(l.view()).unwrap();
        assert_abs_diff_eq!(vals[0], 0.0, epsilon = 1e-8);
        assert_abs_diff_eq!(vals[1], 0.0, epsilon = 1e-8);
        assert!(vals[2] > 1e-6);
    }

    #[test]
    fn c_equal_p_yields_singletons() {
        let spec = SyntheticSpec {
            m: 20,
            c: 3,
            n: 6,
            flip_prob: 0.35,
            difficulty_spread: 0.9,
            seed: 5,
        };
        let mat = generate_synthetic(&spec).unwrap();
        let sim = item_similarity(&mat).unwrap();
        let report = spectral_cluster(&sim, 6, 0).unwrap();
        let mut sorted = report.assignments.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 6);
        assert_eq!(report.intra_similarity, 1.0); // vacuous by convention
    }

    #[test]
    fn deterministic_under_seed() {
        let spec = SyntheticSpec {
            m: 30,
            c: 3,
            n: 12,
            flip_prob: 0.1,
            difficulty_spread: 0.7,
            seed: 77,
        };
        let mat = generate_synthetic(&spec).unwrap();
        let sim = item_similarity(&mat).unwrap();
        let a = spectral_cluster(&sim, 3, 123).unwrap();
        let b = spectral_cluster(&sim, 3, 123).unwrap();
        assert_eq!(a.assignments, b.assignments);
        assert_eq!(a.permutation, b.permutation);
    }

    #[test]
    fn permutation_is_bijective_and_blocks_sorted() {
        let spec = SyntheticSpec {
            m: 30,
            c: 2,
            n: 10,
            flip_prob: 0.05,
            difficulty_spread: 0.5,
            seed: 2,
        };
        let mat = generate_synthetic(&spec).unwrap();
        let sim = item_similarity(&mat).unwrap();
        let report = spectral_cluster(&sim, 2, 1).unwrap();
        let mut perm = report.permutation.clone();
        perm.sort_unstable();
        assert_eq!(perm, (0..10).collect::<Vec<_>>());
        // cluster labels appear in contiguous runs along the permutation
        let labels: Vec<usize> = report
            .permutation
            .iter()
            .map(|&i| report.assignments[i])
            .collect();
        let mut seen = Vec::new();
        for &l in &labels {
            if seen.last() != Some(&l) {
                assert!(!seen.contains(&l), "cluster {l} not contiguous");
                seen.push(l);
            }
        }
    }

    #[test]
    fn perfect_two_block_summary_has_unit_gap() {
        // two groups of identical columns, orthogonal across groups
        let rows = vec![
            vec![1.0, 1.0, 1.0, 1.0],
            vec![1.0, 1.0, -1.0, -1.0],
            vec![-1.0, -1.0, 1.0, 1.0],
            vec![-1.0, -1.0, -1.0, -1.0],
        ];
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let mat = crate::matrix::ScoreMatrix::new(
            Array2::from_shape_vec((4, 4), flat).unwrap(),
            (0..4).map(|i| format!("m{i}")).collect(),
            (0..4).map(|j| format!("i{j}")).collect(),
        )
        .unwrap();
        let sim = item_similarity(&mat).unwrap();
        let report = spectral_cluster(&sim, 2, 3).unwrap();
        let summary = sparsity_summary(&report, &sim).unwrap();
        assert_abs_diff_eq!(summary.gap, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn planted_noisy_structure_keeps_wide_gap() {
        // flip 0.1: same-prototype cosine concentrates near
        // 2(1-eps)^2 + 2eps^2 - 1 = 0.64, cross-prototype pairs average
        // 0.2 * (1-2*eps)^2 = 0.128, so the gap sits near 0.5
        let spec = SyntheticSpec {
            m: 300,
            c: 5,
            n: 25,
            flip_prob: 0.1,
            difficulty_spread: 0.8,
            seed: 17,
        };
        let mat = generate_synthetic(&spec).unwrap();
        let sim = item_similarity(&mat).unwrap();
        let report = spectral_cluster(&sim, 5, 3).unwrap();
        let summary = sparsity_summary(&report, &sim).unwrap();
        assert!(
            summary.gap > 0.3,
            "gap {} too small (intra {}, inter {})",
            summary.gap,
            summary.intra_similarity,
            summary.inter_similarity
        );
    }

    #[test]
    fn identical_columns_everywhere_gap_zero() {
        let mat = crate::matrix::ScoreMatrix::new(
            Array2::from_shape_fn((4, 4), |(i, _)| if i % 2 == 0 { 1.0 } else { -1.0 }),
            (0..4).map(|i| format!("m{i}")).collect(),
            (0..4).map(|j| format!("i{j}")).collect(),
        )
        .unwrap();
        let sim = item_similarity(&mat).unwrap();
        let report = spectral_cluster(&sim, 2, 3).unwrap();
        let summary = sparsity_summary(&report, &sim).unwrap();
        assert_abs_diff_eq!(summary.gap, 0.0, epsilon = 1e-9);
    }
}
