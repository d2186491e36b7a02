//! Anchor-set construction: k-means over item response patterns, seeded
//! random sampling, or the adaptive validation-based choice between them.

use ndarray::Array2;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kmeans::{self, KMeansConfig};
use crate::matrix::{ScoreMatrix, Split};
use crate::predictor::{self, Hyperparams};

/// How an anchor set was initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMethod {
    Kmeans,
    Random,
    AdaptiveKmeans,
    AdaptiveRandom,
}

/// One refinement swap: `removed` left the set, `added` joined it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapRecord {
    pub round: usize,
    pub removed: usize,
    pub added: usize,
}

/// An ordered set of k distinct item indices with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    indices: Vec<usize>,
    k: usize,
    init_method: InitMethod,
    history: Vec<SwapRecord>,
}

impl AnchorSet {
    pub fn new(indices: Vec<usize>, n_items: usize, init_method: InitMethod) -> Result<Self> {
        let k = indices.len();
        if k == 0 {
            return Err(Error::InvalidArgument("anchor set must be non-empty".into()));
        }
        let mut seen = vec![false; n_items];
        for &i in &indices {
            if i >= n_items {
                return Err(Error::IndexOutOfRange {
                    what: "item",
                    index: i,
                    len: n_items,
                });
            }
            if seen[i] {
                return Err(Error::DuplicateId {
                    kind: "anchor",
                    id: i.to_string(),
                });
            }
            seen[i] = true;
        }
        Ok(Self {
            indices,
            k,
            init_method,
            history: Vec::new(),
        })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn init_method(&self) -> InitMethod {
        self.init_method
    }

    pub fn history(&self) -> &[SwapRecord] {
        &self.history
    }

    pub fn contains(&self, item: usize) -> bool {
        self.indices.contains(&item)
    }

    /// Apply one refinement swap: drop `removed` (keeping order) and append
    /// `added`. Round indices must increase strictly.
    pub fn swap(&mut self, round: usize, removed: usize, added: usize) -> Result<()> {
        let pos = self
            .indices
            .iter()
            .position(|&i| i == removed)
            .ok_or(Error::InvalidArgument(format!(
                "removed item {removed} is not an anchor"
            )))?;
        if self.contains(added) {
            return Err(Error::InvalidArgument(format!(
                "added item {added} is already an anchor"
            )));
        }
        if let Some(last) = self.history.last() {
            if round <= last.round {
                return Err(Error::InvalidArgument(format!(
                    "round {round} must exceed previous round {}",
                    last.round
                )));
            }
        }
        self.indices.remove(pos);
        self.indices.push(added);
        self.history.push(SwapRecord {
            round,
            removed,
            added,
        });
        Ok(())
    }

    /// The position of `removed` that a swap would vacate (used to re-seed
    /// the matching input column on warm starts).
    pub fn position_of(&self, item: usize) -> Option<usize> {
        self.indices.iter().position(|&i| i == item)
    }
}

/// Select anchors by k-means over item columns restricted to training models.
/// The anchor of each cluster is the member item nearest the centroid
/// (ties break to the lowest item index).
pub fn kmeans_items(
    matrix: &ScoreMatrix,
    k: usize,
    seed: u64,
    restarts: usize,
) -> Result<AnchorSet> {
    let n = matrix.n_items();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "anchor budget k = {k} must be in 1..={n}"
        )));
    }
    if k == n {
        return AnchorSet::new((0..n).collect(), n, InitMethod::Kmeans);
    }
    let train_rows = matrix.models_in(Split::Train);
    if train_rows.is_empty() {
        return Err(Error::EmptySplit { split: "train" });
    }

    // item columns over training models become the points
    let scores = matrix.scores();
    let mut points = Array2::zeros((n, train_rows.len()));
    for j in 0..n {
        for (d, &r) in train_rows.iter().enumerate() {
            points[(j, d)] = scores[(r, j)];
        }
    }

    let mut config = KMeansConfig::new(k, seed);
    config.restarts = restarts.max(1);
    let km = kmeans::cluster(points.view(), &config)?;

    let mut anchors = Vec::with_capacity(k);
    for c in 0..k {
        let mut best: Option<(f64, usize)> = None;
        for j in 0..n {
            if km.assignments[j] != c {
                continue;
            }
            let d: f64 = points
                .row(j)
                .iter()
                .zip(km.centroids.row(c).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let better = match best {
                None => true,
                Some((bd, _)) => d < bd,
            };
            if better {
                best = Some((d, j));
            }
        }
        let (_, item) = best.ok_or(Error::InvalidArgument(format!("cluster {c} is empty")))?;
        anchors.push(item);
    }
    AnchorSet::new(anchors, n, InitMethod::Kmeans)
}

/// Seeded uniform sample of k distinct items, sorted ascending.
pub fn random_items(n_items: usize, k: usize, seed: u64) -> Result<AnchorSet> {
    if k == 0 || k > n_items {
        return Err(Error::InvalidArgument(format!(
            "anchor budget k = {k} must be in 1..={n_items}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = index::sample(&mut rng, n_items, k).into_iter().collect();
    picked.sort_unstable();
    AnchorSet::new(picked, n_items, InitMethod::Random)
}

/// Build both k-means and random candidate sets, train a proxy predictor on
/// each, and keep the one with the lower validation MAE (ties favor k-means).
pub fn adaptive_init(
    matrix: &ScoreMatrix,
    k: usize,
    seed: u64,
    proxy: &Hyperparams,
) -> Result<AnchorSet> {
    if matrix.models_in(Split::Validation).is_empty() {
        return Err(Error::EmptySplit {
            split: "validation",
        });
    }
    let km_set = kmeans_items(matrix, k, seed, 10)?;
    let rand_set = random_items(matrix.n_items(), k, seed)?;

    let (_, km_report) = predictor::train(matrix, &km_set, proxy)?;
    let (_, rand_report) = predictor::train(matrix, &rand_set, proxy)?;

    let (winner, method) = if rand_report.validation_mae < km_report.validation_mae {
        (rand_set, InitMethod::AdaptiveRandom)
    } else {
        (km_set, InitMethod::AdaptiveKmeans)
    };
    let mut out = winner;
    out.init_method = method;
    Ok(out)
}
