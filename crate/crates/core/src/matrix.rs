//! Model-item score matrices: ingestion, encoding, splits and synthetic generation.
//!
//! The canonical encoding is {-1.0, +1.0}: +1 marks a correct prediction,
//! -1 an incorrect one. {0,1} data is accepted at ingestion and mapped via
//! `s = 2a - 1`.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-model split label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Cell encoding for CSV interchange.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Encoding {
    /// Cells are 0 (incorrect) or 1 (correct).
    ZeroOne,
    /// Cells are -1 (incorrect) or +1 (correct).
    PlusMinus,
}

/// Dense m-models x n-items score matrix with ids and split labels.
///
/// Immutable after construction; all entries are exactly -1.0 or +1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    scores: Array2<f64>,
    model_ids: Vec<String>,
    item_ids: Vec<String>,
    splits: Vec<Split>,
}

impl ScoreMatrix {
    /// Build a matrix from parts, validating every invariant.
    /// All models start in the training split.
    pub fn new(
        scores: Array2<f64>,
        model_ids: Vec<String>,
        item_ids: Vec<String>,
    ) -> Result<Self> {
        let (m, n) = scores.dim();
        if model_ids.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: model_ids.len(),
            });
        }
        if item_ids.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: item_ids.len(),
            });
        }
        check_unique(&model_ids, "model")?;
        check_unique(&item_ids, "item")?;
        for ((i, j), &v) in scores.indexed_iter() {
            if v != -1.0 && v != 1.0 {
                return Err(Error::Parse {
                    row: i,
                    column: j,
                    message: format!("score {v} is not -1.0 or +1.0"),
                });
            }
        }
        let splits = vec![Split::Train; m];
        Ok(Self {
            scores,
            model_ids,
            item_ids,
            splits,
        })
    }

    pub fn n_models(&self) -> usize {
        self.scores.nrows()
    }

    pub fn n_items(&self) -> usize {
        self.scores.ncols()
    }

    pub fn scores(&self) -> ArrayView2<'_, f64> {
        self.scores.view()
    }

    pub fn model_ids(&self) -> &[String] {
        &self.model_ids
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn row(&self, model: usize) -> ArrayView1<'_, f64> {
        self.scores.row(model)
    }

    pub fn column(&self, item: usize) -> ArrayView1<'_, f64> {
        self.scores.column(item)
    }

    /// Indices of models carrying the given split label, in row order.
    pub fn models_in(&self, split: Split) -> Vec<usize> {
        (0..self.n_models())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    /// Mean score of one model over all n items, in [-1, 1].
    pub fn true_score(&self, model: usize) -> Result<f64> {
        if model >= self.n_models() {
            return Err(Error::IndexOutOfRange {
                what: "model",
                index: model,
                len: self.n_models(),
            });
        }
        Ok(self.row(model).mean().unwrap())
    }

    /// Mean scores of every model, in row order.
    pub fn true_scores(&self) -> Array1<f64> {
        self.scores.mean_axis(Axis(1)).unwrap()
    }

    /// Anchor-score vector for one model: the row restricted to `items`.
    pub fn anchor_scores(&self, model: usize, items: &[usize]) -> Array1<f64> {
        let row = self.row(model);
        Array1::from_iter(items.iter().map(|&j| row[j]))
    }

    /// Assign split labels according to `spec`, returning a new matrix.
    pub fn assign_splits(&self, spec: &SplitSpec) -> Result<ScoreMatrix> {
        let m = self.n_models();
        let mut out = self.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        match spec.mode {
            SplitMode::Random => {
                if spec.n_validation + spec.n_test >= m {
                    return Err(Error::InvalidArgument(format!(
                        "n_validation + n_test = {} must be < {m} models",
                        spec.n_validation + spec.n_test
                    )));
                }
                out.splits = vec![Split::Train; m];
                let val = sorted_sample(&mut rng, &(0..m).collect::<Vec<_>>(), spec.n_validation);
                for &i in &val {
                    out.splits[i] = Split::Validation;
                }
                let remaining: Vec<usize> =
                    (0..m).filter(|i| out.splits[*i] == Split::Train).collect();
                let test = sorted_sample(&mut rng, &remaining, spec.n_test);
                for &i in &test {
                    out.splits[i] = Split::Test;
                }
            }
            SplitMode::HoldoutFamily => {
                let mut matched = vec![false; m];
                for prefix in &spec.family_prefixes {
                    let mut any = false;
                    for (i, id) in self.model_ids.iter().enumerate() {
                        if id.starts_with(prefix.as_str()) {
                            matched[i] = true;
                            any = true;
                        }
                    }
                    if !any {
                        return Err(Error::NoPrefixMatch);
                    }
                }
                if spec.family_prefixes.is_empty() {
                    return Err(Error::NoPrefixMatch);
                }
                let rest: Vec<usize> = (0..m).filter(|&i| !matched[i]).collect();
                if spec.n_validation > rest.len() {
                    return Err(Error::InvalidArgument(format!(
                        "n_validation = {} exceeds the {} non-holdout models",
                        spec.n_validation,
                        rest.len()
                    )));
                }
                out.splits = vec![Split::Train; m];
                for (i, &hit) in matched.iter().enumerate() {
                    if hit {
                        out.splits[i] = Split::Test;
                    }
                }
                let val = sorted_sample(&mut rng, &rest, spec.n_validation);
                for &i in &val {
                    out.splits[i] = Split::Validation;
                }
            }
        }
        Ok(out)
    }

    /// Write the matrix as CSV, mirroring the ingestion schema.
    pub fn export_csv<W: Write>(&self, writer: W, encoding: Encoding) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = Vec::with_capacity(self.n_items() + 1);
        header.push("model_id".to_string());
        header.extend(self.item_ids.iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.n_models() {
            let mut record = Vec::with_capacity(self.n_items() + 1);
            record.push(self.model_ids[i].clone());
            for &s in self.row(i) {
                let cell = match encoding {
                    Encoding::ZeroOne => {
                        if s > 0.0 {
                            "1"
                        } else {
                            "0"
                        }
                    }
                    Encoding::PlusMinus => {
                        if s > 0.0 {
                            "1"
                        } else {
                            "-1"
                        }
                    }
                };
                record.push(cell.to_string());
            }
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_unique(ids: &[String], kind: &'static str) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateId {
                kind,
                id: id.clone(),
            });
        }
    }
    Ok(())
}

/// Seeded sample without replacement from `pool`, returned sorted ascending.
fn sorted_sample(rng: &mut ChaCha8Rng, pool: &[usize], amount: usize) -> Vec<usize> {
    let picked = index::sample(rng, pool.len(), amount);
    let mut out: Vec<usize> = picked.iter().map(|i| pool[i]).collect();
    out.sort_unstable();
    out
}

/// How models are assigned to train/validation/test.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub n_validation: usize,
    pub n_test: usize,
    #[serde(default)]
    pub family_prefixes: Vec<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    Random,
    HoldoutFamily,
}

impl SplitSpec {
    pub fn random(n_validation: usize, n_test: usize, seed: u64) -> Self {
        Self {
            mode: SplitMode::Random,
            n_validation,
            n_test,
            family_prefixes: Vec::new(),
            seed,
        }
    }
}

/// Parameters for a planted synthetic matrix: items are noisy copies of
/// `c` prototype columns, so a known-recoverable structure exists.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Model count.
    pub m: usize,
    /// Prototype (cluster) count.
    pub c: usize,
    /// Item count.
    pub n: usize,
    /// Per-entry flip probability in [0, 1].
    pub flip_prob: f64,
    /// Difficulty diversity in [0, 1]; 0 makes every prototype equally hard.
    pub difficulty_spread: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 || self.c == 0 {
            return Err(Error::InvalidArgument(
                "m, c and n must all be positive".into(),
            ));
        }
        if self.c > self.n {
            return Err(Error::InvalidArgument(format!(
                "c = {} must not exceed n = {}",
                self.c, self.n
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::InvalidArgument(format!(
                "flip_prob = {} must be in [0, 1]",
                self.flip_prob
            )));
        }
        if !(0.0..=1.0).contains(&self.difficulty_spread) {
            return Err(Error::InvalidArgument(format!(
                "difficulty_spread = {} must be in [0, 1]",
                self.difficulty_spread
            )));
        }
        Ok(())
    }

    /// Prototype difficulties, evenly spread around 0.5.
    pub fn difficulties(&self) -> Vec<f64> {
        (0..self.c)
            .map(|j| {
                if self.c == 1 {
                    0.5
                } else {
                    0.5 + self.difficulty_spread * (j as f64 / (self.c - 1) as f64 - 0.5)
                }
            })
            .collect()
    }

    /// Prototype index for item `j` (round-robin assignment).
    pub fn prototype_of(&self, item: usize) -> usize {
        item % self.c
    }
}

/// Generate a planted synthetic score matrix.
///
/// Each model draws a latent skill in [0, 1); prototype `j` is answered
/// correctly iff skill >= difficulty. Item `j` copies prototype `j mod c`,
/// then every entry flips independently with probability `flip_prob`.
/// Deterministic under `spec.seed`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<ScoreMatrix> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let skills: Vec<f64> = (0..spec.m).map(|_| rng.random::<f64>()).collect();
    let difficulties = spec.difficulties();

    let mut scores = Array2::zeros((spec.m, spec.n));
    for i in 0..spec.m {
        for j in 0..spec.n {
            let proto = spec.prototype_of(j);
            let mut v = if skills[i] >= difficulties[proto] {
                1.0
            } else {
                -1.0
            };
            // one draw per entry; none at all when noiseless
            if spec.flip_prob > 0.0 && rng.random::<f64>() < spec.flip_prob {
                v = -v;
            }
            scores[(i, j)] = v;
        }
    }

    let width = spec.m.max(spec.n).to_string().len().max(4);
    let model_ids = (0..spec.m).map(|i| format!("model_{i:0width$}")).collect();
    let item_ids = (0..spec.n).map(|j| format!("item_{j:0width$}")).collect();
    ScoreMatrix::new(scores, model_ids, item_ids)
}

/// Parse a score-matrix CSV: header `model_id,<item ids...>`, one row per model.
pub fn ingest_csv_reader<R: Read>(reader: R, encoding: Encoding) -> Result<ScoreMatrix> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let headers = r.headers()?.clone();
    if headers.len() < 2 {
        return Err(Error::InvalidArgument(
            "CSV needs a model_id column and at least one item column".into(),
        ));
    }
    let item_ids: Vec<String> = headers.iter().skip(1).map(|s| s.to_string()).collect();
    let n = item_ids.len();

    let mut model_ids = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    for (row_idx, record) in r.records().enumerate() {
        let record = record?;
        let model_id = record
            .get(0)
            .ok_or_else(|| Error::Parse {
                row: row_idx,
                column: 0,
                message: "missing model id".into(),
            })?
            .to_string();
        for (col_idx, cell) in record.iter().skip(1).enumerate() {
            values.push(parse_cell(cell, encoding, row_idx, col_idx)?);
        }
        model_ids.push(model_id);
    }
    let m = model_ids.len();
    let scores = Array2::from_shape_vec((m, n), values)
        .map_err(|e| Error::InvalidArgument(format!("ragged CSV: {e}")))?;
    ScoreMatrix::new(scores, model_ids, item_ids)
}

/// Parse a score-matrix CSV file. See [`ingest_csv_reader`].
pub fn ingest_csv(path: &Path, encoding: Encoding) -> Result<ScoreMatrix> {
    let file = std::fs::File::open(path)?;
    ingest_csv_reader(std::io::BufReader::new(file), encoding)
}

fn parse_cell(cell: &str, encoding: Encoding, row: usize, column: usize) -> Result<f64> {
    let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
        row,
        column,
        message: format!("cell `{cell}` is not a number"),
    })?;
    match encoding {
        Encoding::ZeroOne => {
            if v == 0.0 || v == 1.0 {
                Ok(2.0 * v - 1.0)
            } else {
                Err(Error::Parse {
                    row,
                    column,
                    message: format!("cell `{cell}` is not 0 or 1"),
                })
            }
        }
        Encoding::PlusMinus => {
            if v == -1.0 || v == 1.0 {
                Ok(v)
            } else {
                Err(Error::Parse {
                    row,
                    column,
                    message: format!("cell `{cell}` is not -1 or 1"),
                })
            }
        }
    }
}

/// Map a mean score in [-1, 1] to the accuracy scale [0, 1].
pub fn to_accuracy(mean_score: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&mean_score) {
        return Err(Error::InvalidArgument(format!(
            "mean score {mean_score} outside [-1, 1]"
        )));
    }
    Ok((mean_score + 1.0) / 2.0)
}

/// Seeded Fisher-Yates shuffle of 0..len, used by mini-batch training.
pub(crate) fn shuffled_indices(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(rng);
    idx
}
