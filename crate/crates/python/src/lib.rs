//! Python bindings: score matrices, anchor selection, estimator training and
//! the end-to-end pipeline, exposed with plain Python types.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use sparseeval::anchors::{AnchorSet, InitMethod};
use sparseeval::matrix::{Encoding, ScoreMatrix, Split, SplitSpec, SyntheticSpec};
use sparseeval::predictor::{Hyperparams, LossKind, WeightPredictor};
use sparseeval::refine::{InitChoice, PipelineParams};

fn to_py_err(err: sparseeval::Error) -> PyErr {
    PyValueError::new_err(err.to_string())
}

fn parse_encoding(encoding: &str) -> PyResult<Encoding> {
    match encoding {
        "zero-one" => Ok(Encoding::ZeroOne),
        "plus-minus" => Ok(Encoding::PlusMinus),
        other => Err(PyValueError::new_err(format!(
            "unknown encoding `{other}` (use \"zero-one\" or \"plus-minus\")"
        ))),
    }
}

/// A dense model-item score matrix with split labels.
#[pyclass(name = "Matrix", from_py_object)]
#[derive(Clone)]
struct PyMatrix {
    inner: ScoreMatrix,
}

#[pymethods]
impl PyMatrix {
    #[getter]
    fn n_models(&self) -> usize {
        self.inner.n_models()
    }

    #[getter]
    fn n_items(&self) -> usize {
        self.inner.n_items()
    }

    fn model_ids(&self) -> Vec<String> {
        self.inner.model_ids().to_vec()
    }

    fn item_ids(&self) -> Vec<String> {
        self.inner.item_ids().to_vec()
    }

    /// Mean score per model over all items, in [-1, 1].
    fn true_scores(&self) -> Vec<f64> {
        self.inner.true_scores().to_vec()
    }

    /// Accuracy of one model in [0, 1].
    fn accuracy(&self, model: usize) -> PyResult<f64> {
        let score = self.inner.true_score(model).map_err(to_py_err)?;
        sparseeval::to_accuracy(score).map_err(to_py_err)
    }

    /// One row of scores (+1/-1 entries).
    fn row(&self, model: usize) -> PyResult<Vec<f64>> {
        if model >= self.inner.n_models() {
            return Err(PyValueError::new_err(format!("model {model} out of range")));
        }
        Ok(self.inner.row(model).to_vec())
    }

    /// Assign random validation/test splits, returning a new matrix.
    fn assign_splits(&self, n_validation: usize, n_test: usize, seed: u64) -> PyResult<PyMatrix> {
        let spec = SplitSpec::random(n_validation, n_test, seed);
        Ok(PyMatrix {
            inner: self.inner.assign_splits(&spec).map_err(to_py_err)?,
        })
    }

    /// Write the matrix as CSV.
    #[pyo3(signature = (path, encoding = "zero-one"))]
    fn to_csv(&self, path: PathBuf, encoding: &str) -> PyResult<()> {
        let enc = parse_encoding(encoding)?;
        let file = std::fs::File::create(path)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        self.inner.export_csv(file, enc).map_err(to_py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Matrix({} models x {} items)",
            self.inner.n_models(),
            self.inner.n_items()
        )
    }
}

/// Generate a planted synthetic matrix (items are noisy prototype copies).
#[pyfunction]
#[pyo3(signature = (m, c, n, flip_prob = 0.0, difficulty_spread = 0.8, seed = 0))]
fn synthetic_matrix(
    m: usize,
    c: usize,
    n: usize,
    flip_prob: f64,
    difficulty_spread: f64,
    seed: u64,
) -> PyResult<PyMatrix> {
    let spec = SyntheticSpec {
        m,
        c,
        n,
        flip_prob,
        difficulty_spread,
        seed,
    };
    Ok(PyMatrix {
        inner: sparseeval::generate_synthetic(&spec).map_err(to_py_err)?,
    })
}

/// Read a score-matrix CSV (`model_id` column plus one column per item).
#[pyfunction]
#[pyo3(signature = (path, encoding = "zero-one"))]
fn ingest_csv(path: PathBuf, encoding: &str) -> PyResult<PyMatrix> {
    let enc = parse_encoding(encoding)?;
    Ok(PyMatrix {
        inner: sparseeval::ingest_csv(&path, enc).map_err(to_py_err)?,
    })
}

/// Item-item cosine similarity as a nested list.
#[pyfunction]
fn item_similarity(matrix: &PyMatrix) -> PyResult<Vec<Vec<f64>>> {
    let sim = sparseeval::item_similarity(&matrix.inner).map_err(to_py_err)?;
    let values = sim.values();
    Ok((0..sim.len())
        .map(|i| values.row(i).to_vec())
        .collect())
}

/// Spectral clustering of the item similarity structure.
#[pyfunction]
fn cluster_items(matrix: &PyMatrix, c: usize, seed: u64) -> PyResult<ClusterSummary> {
    let sim = sparseeval::item_similarity(&matrix.inner).map_err(to_py_err)?;
    let report = sparseeval::spectral_cluster(&sim, c, seed).map_err(to_py_err)?;
    Ok(ClusterSummary {
        assignments: report.assignments.clone(),
        intra_similarity: report.intra_similarity,
        inter_similarity: report.inter_similarity,
        gap: report.intra_similarity - report.inter_similarity,
    })
}

#[pyclass]
struct ClusterSummary {
    #[pyo3(get)]
    assignments: Vec<usize>,
    #[pyo3(get)]
    intra_similarity: f64,
    #[pyo3(get)]
    inter_similarity: f64,
    #[pyo3(get)]
    gap: f64,
}

/// Anchor items by k-means over item response patterns (training split).
#[pyfunction]
#[pyo3(signature = (matrix, k, seed = 0, restarts = 10))]
fn kmeans_anchors(matrix: &PyMatrix, k: usize, seed: u64, restarts: usize) -> PyResult<Vec<usize>> {
    let set = sparseeval::kmeans_items(&matrix.inner, k, seed, restarts).map_err(to_py_err)?;
    Ok(set.indices().to_vec())
}

/// Seeded random anchor sample, sorted ascending.
#[pyfunction]
fn random_anchors(n_items: usize, k: usize, seed: u64) -> PyResult<Vec<usize>> {
    let set = sparseeval::random_items(n_items, k, seed).map_err(to_py_err)?;
    Ok(set.indices().to_vec())
}

/// A trained anchor-score estimator.
#[pyclass]
struct Estimator {
    inner: WeightPredictor,
}

#[pymethods]
impl Estimator {
    /// Anchor item indices, in input order.
    fn anchors(&self) -> Vec<usize> {
        self.inner.anchor_indices().to_vec()
    }

    /// Per-anchor weight vector.
    fn anchor_weights(&self) -> Vec<f64> {
        self.inner.anchor_weights().to_vec()
    }

    /// Estimate a model's accuracy in [0, 1] from its anchor scores
    /// (+1/-1, one per anchor, in anchor order).
    fn estimate(&self, anchor_scores: Vec<f64>) -> PyResult<f64> {
        let x = ndarray::Array1::from_vec(anchor_scores);
        let raw = self.inner.forward(x.view()).map_err(to_py_err)?;
        Ok((raw.clamp(-1.0, 1.0) + 1.0) / 2.0)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py_err)
    }

    #[staticmethod]
    fn from_json(json: &str) -> PyResult<Estimator> {
        Ok(Estimator {
            inner: WeightPredictor::from_json(json).map_err(to_py_err)?,
        })
    }
}

/// Train an estimator on the matrix's training split for a fixed anchor set.
#[pyfunction]
#[pyo3(signature = (matrix, anchors, epochs = 500, hidden = 256, learning_rate = 6e-4, batch_size = 256, seed = 0))]
fn train_estimator(
    matrix: &PyMatrix,
    anchors: Vec<usize>,
    epochs: usize,
    hidden: usize,
    learning_rate: f64,
    batch_size: usize,
    seed: u64,
) -> PyResult<(Estimator, f64)> {
    let set = AnchorSet::new(anchors, matrix.inner.n_items(), InitMethod::Random)
        .map_err(to_py_err)?;
    let hp = Hyperparams {
        learning_rate,
        epochs,
        batch_size,
        hidden,
        seed,
        loss: LossKind::L2Norm,
    };
    let (predictor, report) =
        sparseeval::train(&matrix.inner, &set, &hp).map_err(to_py_err)?;
    Ok((Estimator { inner: predictor }, report.validation_mae))
}

/// Outcome of a full pipeline run.
#[pyclass]
struct PipelineResult {
    #[pyo3(get)]
    anchors: Vec<usize>,
    #[pyo3(get)]
    mae_percent: f64,
    #[pyo3(get)]
    kendall_tau: Option<f64>,
    #[pyo3(get)]
    swaps: Vec<(usize, usize, usize)>,
    predictor: WeightPredictor,
}

#[pymethods]
impl PipelineResult {
    fn estimator(&self) -> Estimator {
        Estimator {
            inner: self.predictor.clone(),
        }
    }
}

/// End-to-end pipeline: adaptive init, refinement, final training, test
/// evaluation. The matrix needs train/validation/test splits assigned.
#[pyfunction]
#[pyo3(signature = (matrix, k, rounds = 10, seed = 0, init = "adaptive", proxy_epochs = 50,
                    final_epochs = 500, hidden = 256, learning_rate = 6e-4, batch_size = 256,
                    linear_proxy = false, warm_start = false))]
#[allow(clippy::too_many_arguments)]
fn run_pipeline(
    matrix: &PyMatrix,
    k: usize,
    rounds: usize,
    seed: u64,
    init: &str,
    proxy_epochs: usize,
    final_epochs: usize,
    hidden: usize,
    learning_rate: f64,
    batch_size: usize,
    linear_proxy: bool,
    warm_start: bool,
) -> PyResult<PipelineResult> {
    let init = match init {
        "adaptive" => InitChoice::Adaptive,
        "kmeans" => InitChoice::Kmeans,
        "random" => InitChoice::Random,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown init `{other}` (use \"adaptive\", \"kmeans\" or \"random\")"
            )))
        }
    };
    let params = PipelineParams {
        k,
        rounds,
        init,
        proxy_epochs,
        final_epochs,
        learning_rate,
        batch_size,
        hidden,
        loss: LossKind::L2Norm,
        seed,
        linear_proxy,
        warm_start,
        skip_refinement: rounds == 0,
    };
    let outcome =
        sparseeval::run_pipeline(&matrix.inner, &params, "python".into()).map_err(to_py_err)?;
    Ok(PipelineResult {
        anchors: outcome.anchors.indices().to_vec(),
        mae_percent: outcome.report.mae_percent,
        kendall_tau: outcome.report.kendall_tau,
        swaps: outcome
            .anchors
            .history()
            .iter()
            .map(|s| (s.round, s.removed, s.added))
            .collect(),
        predictor: outcome.predictor,
    })
}

/// Accuracy-scale mean absolute error (%) between mean-score vectors.
#[pyfunction]
fn mae(truth: Vec<f64>, estimate: Vec<f64>) -> PyResult<f64> {
    sparseeval::mae(&truth, &estimate).map_err(to_py_err)
}

/// Tie-corrected Kendall rank correlation; None when undefined.
#[pyfunction]
fn kendall_tau(truth: Vec<f64>, estimate: Vec<f64>) -> PyResult<Option<f64>> {
    let tau = sparseeval::kendall_tau(&truth, &estimate).map_err(to_py_err)?;
    Ok(if tau.is_nan() { None } else { Some(tau) })
}

/// Count of models in each split as (train, validation, test).
#[pyfunction]
fn split_sizes(matrix: &PyMatrix) -> (usize, usize, usize) {
    (
        matrix.inner.models_in(Split::Train).len(),
        matrix.inner.models_in(Split::Validation).len(),
        matrix.inner.models_in(Split::Test).len(),
    )
}

#[pymodule]
fn sparseeval_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMatrix>()?;
    m.add_class::<ClusterSummary>()?;
    m.add_class::<Estimator>()?;
    m.add_class::<PipelineResult>()?;
    m.add_function(wrap_pyfunction!(synthetic_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(ingest_csv, m)?)?;
    m.add_function(wrap_pyfunction!(item_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(cluster_items, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans_anchors, m)?)?;
    m.add_function(wrap_pyfunction!(random_anchors, m)?)?;
    m.add_function(wrap_pyfunction!(train_estimator, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(mae, m)?)?;
    m.add_function(wrap_pyfunction!(kendall_tau, m)?)?;
    m.add_function(wrap_pyfunction!(split_sizes, m)?)?;
    Ok(())
}
