//! Benchmark compression for model-item score matrices.
//!
//! Given an m x n matrix of per-item model scores in {-1, +1}, this crate
//! selects k anchor items, trains a small neural estimator that predicts a
//! model's full-benchmark mean score from its anchor scores alone, and
//! iteratively refines the anchor set using gradient- and residual-based
//! importance scores. Accuracy-scale MAE and Kendall's tau measure how well
//! the compressed benchmark tracks the full one.

pub mod anchors;
pub mod cli;
pub mod config;
pub mod error;
pub mod kmeans;
pub mod linalg;
pub mod linear;
pub mod matrix;
pub mod metrics;
pub mod oracle;
pub mod predictor;
pub mod refine;
pub mod similarity;
pub mod spectral;

pub use anchors::{adaptive_init, kmeans_items, random_items, AnchorSet, InitMethod};
pub use error::{Error, Result};
pub use matrix::{
    generate_synthetic, ingest_csv, to_accuracy, Encoding, ScoreMatrix, Split, SplitMode,
    SplitSpec, SyntheticSpec,
};
pub use metrics::{kendall_tau, mae, EvalReport};
pub use predictor::{
    input_gradient, residuals, train, Hyperparams, LossKind, TrainReport, WeightPredictor,
};
pub use refine::{
    candidate_scores, anchor_scores, refine, run_pipeline, InitChoice, PipelineOutcome,
    PipelineParams, RefinementTrace,
};
pub use similarity::{item_similarity, model_similarity, SimilarityMatrix};
pub use spectral::{spectral_cluster, ClusterReport};
