//! Orchestration behind the command-line interface: each subcommand is a
//! library function so tests can drive file-level behavior directly.
//!
//! All artifacts are written atomically (temp file + rename) after the whole
//! computation succeeds, so interrupted or failed runs leave no partial
//! output behind.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorSet, InitMethod, SwapRecord};
use crate::config::{InputSource, PipelineConfig};
use crate::error::{Error, Result};
use crate::matrix::{self, Encoding, ScoreMatrix};
use crate::metrics::EvalReport;
use crate::predictor::WeightPredictor;
use crate::refine;
use crate::similarity::{self, SimilarityMatrix};
use crate::spectral;

/// Cap rayon's global pool from the SPARSEEVAL_THREADS environment variable.
/// Call once at process start; later calls are ignored.
pub fn init_thread_cap() {
    if let Ok(value) = std::env::var("SPARSEEVAL_THREADS") {
        if let Ok(threads) = value.trim().parse::<usize>() {
            if threads >= 1 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build_global();
            }
        }
    }
}

/// Load the configured score matrix and assign splits.
pub fn load_matrix(config: &PipelineConfig) -> Result<ScoreMatrix> {
    let matrix = match &config.input {
        InputSource::Csv { path, encoding } => {
            if !path.exists() {
                return Err(Error::InvalidArgument(format!(
                    "input file not found: {}",
                    path.display()
                )));
            }
            matrix::ingest_csv(path, *encoding)?
        }
        InputSource::Synthetic(spec) => matrix::generate_synthetic(spec)?,
    };
    matrix.assign_splits(&config.split)
}

/// On-disk form of an anchor set, with item ids resolved.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnchorFile {
    pub item_ids: Vec<String>,
    pub indices: Vec<usize>,
    pub k: usize,
    pub init_method: InitMethod,
    pub history: Vec<SwapRecord>,
}

impl AnchorFile {
    pub fn new(anchors: &AnchorSet, matrix: &ScoreMatrix) -> Self {
        Self {
            item_ids: anchors
                .indices()
                .iter()
                .map(|&i| matrix.item_ids()[i].clone())
                .collect(),
            indices: anchors.indices().to_vec(),
            k: anchors.k(),
            init_method: anchors.init_method(),
            history: anchors.history().to_vec(),
        }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Write every (path, bytes) pair atomically; on any failure remove whatever
/// already landed so the output directory never holds a partial run.
fn write_all(files: Vec<(PathBuf, Vec<u8>)>) -> Result<()> {
    let mut written: Vec<PathBuf> = Vec::new();
    for (path, bytes) in files {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        match write_atomic(&path, &bytes) {
            Ok(()) => written.push(path),
            Err(err) => {
                for done in written {
                    let _ = fs::remove_file(done);
                }
                return Err(err);
            }
        }
    }
    Ok(())
}

fn similarity_csv(sim: &SimilarityMatrix) -> Vec<u8> {
    let mut out = String::new();
    out.push_str("label");
    for label in sim.labels() {
        out.push(',');
        out.push_str(label);
    }
    out.push('\n');
    let values = sim.values();
    for (i, label) in sim.labels().iter().enumerate() {
        out.push_str(label);
        for j in 0..sim.len() {
            out.push(',');
            out.push_str(&format!("{}", values[(i, j)]));
        }
        out.push('\n');
    }
    out.into_bytes()
}

fn permuted_csv(labels: &[String], values: &Array2<f64>) -> Vec<u8> {
    let mut out = String::new();
    out.push_str("label");
    for label in labels {
        out.push(',');
        out.push_str(label);
    }
    out.push('\n');
    for (i, label) in labels.iter().enumerate() {
        out.push_str(label);
        for j in 0..labels.len() {
            out.push(',');
            out.push_str(&format!("{}", values[(i, j)]));
        }
        out.push('\n');
    }
    out.into_bytes()
}

/// Similarity matrices, spectral clustering and block statistics.
/// Writes item_similarity.csv, model_similarity.csv, cluster_report.json,
/// sparsity_summary.json and permuted_item_similarity.csv.
pub fn cmd_analyze(config: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let matrix = load_matrix(config)?;
    let item_sim = similarity::item_similarity(&matrix)?;
    let model_sim = similarity::model_similarity(&matrix)?;
    let report = spectral::spectral_cluster(&item_sim, config.clusters, config.seed)?;
    let summary = similarity::sparsity_summary(&report, &item_sim)?;
    let (labels, permuted) = similarity::permuted_similarity(&report, &item_sim)?;

    let dir = &config.output_dir;
    let files = vec![
        (dir.join("item_similarity.csv"), similarity_csv(&item_sim)),
        (dir.join("model_similarity.csv"), similarity_csv(&model_sim)),
        (
            dir.join("cluster_report.json"),
            serde_json::to_vec_pretty(&report)?,
        ),
        (
            dir.join("sparsity_summary.json"),
            serde_json::to_vec_pretty(&summary)?,
        ),
        (
            dir.join("permuted_item_similarity.csv"),
            permuted_csv(&labels, &permuted),
        ),
    ];
    let paths = files.iter().map(|(p, _)| p.clone()).collect();
    write_all(files)?;
    Ok(paths)
}

fn eval_per_model_csv(report: &EvalReport) -> Vec<u8> {
    let mut out = String::from("model_id,true_score,estimate,residual\n");
    for row in &report.per_model {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.model_id, row.true_score, row.estimate, row.residual
        ));
    }
    out.into_bytes()
}

/// Per-round importance scores in long format: one row per anchor (ais) and
/// per candidate (cis), ready for histogram plotting.
fn importance_scores_csv(trace: &refine::RefinementTrace) -> Vec<u8> {
    let mut out = String::from("round,kind,item,score\n");
    for round in &trace.rounds {
        for (item, score) in round.anchor_items.iter().zip(round.ais_per_anchor.iter()) {
            out.push_str(&format!("{},ais,{},{}\n", round.round_index, item, score));
        }
        for &(item, score) in &round.cis_top_candidates {
            out.push_str(&format!("{},cis,{},{}\n", round.round_index, item, score));
        }
    }
    out.into_bytes()
}

/// The full pipeline: init, refinement, final training, test evaluation.
/// Writes anchors.json, predictor.json, trace.json, report.json and
/// eval_per_model.csv.
pub fn cmd_run(config: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let matrix = load_matrix(config)?;
    let params = config.pipeline_params();
    let outcome = refine::run_pipeline(&matrix, &params, config.fingerprint())?;

    let dir = &config.output_dir;
    let anchor_file = AnchorFile::new(&outcome.anchors, &matrix);
    let files = vec![
        (
            dir.join("anchors.json"),
            serde_json::to_vec_pretty(&anchor_file)?,
        ),
        (
            dir.join("predictor.json"),
            outcome.predictor.to_json()?.into_bytes(),
        ),
        (
            dir.join("trace.json"),
            serde_json::to_vec_pretty(&outcome.trace)?,
        ),
        (
            dir.join("report.json"),
            serde_json::to_vec_pretty(&outcome.report)?,
        ),
        (
            dir.join("eval_per_model.csv"),
            eval_per_model_csv(&outcome.report),
        ),
        (
            dir.join("importance_scores.csv"),
            importance_scores_csv(&outcome.trace),
        ),
    ];
    let paths = files.iter().map(|(p, _)| p.clone()).collect();
    write_all(files)?;
    Ok(paths)
}

/// Estimate new models from anchor-only scores.
///
/// The CSV must carry exactly the anchor item ids as columns (any order);
/// each row yields one accuracy estimate in [0, 1].
pub fn cmd_estimate(
    predictor_path: &Path,
    anchors_path: &Path,
    scores_path: &Path,
    encoding: Encoding,
    out_path: &Path,
) -> Result<PathBuf> {
    for path in [predictor_path, anchors_path, scores_path] {
        if !path.exists() {
            return Err(Error::InvalidArgument(format!(
                "input file not found: {}",
                path.display()
            )));
        }
    }
    let predictor = WeightPredictor::from_json(&fs::read_to_string(predictor_path)?)?;
    let anchor_file: AnchorFile = serde_json::from_str(&fs::read_to_string(anchors_path)?)?;
    if predictor.anchor_item_ids() != anchor_file.item_ids.as_slice() {
        return Err(Error::InvalidArgument(
            "predictor and anchor file disagree on anchor item ids".into(),
        ));
    }

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(scores_path)?;
    let headers = reader.headers()?.clone();
    let got: Vec<String> = headers.iter().skip(1).map(|s| s.to_string()).collect();

    let wanted = &anchor_file.item_ids;
    let missing: Vec<String> = wanted
        .iter()
        .filter(|id| !got.contains(id))
        .cloned()
        .collect();
    let extra: Vec<String> = got
        .iter()
        .filter(|id| !wanted.contains(id))
        .cloned()
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::SchemaMismatch { missing, extra });
    }
    // column position of each anchor id, in predictor anchor order
    let positions: Vec<usize> = wanted
        .iter()
        .map(|id| got.iter().position(|g| g == id).unwrap() + 1)
        .collect();

    let mut out = String::from("model_id,estimated_accuracy\n");
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        let model_id = record.get(0).unwrap_or("").to_string();
        let mut scores = Vec::with_capacity(positions.len());
        for (anchor_pos, &col) in positions.iter().enumerate() {
            let cell = record.get(col).ok_or_else(|| Error::Parse {
                row: row_idx,
                column: col,
                message: "missing cell".into(),
            })?;
            scores.push(parse_score_cell(cell, encoding, row_idx, anchor_pos)?);
        }
        let estimate = predictor.forward(ndarray::Array1::from_vec(scores).view())?;
        let accuracy = ((estimate.clamp(-1.0, 1.0)) + 1.0) / 2.0;
        out.push_str(&format!("{model_id},{accuracy}\n"));
    }

    write_all(vec![(out_path.to_path_buf(), out.into_bytes())])?;
    Ok(out_path.to_path_buf())
}

fn parse_score_cell(cell: &str, encoding: Encoding, row: usize, column: usize) -> Result<f64> {
    let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
        row,
        column,
        message: format!("cell `{cell}` is not a number"),
    })?;
    match encoding {
        Encoding::ZeroOne if v == 0.0 || v == 1.0 => Ok(2.0 * v - 1.0),
        Encoding::PlusMinus if v == -1.0 || v == 1.0 => Ok(v),
        _ => Err(Error::Parse {
            row,
            column,
            message: format!("cell `{cell}` is not valid for the {encoding:?} encoding"),
        }),
    }
}

/// Merge run reports into one long-format CSV
/// {run_id, k, mae_percent, kendall_tau}, sorted by k then run id.
pub fn cmd_report(report_paths: &[PathBuf], out_path: &Path) -> Result<PathBuf> {
    if report_paths.is_empty() {
        return Err(Error::InvalidArgument("no report files given".into()));
    }
    let mut rows: Vec<(usize, String, f64, Option<f64>)> = Vec::new();
    for path in report_paths {
        if !path.exists() {
            return Err(Error::InvalidArgument(format!(
                "report not found: {}",
                path.display()
            )));
        }
        let report: EvalReport = serde_json::from_str(&fs::read_to_string(path)?)?;
        let run_id = path
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| path.display().to_string());
        rows.push((report.k, run_id, report.mae_percent, report.kendall_tau));
    }
    rows.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut out = String::from("run_id,k,mae_percent,kendall_tau\n");
    for (k, run_id, mae, tau) in rows {
        let tau_text = match tau {
            Some(v) => format!("{v}"),
            None => "nan".to_string(),
        };
        out.push_str(&format!("{run_id},{k},{mae},{tau_text}\n"));
    }
    write_all(vec![(out_path.to_path_buf(), out.into_bytes())])?;
    Ok(out_path.to_path_buf())
}

/// Emit the configured synthetic matrix as a {0,1} CSV.
pub fn cmd_synth(config: &PipelineConfig, out_path: &Path) -> Result<PathBuf> {
    let spec = match &config.input {
        InputSource::Synthetic(spec) => spec,
        InputSource::Csv { .. } => {
            return Err(Error::InvalidArgument(
                "synth needs a synthetic input source in the config".into(),
            ))
        }
    };
    let matrix = matrix::generate_synthetic(spec)?;
    let mut bytes = Vec::new();
    matrix.export_csv(&mut bytes, Encoding::ZeroOne)?;
    write_all(vec![(out_path.to_path_buf(), bytes)])?;
    Ok(out_path.to_path_buf())
}

/// Group the emitted artifact names by command, mostly for `--help` text and
/// the README; kept here so the list stays next to the code that writes them.
pub fn artifact_manifest() -> BTreeMap<&'static str, Vec<&'static str>> {
    let mut map = BTreeMap::new();
    map.insert(
        "analyze",
        vec![
            "item_similarity.csv",
            "model_similarity.csv",
            "cluster_report.json",
            "sparsity_summary.json",
            "permuted_item_similarity.csv",
        ],
    );
    map.insert(
        "run",
        vec![
            "anchors.json",
            "predictor.json",
            "trace.json",
            "report.json",
            "eval_per_model.csv",
            "importance_scores.csv",
        ],
    );
    map
}
