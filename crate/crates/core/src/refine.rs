//! Task-aware anchor refinement: score candidates by residual correlation,
//! score anchors by input-gradient magnitude, and swap weakest-for-strongest
//! once per round with a freshly trained proxy.

use std::time::Instant;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::anchors::{self, AnchorSet};
use crate::error::{Error, Result};
use crate::matrix::{ScoreMatrix, Split};
use crate::metrics::{self, EvalReport};
use crate::predictor::{self, Hyperparams, TrainReport, WeightPredictor};

/// Gradient-descent schedule for the linear refinement proxy.
/// The weights are deliberately left short of the closed-form optimum: the
/// anchor scores |s_i^T r| of a fully converged linear fit are all zero,
/// which destroys the ranking the swap rule needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearProxyConfig {
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for LinearProxyConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 0.02,
        }
    }
}

/// Which proxy model drives a refinement round.
#[derive(Debug, Clone)]
pub enum ProxyMode {
    Mlp(Hyperparams),
    Linear(LinearProxyConfig),
}

/// Linear proxy weights on the current anchor columns.
#[derive(Debug, Clone)]
pub struct LinearProxy {
    pub anchor_indices: Vec<usize>,
    pub weights: Array1<f64>,
}

impl LinearProxy {
    /// Full-batch gradient descent on the mean squared reconstruction error,
    /// starting from zero weights.
    pub fn fit(matrix: &ScoreMatrix, anchors: &AnchorSet, config: &LinearProxyConfig) -> Result<Self> {
        let rows = matrix.models_in(Split::Train);
        if rows.is_empty() {
            return Err(Error::EmptySplit { split: "train" });
        }
        let a = design(matrix, anchors.indices(), &rows);
        let y = targets(matrix, &rows);
        let m = rows.len() as f64;
        let mut w = Array1::zeros(anchors.k());
        for _ in 0..config.epochs {
            let r = &a.dot(&w) - &y;
            let grad = a.t().dot(&r) * (2.0 / m);
            w.scaled_add(-config.learning_rate, &grad);
        }
        Ok(Self {
            anchor_indices: anchors.indices().to_vec(),
            weights: w,
        })
    }

    pub fn predict_rows(&self, matrix: &ScoreMatrix, rows: &[usize]) -> Array1<f64> {
        let a = design(matrix, &self.anchor_indices, rows);
        a.dot(&self.weights)
    }

    pub fn residuals(&self, matrix: &ScoreMatrix, split: Split) -> Result<Array1<f64>> {
        let rows = matrix.models_in(split);
        if rows.is_empty() {
            return Err(Error::EmptySplit { split: "train" });
        }
        let out = self.predict_rows(matrix, &rows);
        Ok(&out - &targets(matrix, &rows))
    }
}

/// A trained proxy of either kind.
#[derive(Debug, Clone)]
pub enum Proxy {
    Mlp(WeightPredictor),
    Linear(LinearProxy),
}

impl Proxy {
    pub fn anchor_indices(&self) -> &[usize] {
        match self {
            Proxy::Mlp(p) => p.anchor_indices(),
            Proxy::Linear(p) => &p.anchor_indices,
        }
    }

    fn train_residuals(&self, matrix: &ScoreMatrix) -> Result<Array1<f64>> {
        match self {
            Proxy::Mlp(p) => predictor::residuals(p, matrix, Split::Train),
            Proxy::Linear(p) => p.residuals(matrix, Split::Train),
        }
    }
}

fn design(matrix: &ScoreMatrix, items: &[usize], rows: &[usize]) -> Array2<f64> {
    let scores = matrix.scores();
    Array2::from_shape_fn((rows.len(), items.len()), |(r, c)| {
        scores[(rows[r], items[c])]
    })
}

fn targets(matrix: &ScoreMatrix, rows: &[usize]) -> Array1<f64> {
    let truths = matrix.true_scores();
    Array1::from_iter(rows.iter().map(|&r| truths[r]))
}

/// Candidate importance: |s_i^T e| between each non-anchor column and the
/// training residual vector. Returned in ascending item order.
pub fn candidate_scores(
    matrix: &ScoreMatrix,
    proxy: &Proxy,
    anchors: &AnchorSet,
) -> Result<Vec<(usize, f64)>> {
    let e = proxy.train_residuals(matrix)?;
    let rows = matrix.models_in(Split::Train);
    let scores = matrix.scores();
    let mut out = Vec::new();
    for item in 0..matrix.n_items() {
        if anchors.contains(item) {
            continue;
        }
        let dot: f64 = rows
            .iter()
            .zip(e.iter())
            .map(|(&r, &ej)| scores[(r, item)] * ej)
            .sum();
        out.push((item, dot.abs()));
    }
    Ok(out)
}

/// Anchor importance per anchor, aligned with the anchor order.
///
/// MLP proxy: mean absolute gradient of the reconstruction loss with respect
/// to the anchor's score column. Linear proxy: |s_i^T e|, the same residual
/// correlation the candidate score uses.
pub fn anchor_scores(
    matrix: &ScoreMatrix,
    proxy: &Proxy,
    anchors: &AnchorSet,
) -> Result<Vec<(usize, f64)>> {
    match proxy {
        Proxy::Mlp(p) => {
            let g = predictor::input_gradient(p, matrix, Split::Train)?;
            let m = g.nrows() as f64;
            Ok(anchors
                .indices()
                .iter()
                .enumerate()
                .map(|(pos, &item)| {
                    let mean_abs = g.column(pos).iter().map(|v| v.abs()).sum::<f64>() / m;
                    (item, mean_abs)
                })
                .collect())
        }
        Proxy::Linear(p) => {
            let e = p.residuals(matrix, Split::Train)?;
            let rows = matrix.models_in(Split::Train);
            let scores = matrix.scores();
            Ok(anchors
                .indices()
                .iter()
                .map(|&item| {
                    let dot: f64 = rows
                        .iter()
                        .zip(e.iter())
                        .map(|(&r, &ej)| scores[(r, item)] * ej)
                        .sum();
                    (item, dot.abs())
                })
                .collect())
        }
    }
}

/// One refinement round as recorded in the trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefineRound {
    pub round_index: usize,
    /// Anchor items at the start of the round, in anchor order.
    pub anchor_items: Vec<usize>,
    /// Anchor importance per anchor, aligned with `anchor_items`.
    pub ais_per_anchor: Vec<f64>,
    /// Highest-scoring candidates as (item index, score), best first.
    pub cis_top_candidates: Vec<(usize, f64)>,
    pub removed: usize,
    pub added: usize,
    /// Accuracy-scale MAE (%) of the round's proxy on the validation split;
    /// NaN when that split is empty.
    pub proxy_validation_mae: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RefinementTrace {
    pub rounds: Vec<RefineRound>,
}

#[derive(Debug, Clone)]
pub struct RefineOptions {
    pub proxy: ProxyMode,
    /// Reuse the previous round's MLP parameters, re-seeding only the input
    /// column of the swapped anchor. Off by default: each round trains fresh.
    pub warm_start: bool,
    /// Base seed; round r trains its proxy with seed + r.
    pub seed: u64,
    /// How many top candidates to record per round.
    pub cis_top: usize,
}

impl RefineOptions {
    pub fn mlp(hp: Hyperparams, seed: u64) -> Self {
        Self {
            proxy: ProxyMode::Mlp(hp),
            warm_start: false,
            seed,
            cis_top: 10,
        }
    }

    pub fn linear(config: LinearProxyConfig, seed: u64) -> Self {
        Self {
            proxy: ProxyMode::Linear(config),
            warm_start: false,
            seed,
            cis_top: 10,
        }
    }
}

/// Run `rounds` refinement rounds, one swap per round: train a proxy on the
/// current anchors, drop the anchor with the lowest importance, add the
/// candidate with the highest (ties break to the lowest item index).
/// Removed anchors rejoin the candidate pool in later rounds.
pub fn refine(
    matrix: &ScoreMatrix,
    anchors: &AnchorSet,
    rounds: usize,
    options: &RefineOptions,
) -> Result<(AnchorSet, RefinementTrace)> {
    let mut current = anchors.clone();
    let mut trace = RefinementTrace::default();
    if rounds == 0 {
        return Ok((current, trace));
    }
    if current.k() >= matrix.n_items() {
        return Err(Error::NoCandidates);
    }

    let mut warm: Option<WeightPredictor> = None;
    for round in 1..=rounds {
        let round_seed = options.seed.wrapping_add(round as u64);
        let (proxy, proxy_validation_mae) = match &options.proxy {
            ProxyMode::Mlp(hp) => {
                let hp_round = Hyperparams {
                    seed: round_seed,
                    ..*hp
                };
                let (p, report) = match warm.take() {
                    Some(start) if options.warm_start => {
                        predictor::train_warm(start, matrix, &hp_round)?
                    }
                    _ => predictor::train(matrix, &current, &hp_round)?,
                };
                let mae = report.validation_mae;
                (Proxy::Mlp(p), mae)
            }
            ProxyMode::Linear(config) => {
                let p = LinearProxy::fit(matrix, &current, config)?;
                let mae = linear_validation_mae(&p, matrix)?;
                (Proxy::Linear(p), mae)
            }
        };

        let ais = anchor_scores(matrix, &proxy, &current)?;
        let cis = candidate_scores(matrix, &proxy, &current)?;

        let (removed, _) = ais
            .iter()
            .copied()
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)))
            .expect("anchor set is non-empty");
        let (added, _) = cis
            .iter()
            .copied()
            .max_by(|a, b| {
                a.1.partial_cmp(&b.1)
                    .unwrap()
                    .then(b.0.cmp(&a.0)) // prefer the lower index on ties
            })
            .ok_or(Error::NoCandidates)?;

        let mut cis_sorted = cis.clone();
        cis_sorted.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        cis_sorted.truncate(options.cis_top);

        trace.rounds.push(RefineRound {
            round_index: round,
            anchor_items: current.indices().to_vec(),
            ais_per_anchor: ais.iter().map(|&(_, v)| v).collect(),
            cis_top_candidates: cis_sorted,
            removed,
            added,
            proxy_validation_mae,
        });

        if options.warm_start {
            if let Proxy::Mlp(p) = &proxy {
                let pos = current
                    .position_of(removed)
                    .expect("removed item is an anchor");
                warm = Some(p.with_swapped_anchor(
                    pos,
                    added,
                    matrix.item_ids()[added].clone(),
                    round_seed.wrapping_add(0x5eed),
                )?);
            }
        }

        current.swap(round, removed, added)?;
    }
    Ok((current, trace))
}

fn linear_validation_mae(proxy: &LinearProxy, matrix: &ScoreMatrix) -> Result<f64> {
    let rows = matrix.models_in(Split::Validation);
    if rows.is_empty() {
        return Ok(f64::NAN);
    }
    let est: Vec<f64> = proxy
        .predict_rows(matrix, &rows)
        .iter()
        .map(|v| v.clamp(-1.0, 1.0))
        .collect();
    let truth: Vec<f64> = rows.iter().map(|&r| matrix.true_scores()[r]).collect();
    metrics::mae(&truth, &est)
}

/// How the pipeline picks its initial anchors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InitChoice {
    #[default]
    Adaptive,
    Kmeans,
    Random,
}

/// Everything the end-to-end pipeline needs beyond the matrix itself.
#[derive(Debug, Clone)]
pub struct PipelineParams {
    pub k: usize,
    pub rounds: usize,
    pub init: InitChoice,
    pub proxy_epochs: usize,
    pub final_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub hidden: usize,
    pub loss: predictor::LossKind,
    pub seed: u64,
    pub linear_proxy: bool,
    pub warm_start: bool,
    pub skip_refinement: bool,
}

impl Default for PipelineParams {
    fn default() -> Self {
        let hp = Hyperparams::default();
        Self {
            k: 10,
            rounds: 10,
            init: InitChoice::Adaptive,
            proxy_epochs: 50,
            final_epochs: 500,
            learning_rate: hp.learning_rate,
            batch_size: hp.batch_size,
            hidden: hp.hidden,
            loss: hp.loss,
            seed: 0,
            linear_proxy: false,
            warm_start: false,
            skip_refinement: false,
        }
    }
}

impl PipelineParams {
    fn hyperparams(&self, epochs: usize, seed: u64) -> Hyperparams {
        Hyperparams {
            learning_rate: self.learning_rate,
            epochs,
            batch_size: self.batch_size,
            hidden: self.hidden,
            seed,
            loss: self.loss,
        }
    }
}

/// All artifacts of one pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub anchors: AnchorSet,
    pub predictor: WeightPredictor,
    pub trace: RefinementTrace,
    pub report: EvalReport,
    pub train_report: TrainReport,
}

/// End-to-end: initialize anchors, refine them, train the final estimator,
/// evaluate on the test split.
pub fn run_pipeline(
    matrix: &ScoreMatrix,
    params: &PipelineParams,
    config_fingerprint: String,
) -> Result<PipelineOutcome> {
    let started = Instant::now();
    if params.k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let test_rows = matrix.models_in(Split::Test);
    if test_rows.is_empty() {
        return Err(Error::EmptySplit { split: "test" });
    }

    let proxy_hp = params.hyperparams(params.proxy_epochs, params.seed);
    let anchors = match params.init {
        InitChoice::Adaptive => anchors::adaptive_init(matrix, params.k, params.seed, &proxy_hp)?,
        InitChoice::Kmeans => anchors::kmeans_items(matrix, params.k, params.seed, 10)?,
        InitChoice::Random => anchors::random_items(matrix.n_items(), params.k, params.seed)?,
    };

    let (anchors, trace) = if params.skip_refinement || params.rounds == 0 {
        (anchors, RefinementTrace::default())
    } else {
        let mut options = if params.linear_proxy {
            RefineOptions::linear(LinearProxyConfig::default(), params.seed)
        } else {
            RefineOptions::mlp(proxy_hp, params.seed)
        };
        options.warm_start = params.warm_start;
        // keep every candidate score so the emitted importance tables hold
        // the full per-round distributions
        options.cis_top = matrix.n_items();
        refine(matrix, &anchors, params.rounds, &options)?
    };

    let final_hp = params.hyperparams(params.final_epochs, params.seed);
    let (final_predictor, train_report) = predictor::train(matrix, &anchors, &final_hp)?;

    let estimates = final_predictor.predict_rows(matrix, &test_rows);
    let truths = matrix.true_scores();
    let truth_vec: Vec<f64> = test_rows.iter().map(|&r| truths[r]).collect();
    let ids: Vec<String> = test_rows
        .iter()
        .map(|&r| matrix.model_ids()[r].clone())
        .collect();
    let report = EvalReport::from_scores(
        params.k,
        &ids,
        &truth_vec,
        estimates.as_slice().unwrap(),
        config_fingerprint,
        started.elapsed().as_secs_f64(),
    )?;

    Ok(PipelineOutcome {
        anchors,
        predictor: final_predictor,
        trace,
        report,
        train_report,
    })
}

/// Verify the swap-legality bookkeeping of a trace against an anchor set's
/// history (used by tests and the acceptance suite).
pub fn trace_is_consistent(trace: &RefinementTrace, k: usize) -> bool {
    for (i, round) in trace.rounds.iter().enumerate() {
        if round.round_index != i + 1 {
            return false;
        }
        if round.anchor_items.len() != k || round.ais_per_anchor.len() != k {
            return false;
        }
        if !round.anchor_items.contains(&round.removed) {
            return false;
        }
        if round.anchor_items.contains(&round.added) {
            return false;
        }
        if round.removed == round.added {
            return false;
        }
    }
    true
}
